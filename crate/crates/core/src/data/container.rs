//! RNC1 raw dataset container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RNC1"
//! 4       4     version (u32 LE, = 1)
//! 8       4     count
//! 12      4     channels
//! 16      4     height
//! 20      4     width
//! 24      4     num_classes
//! 28      2·n   labels, u16 LE
//! ...     n·d   pixels, u8, sample-major, channel-planar
//! ```

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"RNC1";
pub const CONTAINER_VERSION: u32 = 1;
pub const CONTAINER_HEADER_BYTES: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl ContainerHeader {
    pub fn file_len(&self) -> usize {
        CONTAINER_HEADER_BYTES
            + 2 * self.count
            + self.count * self.channels * self.height * self.width
    }
}

fn u32_at(bytes: &[u8], off: usize) -> usize {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<ContainerHeader> {
    if bytes.len() < CONTAINER_HEADER_BYTES {
        return Err(Error::format(
            path,
            format!("file of {} bytes is shorter than the header", bytes.len()),
        ));
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::format(path, "bad magic, expected RNC1"));
    }
    let version = u32_at(bytes, 4) as u32;
    if version != CONTAINER_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported container version {version}"),
        ));
    }
    Ok(ContainerHeader {
        count: u32_at(bytes, 8),
        channels: u32_at(bytes, 12),
        height: u32_at(bytes, 16),
        width: u32_at(bytes, 20),
        num_classes: u32_at(bytes, 24),
    })
}

/// Reads just the header (used to bound-check configs without loading pixels).
pub fn read_container_header(path: &Path) -> Result<ContainerHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; CONTAINER_HEADER_BYTES];
    let mut got = 0;
    while got < buf.len() {
        match f.read(&mut buf[got..]).map_err(|e| Error::io(path, e))? {
            0 => break,
            k => got += k,
        }
    }
    parse_header(&buf[..got], path)
}

pub fn load_container(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    if bytes.len() != h.file_len() {
        return Err(Error::format(
            path,
            format!(
                "header declares {} samples ({} bytes) but file has {} bytes",
                h.count,
                h.file_len(),
                bytes.len()
            ),
        ));
    }
    let label_end = CONTAINER_HEADER_BYTES + 2 * h.count;
    let labels: Vec<u16> = bytes[CONTAINER_HEADER_BYTES..label_end]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    if let Some((i, l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| usize::from(l) >= h.num_classes)
    {
        return Err(Error::CorruptData {
            path: path.into(),
            message: format!(
                "sample {i} has label {l} but num_classes is {}",
                h.num_classes
            ),
        });
    }
    let name = path
        .file_stem()
        .map_or_else(|| "container".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        name,
        bytes[label_end..].to_vec(),
        labels,
        h.num_classes,
        (h.channels, h.height, h.width),
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_container(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(CONTAINER_HEADER_BYTES + 2 * ds.len() + ds.images.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    for v in [
        CONTAINER_VERSION as usize,
        ds.len(),
        ds.channels,
        ds.height,
        ds.width,
        ds.num_classes,
    ] {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&ds.images);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
