//! Binary model checkpoints.
//!
//! Layout (all integers u32 little-endian, all floats f64 little-endian):
//!
//! ```text
//! "NNCK" | version | input_dim | hidden_width | depth | num_classes | output | has_feedback
//! per block: weight[out×in] bias[out] gamma[out] beta[out] running_mean[out] running_var[out]
//! head: weight[K×hidden] bias[K]
//! if has_feedback: block feedback matrices (blocks 1..depth) then the head feedback matrix
//! ```

use std::path::Path;

use super::{ArchSpec, Block, Dense, Feedback, Model, OutputKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(super) fn encode(model: &Model, out: &mut Vec<u8>) {
    let a = model.arch;
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(out, CHECKPOINT_VERSION);
    for v in [a.input_dim, a.hidden_width, a.depth, a.num_classes] {
        put_u32(out, v as u32);
    }
    put_u32(out, a.output.code());
    put_u32(out, u32::from(model.feedback.is_some()));
    for b in &model.blocks {
        for t in [
            &b.linear.weight,
            &b.linear.bias,
            &b.gamma,
            &b.beta,
            &b.running_mean,
            &b.running_var,
        ] {
            put_tensor(out, t);
        }
    }
    put_tensor(out, &model.head.weight);
    put_tensor(out, &model.head.bias);
    if let Some(fb) = &model.feedback {
        for t in &fb.blocks {
            put_tensor(out, t);
        }
        put_tensor(out, &fb.head);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.path,
                    format!(
                        "truncated checkpoint: need {n} bytes at offset {}",
                        self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::format(self.path, e.to_string()))
    }
}

pub(super) fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected NNCK"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let input_dim = r.u32()? as usize;
    let hidden_width = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let output = OutputKind::from_code(r.u32()?)
        .ok_or_else(|| Error::format(path, "unknown output kind"))?;
    let has_feedback = match r.u32()? {
        0 => false,
        1 => true,
        v => return Err(Error::format(path, format!("bad feedback flag {v}"))),
    };
    let arch = ArchSpec {
        input_dim,
        hidden_width,
        depth,
        num_classes,
        output,
    };
    arch.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let dims = arch.layer_dims();
    let mut blocks = Vec::with_capacity(depth);
    for &(fi, fo) in &dims[..depth] {
        let block = Block {
            linear: Dense {
                weight: r.tensor(&[fo, fi])?,
                bias: r.tensor(&[fo])?,
            },
            gamma: r.tensor(&[fo])?,
            beta: r.tensor(&[fo])?,
            running_mean: r.tensor(&[fo])?,
            running_var: r.tensor(&[fo])?,
        };
        if block.running_var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::format(path, "running variance must be positive"));
        }
        blocks.push(block);
    }
    let (fi, fo) = dims[depth];
    let head = Dense {
        weight: r.tensor(&[fo, fi])?,
        bias: r.tensor(&[fo])?,
    };
    let feedback = if has_feedback {
        let mut fb_blocks = Vec::with_capacity(depth - 1);
        for &(fi, fo) in &dims[1..depth] {
            fb_blocks.push(r.tensor(&[fi, fo])?);
        }
        Some(Feedback {
            blocks: fb_blocks,
            head: r.tensor(&[fi, fo])?,
        })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(Model {
        arch,
        blocks,
        head,
        feedback,
        generation: 0,
    })
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        encode(self, &mut out);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        decode(bytes, Path::new("<memory>"))
    }
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
