//! CIFAR-10 binary version: each record is one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, each plane row-major).

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3072;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
}

/// Reads one batch file holding exactly `records` records.
pub fn read_cifar_batch(path: &Path, records: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = records * CIFAR_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes ({records} records), found {}",
                bytes.len()
            ),
        ));
    }
    let mut labels = Vec::with_capacity(records);
    let mut images = Vec::with_capacity(records * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::CorruptData {
                path: path.into(),
                message: format!("record {i} has label byte {}", rec[0]),
            });
        }
        labels.push(u16::from(rec[0]));
        images.extend_from_slice(&rec[1..]);
    }
    let name = path
        .file_stem()
        .map_or_else(|| "cifar10".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, images, labels, 10, (3, 32, 32))
}

/// Writes a dataset in the CIFAR-10 record layout.
pub fn write_cifar_batch(ds: &Dataset, path: &Path) -> Result<()> {
    if (ds.channels, ds.height, ds.width) != (3, 32, 32) || ds.num_classes > 10 {
        return Err(Error::InvalidArgument(
            "CIFAR records hold 3×32×32 images with labels 0..9".into(),
        ));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend_from_slice(ds.image(i));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn concat(name: &str, parts: Vec<Dataset>) -> Dataset {
    let mut images = Vec::with_capacity(parts.iter().map(|p| p.images.len()).sum());
    let mut labels = Vec::new();
    for p in parts {
        images.extend(p.images);
        labels.extend(p.labels);
    }
    Dataset {
        name: name.into(),
        images,
        labels,
        num_classes: 10,
        channels: 3,
        height: 32,
        width: 32,
    }
}

/// Loads the five training batches (50 000 samples) and the test batch
/// (10 000 samples) from `dir`. Nothing is returned unless every file
/// validates.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let train = CIFAR_TRAIN_FILES
        .iter()
        .map(|f| read_cifar_batch(&dir.join(f), CIFAR_BATCH_RECORDS))
        .collect::<Result<Vec<_>>>()?;
    let test = read_cifar_batch(&dir.join(CIFAR_TEST_FILE), CIFAR_BATCH_RECORDS)?;
    Ok(Cifar10 {
        train: concat("cifar10-train", train),
        test: Dataset {
            name: "cifar10-test".into(),
            ..test
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(records: usize) -> Dataset {
        let labels: Vec<u16> = (0..records).map(|i| (i % 10) as u16).collect();
        let images = (0..records * 3072).map(|i| (i * 31 % 251) as u8).collect();
        Dataset::new("s", images, labels, 10, (3, 32, 32)).unwrap()
    }

    #[test]
    fn batch_file_size_is_fixed() {
        assert_eq!(CIFAR_BATCH_RECORDS * CIFAR_RECORD_BYTES, 30_730_000);
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let ds = synthetic(25);
        write_cifar_batch(&ds, &p).unwrap();
        let back = read_cifar_batch(&p, 25).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        // label byte followed by the red plane
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw[CIFAR_RECORD_BYTES], 1);
        assert_eq!(&raw[1..1025], &ds.image(0)[..1024]);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        write_cifar_batch(&synthetic(3), &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        std::fs::write(&p, &raw[..raw.len() - 10]).unwrap();
        match read_cifar_batch(&p, 3) {
            Err(Error::Format { message, .. }) => {
                assert!(
                    message.contains("9219") && message.contains("9209"),
                    "{message}"
                )
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_label_is_corrupt_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        write_cifar_batch(&synthetic(2), &p).unwrap();
        let mut raw = std::fs::read(&p).unwrap();
        raw[CIFAR_RECORD_BYTES] = 10;
        std::fs::write(&p, raw).unwrap();
        assert!(matches!(
            read_cifar_batch(&p, 2),
            Err(Error::CorruptData { .. })
        ));
    }

    #[test]
    fn full_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic(CIFAR_BATCH_RECORDS);
        for f in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
            write_cifar_batch(&ds, &dir.path().join(f)).unwrap();
            assert_eq!(
                std::fs::metadata(dir.path().join(f)).unwrap().len(),
                30_730_000
            );
        }
        let c = load_cifar10(dir.path()).unwrap();
        assert_eq!(c.train.len(), 50_000);
        assert_eq!(c.test.len(), 10_000);
        assert_eq!(c.train.label_histogram(), vec![5000; 10]);
        std::fs::remove_file(dir.path().join(CIFAR_TEST_FILE)).unwrap();
        assert!(load_cifar10(dir.path()).is_err());
    }
}
