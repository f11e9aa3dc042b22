//! Datasets, preprocessing and batch streams.

mod cifar;
mod container;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gaussian_tensor, one_hot, uniform_labels, Tensor};

pub use cifar::{
    load_cifar10, read_cifar_batch, write_cifar_batch, Cifar10, CIFAR_BATCH_RECORDS,
    CIFAR_RECORD_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
pub use container::{
    load_container, read_container_header, write_container, ContainerHeader,
    CONTAINER_HEADER_BYTES, CONTAINER_MAGIC, CONTAINER_VERSION,
};

/// `u8` images with integer labels. Images are stored sample-major and
/// channel-planar: sample `i` occupies `images[i*d..(i+1)*d]` with
/// `d = channels·height·width`, one full plane per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<u8>,
        labels: Vec<u16>,
        num_classes: usize,
        (channels, height, width): (usize, usize, usize),
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            images,
            labels,
            num_classes,
            channels,
            height,
            width,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_dim() == 0 {
            return Err(Error::InvalidArgument(
                "dataset samples must have at least one value".into(),
            ));
        }
        if self.images.len() != self.labels.len() * self.sample_dim() {
            return Err(Error::Shape(format!(
                "{} image bytes for {} samples of dimension {}",
                self.images.len(),
                self.labels.len(),
                self.sample_dim()
            )));
        }
        if let Some(&l) = self
            .labels
            .iter()
            .find(|&&l| usize::from(l) >= self.num_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.sample_dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| usize::from(l)).collect()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }

    /// New dataset made of the listed samples, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.sample_dim();
        let mut images = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            images,
            labels,
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// SHA-256 over shape, labels and pixels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [
            self.num_classes,
            self.channels,
            self.height,
            self.width,
            self.len(),
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        h.update(&self.images);
        hex::encode(h.finalize())
    }
}

/// Per-class quotas as balanced as capacity allows: every class gets
/// `⌊n/K⌋` or `⌈n/K⌉` when it has enough samples; which classes receive the
/// remainder is decided by `rng`.
fn stratified_quotas(capacity: &[usize], n: usize, rng: &mut RngStream) -> Vec<usize> {
    let order = rng.permutation(capacity.len());
    let mut quotas = vec![0; capacity.len()];
    let mut remaining = n;
    while remaining > 0 {
        let mut progressed = false;
        for &c in &order {
            if remaining == 0 {
                break;
            }
            if quotas[c] < capacity[c] {
                quotas[c] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quotas
}

/// Indices of a class-stratified random subset of size `n`, in shuffled order.
pub fn subset_indices(ds: &Dataset, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} requested from {} samples",
            ds.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[usize::from(l)].push(i);
    }
    let capacity: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = stratified_quotas(&capacity, n, rng);
    let mut chosen = Vec::with_capacity(n);
    for (members, &q) in by_class.iter_mut().zip(&quotas) {
        rng.shuffle(members);
        chosen.extend_from_slice(&members[..q]);
    }
    rng.shuffle(&mut chosen);
    Ok(chosen)
}

/// Class-stratified random subset of size `n`.
pub fn subset(ds: &Dataset, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    Ok(ds.select(&subset_indices(ds, n, rng)?))
}

/// Per-channel mean and standard deviation of `pixel / 255`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over every pixel of each channel.
    pub fn compute(ds: &Dataset) -> Result<NormStats> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot compute statistics of an empty dataset".into(),
            ));
        }
        let plane = ds.height * ds.width;
        let count = (ds.len() * plane) as f64;
        let mut sum = vec![0.0; ds.channels];
        for img in ds.images.chunks(ds.sample_dim()) {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&p| f64::from(p) / 255.0)
                    .sum::<f64>();
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let mut sq = vec![0.0; ds.channels];
        for img in ds.images.chunks(ds.sample_dim()) {
            for (c, s) in sq.iter_mut().enumerate() {
                *s += img[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&p| (f64::from(p) / 255.0 - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
        let stats = NormStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Shape("mean and std lengths differ".into()));
        }
        if let Some(c) = self.std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "channel {c} has non-positive standard deviation {}",
                self.std[c]
            )));
        }
        Ok(())
    }
}

/// Standardized `n×d` input matrix: `(pixel/255 − mean_c) / std_c`.
pub fn normalize(ds: &Dataset, stats: &NormStats) -> Result<Tensor> {
    stats.validate()?;
    if stats.mean.len() != ds.channels {
        return Err(Error::Shape(format!(
            "statistics for {} channels applied to {} channels",
            stats.mean.len(),
            ds.channels
        )));
    }
    let plane = ds.height * ds.width;
    let d = ds.sample_dim();
    let mut out = Vec::with_capacity(ds.images.len());
    for img in ds.images.chunks(d) {
        for c in 0..ds.channels {
            let (m, s) = (stats.mean[c], stats.std[c]);
            out.extend(
                img[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&p| (f64::from(p) / 255.0 - m) / s),
            );
        }
    }
    Tensor::new(vec![ds.len(), d], out)
}

/// Gaussian images rounded into the `u8` range: `clamp(round(127.5 + 64·z))`.
/// Used as a stand-in out-of-distribution set.
pub fn gaussian_image_dataset(
    name: &str,
    n: usize,
    dims: (usize, usize, usize),
    num_classes: usize,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let d = dims.0 * dims.1 * dims.2;
    let images = (0..n * d)
        .map(|_| {
            (127.5 + 64.0 * rng.standard_normal())
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect();
    Dataset::new(name, images, vec![0; n], num_classes, dims)
}

/// Parameters of the noise pretraining stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
    pub num_classes: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
}

impl NoiseSpec {
    pub fn standard(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            mean: 0.0,
            std: 1.0,
            num_classes,
            batches_per_epoch: 100,
            batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid noise spec {self:?}"
            )));
        }
        if self.num_classes < 2 || !(self.std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid noise spec {self:?}"
            )));
        }
        Ok(())
    }
}

/// Endless stream of fresh Gaussian inputs with independent uniform labels.
pub struct NoiseStream {
    spec: NoiseSpec,
    rng: RngStream,
}

impl NoiseStream {
    /// Draws the next batch: inputs first, then labels, both from the stream.
    pub fn next_batch(&mut self) -> (Tensor, Vec<usize>) {
        let x = gaussian_tensor(
            &[self.spec.batch_size, self.spec.dim],
            self.spec.mean,
            self.spec.std,
            &mut self.rng,
        )
        .expect("validated noise spec");
        let y = uniform_labels(self.spec.batch_size, self.spec.num_classes, &mut self.rng)
            .expect("validated noise spec");
        (x, y)
    }

    /// Same as [`NoiseStream::next_batch`] with one-hot targets.
    pub fn next_one_hot(&mut self) -> (Tensor, Tensor) {
        let (x, y) = self.next_batch();
        let t = one_hot(&y, self.spec.num_classes).expect("labels in range");
        (x, t)
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }
}

impl Iterator for NoiseStream {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

pub fn noise_batches(spec: NoiseSpec, rng: RngStream) -> Result<NoiseStream> {
    spec.validate()?;
    Ok(NoiseStream { spec, rng })
}

/// Index batches covering `0..n` exactly once. A trailing batch of a single
/// sample is merged into the previous batch so that every batch can feed a
/// train-mode batchnorm.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngStream,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let order = if shuffle {
        rng.permutation(n)
    } else {
        (0..n).collect()
    };
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Minibatches of `(inputs, labels)` for one epoch.
pub fn data_batches<'a>(
    x: &'a Tensor,
    y: &'a [usize],
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngStream,
) -> impl Iterator<Item = (Tensor, Vec<usize>)> + 'a {
    batch_indices(y.len(), batch_size, shuffle, rng)
        .into_iter()
        .map(move |idx| (x.select_rows(&idx), idx.iter().map(|&i| y[i]).collect()))
}
