//! IDX loading, a seeded Gaussian-blob generator and pad/crop/flip augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel `(mean, std)` applied as `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Applies the normalization in place to a `[N, C, ...]` batch.
    pub fn apply(&self, batch: &mut Tensor) {
        let shape = batch.shape().to_vec();
        if shape.len() < 2 || shape[0] == 0 {
            return;
        }
        let c = shape[1];
        let plane: usize = shape[2..].iter().product();
        for (i, chunk) in batch.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Images `[N, C, H, W]` (or `[N, D]` for vector data) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, num_classes: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        let channels = images.shape().get(1).copied().unwrap_or(1);
        Ok(Dataset {
            images,
            labels,
            split,
            num_classes,
            normalization: Normalization::identity(channels),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one example.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn channels(&self) -> usize {
        self.images.shape().get(1).copied().unwrap_or(1)
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Copies the examples at `indices` into a new batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch"), labels)
    }

    /// Examples `[start, end)` as a new dataset sharing split and normalization.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset {
            images,
            labels,
            split: self.split,
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    /// Per-channel mean and (population) standard deviation of the raw images.
    pub fn compute_normalization(&self) -> Normalization {
        let c = self.channels();
        let plane: usize = self.images.shape().iter().skip(2).product();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = vec![0usize; c];
        for (i, chunk) in self.images.data().chunks(plane.max(1)).enumerate() {
            let ch = i % c;
            for &v in chunk {
                sum[ch] += v;
                sq[ch] += v * v;
            }
            count[ch] += chunk.len();
        }
        let mut mean = vec![0.0; c];
        let mut std = vec![1.0; c];
        for ch in 0..c {
            if count[ch] > 0 {
                let n = count[ch] as f64;
                mean[ch] = sum[ch] / n;
                let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
                if var > 0.0 {
                    std[ch] = var.sqrt();
                }
            }
        }
        Normalization { mean, std }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != expected_magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32_be(&bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("truncated payload: {} of {expected} bytes", payload.len()),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (header + expected) as u64,
            msg: format!("{} trailing bytes", payload.len() - expected),
        });
    }
    Ok((dims, payload.to_vec()))
}

/// Reads an IDX image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    if dims[0] != ldims[0] {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!("{} labels for {} images", ldims[0], dims[0]),
        });
    }
    let shape = vec![dims[0], 1, dims[1], dims[2]];
    let images = Tensor::new(shape, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(images, labels, split, classes)
}

/// Writes `[N, H, W]` u8 images in IDX format.
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes u8 labels in IDX format.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Gaussian clusters with unit variance around centers drawn uniformly from
/// `[-5, 5]^dim`. Examples are interleaved by class.
pub fn synth_blobs(num_classes: usize, n_per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("synth_blobs needs at least 2 classes".into()));
    }
    let mut rng = Rng::new(seed);
    let centers = blob_centers(num_classes, dim, &mut rng);
    synth_blobs_at(&centers, n_per_class, &mut rng)
}

/// Cluster centers drawn uniformly from `[-5, 5]^dim`.
pub fn blob_centers(num_classes: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.uniform(-5.0, 5.0)).collect())
        .collect()
}

/// Gaussian clusters with unit variance around the given centers.
pub fn synth_blobs_at(centers: &[Vec<f64>], n_per_class: usize, rng: &mut Rng) -> Result<Dataset> {
    let dim = centers.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(centers.len() * n_per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * n_per_class);
    for _ in 0..n_per_class {
        for (class, c) in centers.iter().enumerate() {
            data.extend(c.iter().map(|&m| m + rng.normal()));
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![labels.len(), dim], data)?;
    Dataset::new(images, labels, Split::Train, centers.len())
}

/// Pad/crop/flip settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub pad: usize,
    /// `(h, w)`; `None` keeps the input size.
    pub crop: Option<(usize, usize)>,
    pub flip_prob: f64,
}

impl Augment {
    pub const NONE: Augment = Augment {
        pad: 0,
        crop: None,
        flip_prob: 0.0,
    };
}

/// Zero-pads each image by `pad`, takes a uniformly random `crop` window and
/// flips it horizontally with probability `flip_prob`. Non-image batches
/// (fewer than 4 dimensions) pass through unchanged.
pub fn augment(batch: &Tensor, pad: usize, crop: (usize, usize), flip_prob: f64, rng: &mut Rng) -> Result<Tensor> {
    transform(batch, pad, crop, |rng_h, rng_w| (rng.below_usize(rng_h), rng.below_usize(rng_w), rng.bernoulli(flip_prob)))
}

/// Deterministic evaluation counterpart of [`augment`]: zero-pad, center crop, no flip.
pub fn center_crop(batch: &Tensor, pad: usize, crop: (usize, usize)) -> Result<Tensor> {
    transform(batch, pad, crop, |rh, rw| ((rh - 1) / 2, (rw - 1) / 2, false))
}

/// Applies pad + crop at offsets chosen per image by `choose(rows, cols)`,
/// which receives the number of admissible offsets along each axis.
fn transform(
    batch: &Tensor,
    pad: usize,
    (ch, cw): (usize, usize),
    mut choose: impl FnMut(usize, usize) -> (usize, usize, bool),
) -> Result<Tensor> {
    let &[n, c, h, w] = batch.shape() else {
        return Ok(batch.clone());
    };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if ch > ph || cw > pw || ch == 0 || cw == 0 {
        return Err(Error::Geometry(format!(
            "crop {ch}x{cw} does not fit padded {ph}x{pw} image"
        )));
    }
    let mut out = vec![0.0; n * c * ch * cw];
    let src = batch.data();
    for img in 0..n {
        let (oy, ox, flip) = choose(ph - ch + 1, pw - cw + 1);
        for chan in 0..c {
            let plane = (img * c + chan) * h * w;
            let dst = (img * c + chan) * ch * cw;
            for y in 0..ch {
                let sy = (oy + y) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..cw {
                    let sx = (ox + x) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let tx = if flip { cw - 1 - x } else { x };
                    out[dst + y * cw + tx] = src[plane + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(vec![n, c, ch, cw], out)
}
