//! Datasets: synthetic condensed batches and the CIFAR-10 binary format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_DIMS: [usize; 3] = [3, 32, 32];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Images with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dimension(format!(
                "label {bad} with {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_dims(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.dims();
        [c, h, w]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }
}

/// Generator of two-class data whose samples share a common direction.
///
/// Sample `i` with label `y = i mod 2` and sign `s = 2y - 1` is
/// `offset_scale * d + noise_scale * (z + margin * s * u)`, with `d`, `u` and
/// `z` standard normal in `C*H*W` dimensions. `d` and `u` are fixed by
/// `direction_seed`; `z` is fresh per sample. Raising `offset_scale` relative
/// to `noise_scale` raises the pairwise cosine of the samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub dims: [usize; 3],
    pub offset_scale: f64,
    pub noise_scale: f64,
    pub margin: f64,
    pub direction_seed: u64,
}

impl SyntheticSpec {
    pub const CLASSES: usize = 2;
    pub const DEFAULT_MARGIN: f64 = 1.0;

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("dataset.offset_scale", self.offset_scale),
            ("dataset.noise_scale", self.noise_scale),
            ("dataset.margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be >= 0, got {v}")));
            }
        }
        if self.dims.contains(&0) {
            return Err(Error::config(
                "dataset.dims",
                format!("all dimensions must be >= 1, got {:?}", self.dims),
            ));
        }
        Ok(())
    }

    fn directions(&self) -> (Vec<f64>, Vec<f64>) {
        let d_len = self.dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.direction_seed);
        let d = (0..d_len).map(|_| rng.sample(StandardNormal)).collect();
        let u = (0..d_len).map(|_| rng.sample(StandardNormal)).collect();
        (d, u)
    }

    /// `n` samples with balanced alternating labels; noise drawn from `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let (d, u) = self.directions();
        let [c, h, w] = self.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * d.len());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % Self::CLASSES;
            let sign = if y == 1 { 1.0 } else { -1.0 };
            for (dk, uk) in d.iter().zip(&u) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(
                    self.offset_scale * dk + self.noise_scale * (z + self.margin * sign * uk),
                );
            }
            labels.push(y);
        }
        Dataset::new(Tensor4::new([n, c, h, w], data)?, labels, Self::CLASSES)
    }
}

/// A condensed batch whose directions and noise both come from `seed`.
pub fn gen_condensed_batch(
    n: usize,
    dims: [usize; 3],
    offset_scale: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<(Tensor4, Vec<usize>)> {
    let spec = SyntheticSpec {
        dims,
        offset_scale,
        noise_scale,
        margin: SyntheticSpec::DEFAULT_MARGIN,
        direction_seed: seed,
    };
    let ds = spec.generate(n, seed.wrapping_add(1))?;
    Ok((ds.images, ds.labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Parses CIFAR-10 records. `base_offset` is added to reported byte offsets.
/// Returns raw pixel bytes (CHW per record) and labels.
pub fn parse_cifar_records(bytes: &[u8], base_offset: u64) -> Result<(Vec<u8>, Vec<usize>)> {
    let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: base_offset + whole as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_LEN} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset: base_offset + (i * CIFAR_RECORD_LEN) as u64,
                message: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Reads a CIFAR-10 split from `dir`, scaling pixels to [0, 1].
///
/// With `subset_size`, that many records are drawn without replacement using
/// `seed`; the draw is deterministic.
pub fn load_cifar10(
    dir: &Path,
    split: Split,
    subset_size: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let files: &[&str] = match split {
        Split::Train => &CIFAR_TRAIN_FILES,
        Split::Test => &[CIFAR_TEST_FILE],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse_cifar_records(&bytes, 0).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let [c, h, w] = CIFAR_DIMS;
    let images = Tensor4::new(
        [n, c, h, w],
        pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let full = Dataset::new(images, labels, CIFAR_CLASSES)?;
    match subset_size {
        None => Ok(full),
        Some(k) if k > n => Err(Error::config(
            "dataset.subset",
            format!("asked for {k} samples, split has {n}"),
        )),
        Some(k) => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(k);
            full.select(&idx)
        }
    }
}

/// Per-channel standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Mean and (biased) standard deviation per channel over all of `x`.
    pub fn fit(x: &Tensor4) -> Result<Self> {
        let (mean, var) = crate::tensor::channel_moments(x)?;
        let std = var
            .iter()
            .map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self {
            mean: mean.into_inner(),
            std,
        })
    }

    pub fn apply(&self, x: &mut Tensor4) -> Result<()> {
        if x.channels() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardization for {} channels, tensor has {}",
                self.mean.len(),
                x.channels()
            )));
        }
        for b in 0..x.batch() {
            for c in 0..x.channels() {
                let (m, s) = (self.mean[c], self.std[c]);
                x.plane_mut(b, c).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        Ok(())
    }
}

pub const CROP_PAD: usize = 4;

/// Random crop from a zero-padded image, then a horizontal flip with
/// probability 1/2, independently per sample.
pub fn augment_batch(x: &Tensor4, pad: usize, rng: &mut impl Rng) -> Tensor4 {
    let [nb, nc, h, w] = x.dims();
    let mut out = Tensor4::zeros(x.dims());
    for b in 0..nb {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        for c in 0..nc {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for i in 0..h {
                let si = i as isize + dy;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let jj = if flip { w - 1 - j } else { j };
                    let sj = jj as isize + dx;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    dst[i * w + j] = src[si as usize * w + sj as usize];
                }
            }
        }
    }
    out
}
