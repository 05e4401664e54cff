//! Dense rank-4 tensors in NCHW order and the handful of kernels the
//! normalization layers are built from: per-channel moments, spatial average
//! pooling, 3x3 depthwise convolution and pairwise cosine similarity.
//!
//! Everything is `f64`. Element `(b, c, h, w)` lives at
//! `((b * C + c) * H + h) * W + w`.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Tensor dimensions `[batch, channels, height, width]`.
pub type Dims = [usize; 4];

/// A 3x3 kernel stored row-major; index 4 is the center tap.
pub type Kernel3 = [f64; 9];

/// The kernel that leaves its input unchanged.
pub const CENTER_DELTA: Kernel3 = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4 {
    /// Builds a tensor, checking that `data` has exactly `B*C*H*W` finite entries.
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                expected
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry {} is {} in tensor of dims {:?}",
                i, data[i], dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [nb, nc, nh, nw] = dims;
        let mut data = Vec::with_capacity(nb * nc * nh * nw);
        for b in 0..nb {
            for c in 0..nc {
                for h in 0..nh {
                    for w in 0..nw {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// `H * W`.
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// `C * H * W`, the length of one flattened sample.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    /// The contiguous `H*W` plane of sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let start = (b * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.plane_len();
        let start = (b * self.dims[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// Sample `b` flattened to `C*H*W` entries.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data, new dims. The element count must not change.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.dims, dims
            )));
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    /// Gathers the listed samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::Dimension(format!(
                    "sample index {} out of range for batch of {}",
                    i,
                    self.batch()
                )));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Self {
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        })
    }
}

/// One value per channel (mean, variance, gamma, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVec(Vec<f64>);

impl ChannelVec {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn filled(channels: usize, value: f64) -> Self {
        Self(vec![value; channels])
    }

    pub fn zeros(channels: usize) -> Self {
        Self::filled(channels, 0.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ChannelVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ChannelVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ChannelVec {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

fn require_reduction_extent(x: &Tensor4, what: &str) -> Result<()> {
    if x.batch() * x.plane_len() == 0 || x.channels() == 0 {
        return Err(Error::Dimension(format!(
            "{what} needs B*H*W >= 1 and C >= 1, got dims {:?}",
            x.dims()
        )));
    }
    Ok(())
}

/// Per-channel mean over `(b, h, w)`.
pub fn channel_mean(x: &Tensor4) -> Result<ChannelVec> {
    require_reduction_extent(x, "channel_mean")?;
    let count = (x.batch() * x.plane_len()) as f64;
    let mut out = vec![0.0; x.channels()];
    for b in 0..x.batch() {
        for (c, acc) in out.iter_mut().enumerate() {
            *acc += x.plane(b, c).iter().sum::<f64>();
        }
    }
    out.iter_mut().for_each(|v| *v /= count);
    Ok(ChannelVec(out))
}

/// Per-channel biased variance (divides by the element count).
pub fn channel_var(x: &Tensor4) -> Result<ChannelVec> {
    channel_moments(x).map(|(_, var)| var)
}

/// Mean and biased variance in one two-pass sweep.
pub fn channel_moments(x: &Tensor4) -> Result<(ChannelVec, ChannelVec)> {
    let mean = channel_mean(x)?;
    let count = (x.batch() * x.plane_len()) as f64;
    let mut var = vec![0.0; x.channels()];
    for b in 0..x.batch() {
        for (c, acc) in var.iter_mut().enumerate() {
            let mu = mean[c];
            *acc += x
                .plane(b, c)
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, ChannelVec(var)))
}

/// Spatial mean per `(b, c)`; output dims `(B, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor4) -> Result<Tensor4> {
    let p = x.plane_len();
    if p == 0 {
        return Err(Error::Dimension(format!(
            "global_avg_pool needs H*W >= 1, got dims {:?}",
            x.dims()
        )));
    }
    let data = x
        .data()
        .chunks_exact(p)
        .map(|plane| plane.iter().sum::<f64>() / p as f64)
        .collect();
    Ok(Tensor4 {
        dims: [x.batch(), x.channels(), 1, 1],
        data,
    })
}

/// Per-channel 3x3 convolution (cross-correlation) with zero padding 1, so the
/// output has the input's dims. Channel `c` uses `kernels[c]` and `bias[c]`.
pub fn depthwise_conv3(x: &Tensor4, kernels: &[Kernel3], bias: &[f64]) -> Result<Tensor4> {
    check_depthwise_shapes(x, kernels.len(), bias.len())?;
    let (nh, nw) = (x.height(), x.width());
    let mut out = Tensor4::zeros(x.dims());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let k = &kernels[c];
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for h in 0..nh {
                for w in 0..nw {
                    let mut acc = bias[c];
                    for dy in 0..3 {
                        let Some(sh) = (h + dy).checked_sub(1).filter(|&v| v < nh) else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(sw) = (w + dx).checked_sub(1).filter(|&v| v < nw) else {
                                continue;
                            };
                            acc += k[dy * 3 + dx] * src[sh * nw + sw];
                        }
                    }
                    dst[h * nw + w] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv3`] given the upstream gradient of its output:
/// `(d_input, d_kernels, d_bias)`.
pub fn depthwise_conv3_backward(
    x: &Tensor4,
    kernels: &[Kernel3],
    upstream: &Tensor4,
) -> Result<(Tensor4, Vec<Kernel3>, ChannelVec)> {
    check_depthwise_shapes(x, kernels.len(), x.channels())?;
    if upstream.dims() != x.dims() {
        return Err(Error::Dimension(format!(
            "upstream dims {:?} differ from input dims {:?}",
            upstream.dims(),
            x.dims()
        )));
    }
    let (nh, nw) = (x.height(), x.width());
    let mut d_input = Tensor4::zeros(x.dims());
    let mut d_kernels = vec![[0.0; 9]; x.channels()];
    let mut d_bias = ChannelVec::zeros(x.channels());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let k = &kernels[c];
            let src = x.plane(b, c);
            let g = upstream.plane(b, c);
            d_bias[c] += g.iter().sum::<f64>();
            let dk = &mut d_kernels[c];
            let dx_plane = d_input.plane_mut(b, c);
            for h in 0..nh {
                for w in 0..nw {
                    let gv = g[h * nw + w];
                    for dy in 0..3 {
                        let Some(sh) = (h + dy).checked_sub(1).filter(|&v| v < nh) else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(sw) = (w + dx).checked_sub(1).filter(|&v| v < nw) else {
                                continue;
                            };
                            dk[dy * 3 + dx] += gv * src[sh * nw + sw];
                            dx_plane[sh * nw + sw] += gv * k[dy * 3 + dx];
                        }
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernels, d_bias))
}

fn check_depthwise_shapes(x: &Tensor4, kernel_count: usize, bias_len: usize) -> Result<()> {
    if kernel_count != x.channels() || bias_len != x.channels() {
        return Err(Error::Dimension(format!(
            "depthwise conv over {} channels got {} kernels and {} biases",
            x.channels(),
            kernel_count,
            bias_len
        )));
    }
    Ok(())
}

/// `B x B` cosine similarities between flattened samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix {
    size: usize,
    values: Vec<f64>,
    /// Samples whose flattened norm is zero. Their similarity to every other
    /// sample is defined as 0.
    pub zero_norm_samples: Vec<usize>,
}

impl CosineMatrix {
    /// Rebuilds a matrix from row-major values, e.g. read back from disk.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Dimension(format!(
                "{} values for a {size}x{size} matrix",
                values.len()
            )));
        }
        Ok(Self {
            size,
            values,
            zero_norm_samples: Vec::new(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum over all ordered pairs `i != j`.
    pub fn off_diagonal_sum(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.size {
            for j in 0..self.size {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum
    }

    /// Mean over ordered pairs `i != j`; `None` when there are fewer than two samples.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        (self.size >= 2).then(|| self.off_diagonal_sum() / (self.size * (self.size - 1)) as f64)
    }
}

/// Cosine similarity between every pair of samples, each flattened to `C*H*W`.
/// The diagonal is exactly 1 for nonzero samples.
pub fn pairwise_cosine_matrix(x: &Tensor4) -> CosineMatrix {
    let nb = x.batch();
    let norms: Vec<f64> = (0..nb)
        .map(|b| x.sample(b).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_norm_samples: Vec<usize> = (0..nb).filter(|&b| norms[b] == 0.0).collect();
    if !zero_norm_samples.is_empty() {
        log::warn!(
            "cosine similarity: {} zero-norm sample(s) {:?} get similarity 0",
            zero_norm_samples.len(),
            zero_norm_samples
        );
    }
    let mut values = vec![0.0; nb * nb];
    for i in 0..nb {
        if norms[i] == 0.0 {
            continue;
        }
        values[i * nb + i] = 1.0;
        for j in (i + 1)..nb {
            if norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = x
                .sample(i)
                .iter()
                .zip(x.sample(j))
                .map(|(a, b)| a * b)
                .sum();
            let cos = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * nb + j] = cos;
            values[j * nb + i] = cos;
        }
    }
    CosineMatrix {
        size: nb,
        values,
        zero_norm_samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: Dims, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-10.0..10.0))
    }

    // Reference loops written straight from the definitions.
    fn loop_mean(x: &Tensor4, c: usize) -> f64 {
        let [nb, _, nh, nw] = x.dims();
        let mut s = 0.0;
        for b in 0..nb {
            for h in 0..nh {
                for w in 0..nw {
                    s += x.at(b, c, h, w);
                }
            }
        }
        s / (nb * nh * nw) as f64
    }

    fn loop_var(x: &Tensor4, c: usize) -> f64 {
        let [nb, _, nh, nw] = x.dims();
        let m = loop_mean(x, c);
        let mut s = 0.0;
        for b in 0..nb {
            for h in 0..nh {
                for w in 0..nw {
                    s += (x.at(b, c, h, w) - m).powi(2);
                }
            }
        }
        s / (nb * nh * nw) as f64
    }

    fn loop_conv(x: &Tensor4, k: &[Kernel3], bias: &[f64]) -> Tensor4 {
        let [_, _, nh, nw] = x.dims();
        Tensor4::from_fn(x.dims(), |b, c, h, w| {
            let mut acc = bias[c];
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let sh = h as i64 + ky - 1;
                    let sw = w as i64 + kx - 1;
                    if sh >= 0 && sw >= 0 && (sh as usize) < nh && (sw as usize) < nw {
                        acc += k[c][(ky * 3 + kx) as usize] * x.at(b, c, sh as usize, sw as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn construction_validates_length_and_finiteness() {
        assert!(matches!(
            Tensor4::new([1, 1, 2, 2], vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor4::new([1, 1, 1, 2], vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor4::new([1, 1, 1, 2], vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn channel_mean_examples() {
        let ones = Tensor4::full([2, 3, 2, 2], 1.0);
        assert_eq!(channel_mean(&ones).unwrap().to_vec(), vec![1.0, 1.0, 1.0]);

        let by_channel = Tensor4::from_fn([3, 3, 2, 5], |_, c, _, _| c as f64);
        assert_eq!(
            channel_mean(&by_channel).unwrap().to_vec(),
            vec![0.0, 1.0, 2.0]
        );

        let x = random_tensor([4, 2, 3, 3], 7);
        let mean = channel_mean(&x).unwrap();
        for c in 0..2 {
            assert!((mean[c] - loop_mean(&x, c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn channel_var_examples() {
        let constant = Tensor4::full([2, 2, 3, 3], 4.25);
        assert_eq!(channel_var(&constant).unwrap().to_vec(), vec![0.0, 0.0]);

        let two_point = Tensor4::from_fn(
            [2, 1, 1, 2],
            |b, _, _, w| {
                if (b + w) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            },
        );
        assert_eq!(channel_var(&two_point).unwrap()[0], 1.0);

        let x = random_tensor([4, 2, 3, 3], 11);
        let var = channel_var(&x).unwrap();
        for c in 0..2 {
            assert!((var[c] - loop_var(&x, c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_reductions_are_dimension_errors() {
        let empty = Tensor4::zeros([0, 2, 3, 3]);
        assert!(matches!(channel_mean(&empty), Err(Error::Dimension(_))));
        assert!(matches!(channel_var(&empty), Err(Error::Dimension(_))));
        assert!(matches!(
            global_avg_pool(&Tensor4::zeros([2, 2, 0, 3])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn global_avg_pool_examples() {
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = global_avg_pool(&x).unwrap();
        assert_eq!(pooled.dims(), [1, 1, 1, 1]);
        assert_eq!(pooled.data(), &[2.5]);

        let c = global_avg_pool(&Tensor4::full([3, 2, 4, 4], -1.5)).unwrap();
        assert_eq!(c.dims(), [3, 2, 1, 1]);
        assert!(c.data().iter().all(|&v| v == -1.5));

        let x = random_tensor([2, 3, 4, 5], 3);
        let pooled = global_avg_pool(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for h in 0..4 {
                    for w in 0..5 {
                        s += x.at(b, c, h, w);
                    }
                }
                assert!((pooled.at(b, c, 0, 0) - s / 20.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_conv3_examples() {
        let x = random_tensor([2, 3, 4, 5], 5);
        let id = depthwise_conv3(&x, &[CENTER_DELTA; 3], &[0.0; 3]).unwrap();
        assert_eq!(id, x);

        let ones = Tensor4::full([1, 1, 3, 3], 1.0);
        let out = depthwise_conv3(&ones, &[[1.0; 9]], &[0.0]).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kernels: Vec<Kernel3> = (0..3)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let bias = [0.5, -0.25, 1.0];
        let got = depthwise_conv3(&x, &kernels, &bias).unwrap();
        let want = loop_conv(&x, &kernels, &bias);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12);
        }

        assert!(matches!(
            depthwise_conv3(&x, &kernels[..2], &bias[..2]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn depthwise_backward_matches_finite_differences() {
        let x = random_tensor([2, 2, 3, 4], 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let kernels: Vec<Kernel3> = (0..2)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let up = random_tensor([2, 2, 3, 4], 23);
        let loss = |x: &Tensor4, k: &[Kernel3]| -> f64 {
            let y = depthwise_conv3(x, k, &[0.1, 0.2]).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (dx, dk, db) = depthwise_conv3_backward(&x, &kernels, &up).unwrap();
        // The loss is linear in x and k, so central differences are exact up to rounding.
        let h = 1e-3;
        for i in [0, 5, 13, 23] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &kernels) - loss(&xm, &kernels)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-8);
        }
        for t in 0..9 {
            let mut kp = kernels.clone();
            kp[1][t] += h;
            let mut km = kernels.clone();
            km[1][t] -= h;
            let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
            assert!((fd - dk[1][t]).abs() < 1e-8);
        }
        let bias_grad: f64 = up.plane(0, 0).iter().chain(up.plane(1, 0)).sum();
        assert!((db[0] - bias_grad).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let same = Tensor4::from_fn([4, 2, 2, 2], |_, c, h, w| (c + h + w) as f64 + 0.5);
        let m = pairwise_cosine_matrix(&same);
        assert!(m.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let ortho = Tensor4::new([2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = pairwise_cosine_matrix(&ortho);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.get(0, 0), 1.0);

        let x = random_tensor([3, 2, 2, 3], 4);
        let m = pairwise_cosine_matrix(&x);
        for i in 0..3 {
            for j in 0..3 {
                let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
                for k in 0..x.sample_len() {
                    dot += x.sample(i)[k] * x.sample(j)[k];
                    ni += x.sample(i)[k].powi(2);
                    nj += x.sample(j)[k].powi(2);
                }
                assert!((m.get(i, j) - dot / (ni.sqrt() * nj.sqrt())).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_sample_gets_zero_similarity() {
        let x = Tensor4::new([3, 1, 1, 2], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let m = pairwise_cosine_matrix(&x);
        assert_eq!(m.zero_norm_samples, vec![1]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0]);
        assert!((m.get(0, 2) - 1.0).abs() < 1e-15);
    }

    fn small_tensor() -> impl Strategy<Value = Tensor4> {
        (1usize..4, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(b, c, h, w)| {
            proptest::collection::vec(-10.0f64..10.0, b * c * h * w)
                .prop_map(move |data| Tensor4::new([b, c, h, w], data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn moments_agree_with_loops(x in small_tensor()) {
            let (mean, var) = channel_moments(&x).unwrap();
            for c in 0..x.channels() {
                prop_assert!((mean[c] - loop_mean(&x, c)).abs() <= 1e-12);
                prop_assert!((var[c] - loop_var(&x, c)).abs() <= 1e-12);
            }
        }

        #[test]
        fn depthwise_conv_is_bilinear(
            x in small_tensor(),
            a in -3.0f64..3.0,
            s in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nc = x.channels();
            let y = Tensor4::from_fn(x.dims(), |_, _, _, _| rng.random_range(-10.0..10.0));
            let k1: Vec<Kernel3> = (0..nc).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            let k2: Vec<Kernel3> = (0..nc).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            let zero = vec![0.0; nc];

            // Linear in the input.
            let mix = Tensor4::from_fn(x.dims(), |b, c, h, w| a * x.at(b, c, h, w) + s * y.at(b, c, h, w));
            let lhs = depthwise_conv3(&mix, &k1, &zero).unwrap();
            let cx = depthwise_conv3(&x, &k1, &zero).unwrap();
            let cy = depthwise_conv3(&y, &k1, &zero).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (a * cx.data()[i] + s * cy.data()[i])).abs() <= 1e-12 * (1.0 + lhs.data()[i].abs()) * 10.0);
            }

            // Linear in the kernels.
            let kmix: Vec<Kernel3> = k1.iter().zip(&k2).map(|(p, q)| std::array::from_fn(|t| a * p[t] + s * q[t])).collect();
            let lhs = depthwise_conv3(&x, &kmix, &zero).unwrap();
            let c2 = depthwise_conv3(&x, &k2, &zero).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (a * cx.data()[i] + s * c2.data()[i])).abs() <= 1e-12 * (1.0 + lhs.data()[i].abs()) * 10.0);
            }
        }

        #[test]
        fn cosine_matrix_is_symmetric_and_bounded(x in small_tensor()) {
            let m = pairwise_cosine_matrix(&x);
            for i in 0..m.size() {
                if !m.zero_norm_samples.contains(&i) {
                    prop_assert_eq!(m.get(i, i), 1.0);
                }
                for j in 0..m.size() {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    prop_assert!((-1.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }

        #[test]
        fn pooled_mean_subtraction_zeroes_spatial_mean(x in small_tensor()) {
            let pooled = global_avg_pool(&x).unwrap();
            for b in 0..x.batch() {
                for c in 0..x.channels() {
                    let k = pooled.at(b, c, 0, 0);
                    let resid: f64 = x.plane(b, c).iter().map(|v| v - k).sum::<f64>() / x.plane_len() as f64;
                    prop_assert!(resid.abs() <= 1e-12);
                }
            }
        }
    }
}
