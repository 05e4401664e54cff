//! Batch-independent baselines: instance, layer and group normalization.
//!
//! All three are group normalization with a different group count: instance
//! normalization uses one group per channel, layer normalization one group per
//! sample. None of them keeps running state.

use super::batch::{NormGrads, UbnParams};
use super::config::{NormConfig, NormKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct AltCache {
    input: Tensor4,
    groups: usize,
    normalized: Tensor4,
    /// `1 / sqrt(var + eps)` per `(b, group)`.
    inv_std: Vec<f64>,
}

impl AltCache {
    pub(crate) fn input(&self) -> &Tensor4 {
        &self.input
    }

    pub fn normalized(&self) -> &Tensor4 {
        &self.normalized
    }
}

#[derive(Debug, Clone)]
pub struct AltOutput {
    pub output: Tensor4,
    pub cache: AltCache,
}

/// Number of statistic groups per sample for `cfg.kind` over `channels`.
pub fn group_count(cfg: &NormConfig, channels: usize) -> Result<usize> {
    match cfg.kind {
        NormKind::In => Ok(channels),
        NormKind::Ln => Ok(1),
        NormKind::Gn { groups } => {
            if groups == 0 || !channels.is_multiple_of(groups) {
                Err(Error::config(
                    "norm.groups",
                    format!("{groups} groups do not divide {channels} channels"),
                ))
            } else {
                Ok(groups)
            }
        }
        other => Err(Error::config(
            "norm.kind",
            format!("alt_norm_forward needs in/ln/gn, got {}", other.name()),
        )),
    }
}

pub fn alt_norm_forward(x: &Tensor4, p: &UbnParams, cfg: &NormConfig) -> Result<AltOutput> {
    let groups = group_count(cfg, x.channels())?;
    if !x.is_finite() {
        return Err(Error::NonFinite("normalization input".into()));
    }
    p.validate(x.channels())?;
    if x.plane_len() == 0 {
        return Err(Error::Dimension(format!(
            "empty spatial extent in {:?}",
            x.dims()
        )));
    }
    let nb = x.batch();
    let group_len = x.sample_len() / groups;
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(nb * groups);
    for chunk in normalized.data_mut().chunks_exact_mut(group_len) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + cfg.eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    let mut output = normalized.clone();
    for b in 0..nb {
        for c in 0..x.channels() {
            let (g, be) = (p.gamma[c], p.beta[c]);
            output
                .plane_mut(b, c)
                .iter_mut()
                .for_each(|v| *v = g * *v + be);
        }
    }
    Ok(AltOutput {
        output,
        cache: AltCache {
            input: x.clone(),
            groups,
            normalized,
            inv_std,
        },
    })
}

/// Gradients for [`alt_norm_forward`]. Only `gamma` and `beta` are active.
pub fn alt_norm_backward(
    x: &Tensor4,
    upstream: &Tensor4,
    p: &UbnParams,
    cache: &AltCache,
) -> Result<NormGrads> {
    if cache.input != *x {
        return Err(Error::Contract(
            "stale forward cache: input differs from the cached forward input".into(),
        ));
    }
    if upstream.dims() != x.dims() {
        return Err(Error::Dimension(format!(
            "upstream dims {:?} differ from input dims {:?}",
            upstream.dims(),
            x.dims()
        )));
    }
    let (nb, nc) = (x.batch(), x.channels());
    let mut grads = UbnParams::zeros(nc);
    let mut d_norm = upstream.clone();
    for b in 0..nb {
        for c in 0..nc {
            let g = upstream.plane(b, c);
            let xn = cache.normalized.plane(b, c);
            grads.gamma[c] += g.iter().zip(xn).map(|(a, v)| a * v).sum::<f64>();
            grads.beta[c] += g.iter().sum::<f64>();
            let gamma = p.gamma[c];
            d_norm.plane_mut(b, c).iter_mut().for_each(|v| *v *= gamma);
        }
    }
    let group_len = x.sample_len() / cache.groups;
    let mut d_input = d_norm;
    for ((dg, xn), &inv) in d_input
        .data_mut()
        .chunks_exact_mut(group_len)
        .zip(cache.normalized.data().chunks_exact(group_len))
        .zip(&cache.inv_std)
    {
        let n = group_len as f64;
        let mean_g = dg.iter().sum::<f64>() / n;
        let mean_gx = dg.iter().zip(xn).map(|(g, v)| g * v).sum::<f64>() / n;
        dg.iter_mut()
            .zip(xn)
            .for_each(|(g, &v)| *g = inv * (*g - mean_g - v * mean_gx));
    }
    Ok(NormGrads {
        d_input,
        params: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn instance_norm_of_constant_planes_is_zero() {
        let x = Tensor4::from_fn([2, 3, 2, 2], |b, c, _, _| (b * 3 + c) as f64 * 1.7 - 2.0);
        let out = alt_norm_forward(&x, &UbnParams::new(3), &NormConfig::instance()).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_with_one_group_per_channel_is_instance_norm() {
        let x = random_tensor([3, 4, 3, 2], 1);
        let mut p = UbnParams::new(4);
        p.gamma = vec![0.5, 1.5, -1.0, 2.0].into();
        p.beta = vec![0.1, 0.2, 0.3, 0.4].into();
        let a = alt_norm_forward(&x, &p, &NormConfig::group(4)).unwrap();
        let b = alt_norm_forward(&x, &p, &NormConfig::instance()).unwrap();
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn layer_norm_matches_loop() {
        let x = random_tensor([2, 3, 2, 3], 2);
        let mut p = UbnParams::new(3);
        p.gamma = vec![1.2, 0.7, -0.3].into();
        p.beta = vec![0.0, 1.0, -1.0].into();
        let cfg = NormConfig::layer();
        let out = alt_norm_forward(&x, &p, &cfg).unwrap();
        for b in 0..2 {
            let s = x.sample(b);
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for c in 0..3 {
                for h in 0..2 {
                    for w in 0..3 {
                        let want = p.gamma[c] * (x.at(b, c, h, w) - mean) / (var + cfg.eps).sqrt()
                            + p.beta[c];
                        assert!((out.output.at(b, c, h, w) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bad_group_count_is_config_error() {
        let x = random_tensor([2, 3, 2, 2], 3);
        assert!(matches!(
            alt_norm_forward(&x, &UbnParams::new(3), &NormConfig::group(2)),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            alt_norm_forward(&x, &UbnParams::new(3), &NormConfig::bn()),
            Err(Error::Config { .. })
        ));
    }
}
