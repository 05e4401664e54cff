//! Batch normalization and its condensation-gated, rectified variant.
//!
//! Both share one normalization path. Given per-channel statistics `(mu, var)`:
//!
//! ```text
//! X'  = X + w_c * K(X)                       (centering rectification, optional)
//! Xc  = X' - mu
//! Xh  = Xc / sqrt(var + eps)
//! Xh2 = Xh * sigmoid(w_s * K(Xh) + b_s)      (scaling rectification, optional)
//! Y   = dwconv3(Xh2)   or   gamma * Xh2 + beta
//! ```
//!
//! where `K` is spatial average pooling broadcast back per `(b, c)`.

use super::config::{NormConfig, NormKind, TrainStats};
use super::stats::{ubn_update_stats, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::{
    channel_moments, depthwise_conv3, depthwise_conv3_backward, global_avg_pool, ChannelVec,
    Kernel3, Tensor4, CENTER_DELTA,
};

/// Learnable parameters of a normalization layer. The same struct carries
/// their gradients in [`NormGrads`].
#[derive(Debug, Clone, PartialEq)]
pub struct UbnParams {
    pub gamma: ChannelVec,
    pub beta: ChannelVec,
    pub w_c: ChannelVec,
    pub w_s: ChannelVec,
    pub b_s: ChannelVec,
    pub affine_kernels: Vec<Kernel3>,
    pub affine_bias: ChannelVec,
}

impl UbnParams {
    /// Identity-at-init: `gamma = 1`, center-delta kernels, everything else 0.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: ChannelVec::filled(channels, 1.0),
            beta: ChannelVec::zeros(channels),
            w_c: ChannelVec::zeros(channels),
            w_s: ChannelVec::zeros(channels),
            b_s: ChannelVec::zeros(channels),
            affine_kernels: vec![CENTER_DELTA; channels],
            affine_bias: ChannelVec::zeros(channels),
        }
    }

    /// All zeros; the shape of a gradient.
    pub fn zeros(channels: usize) -> Self {
        Self {
            gamma: ChannelVec::zeros(channels),
            beta: ChannelVec::zeros(channels),
            w_c: ChannelVec::zeros(channels),
            w_s: ChannelVec::zeros(channels),
            b_s: ChannelVec::zeros(channels),
            affine_kernels: vec![[0.0; 9]; channels],
            affine_bias: ChannelVec::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Names of the parameter groups, in the order used by [`Self::group`].
    pub const GROUPS: [&'static str; 7] = [
        "gamma",
        "beta",
        "w_c",
        "w_s",
        "b_s",
        "affine_kernels",
        "affine_bias",
    ];

    /// Flat view of one parameter group by index into [`Self::GROUPS`].
    pub fn group(&self, index: usize) -> &[f64] {
        match index {
            0 => &self.gamma,
            1 => &self.beta,
            2 => &self.w_c,
            3 => &self.w_s,
            4 => &self.b_s,
            5 => self.affine_kernels.as_flattened(),
            6 => &self.affine_bias,
            _ => panic!("parameter group {index} out of range"),
        }
    }

    pub fn group_mut(&mut self, index: usize) -> &mut [f64] {
        match index {
            0 => &mut self.gamma,
            1 => &mut self.beta,
            2 => &mut self.w_c,
            3 => &mut self.w_s,
            4 => &mut self.b_s,
            5 => self.affine_kernels.as_flattened_mut(),
            6 => &mut self.affine_bias,
            _ => panic!("parameter group {index} out of range"),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (i, name) in Self::GROUPS.iter().enumerate() {
            let expected = if i == 5 { channels * 9 } else { channels };
            let group = self.group(i);
            if group.len() != expected {
                return Err(Error::Dimension(format!(
                    "parameter `{name}` has {} entries, expected {expected}",
                    group.len()
                )));
            }
            if group.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }
}

/// Gradients of a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub d_input: Tensor4,
    /// Gradient per parameter; entries for inactive parameters are exactly 0.
    pub params: UbnParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Normalize with stored statistics. Without `allow_cold_start`, a layer
    /// that has never trained refuses to run.
    Eval {
        allow_cold_start: bool,
    },
}

impl Mode {
    pub const EVAL: Mode = Mode::Eval {
        allow_cold_start: false,
    };
}

/// How the normalization statistics depend on the layer input.
#[derive(Debug, Clone, PartialEq)]
enum StatLink {
    /// Constants with respect to the input.
    Detached,
    /// `mu = weight * E[X] + const`, `var = weight * Var[X] + const`.
    Linked { weight: f64, batch_mean: ChannelVec },
}

/// Intermediates saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    kind: NormKind,
    input: Tensor4,
    step_count: u64,
    mu: ChannelVec,
    var: ChannelVec,
    link: StatLink,
    affine: bool,
    pooled_input: Option<Tensor4>,
    centered: Tensor4,
    scaled: Tensor4,
    pooled_scaled: Option<Tensor4>,
    gate: Option<Tensor4>,
    rectified: Tensor4,
    gate_open: Option<bool>,
}

impl ForwardCache {
    /// Statistics the forward pass normalized with.
    pub fn stats(&self) -> (&ChannelVec, &ChannelVec) {
        (&self.mu, &self.var)
    }

    /// `(X' - mu) / sqrt(var + eps)`, before scaling rectification.
    pub fn scaled(&self) -> &Tensor4 {
        &self.scaled
    }

    /// Input to the affine stage.
    pub fn rectified(&self) -> &Tensor4 {
        &self.rectified
    }

    /// Whether the condensation gate opened; `None` outside gated training.
    pub fn gate_open(&self) -> Option<bool> {
        self.gate_open
    }
}

#[derive(Debug, Clone)]
pub struct NormOutput {
    pub output: Tensor4,
    pub cache: ForwardCache,
}

/// Elementwise logistic function.
pub fn sigmoid_map(x: &Tensor4) -> Tensor4 {
    x.map(sigmoid)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn check_input(x: &Tensor4, p: &UbnParams) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite("normalization input".into()));
    }
    p.validate(x.channels())
}

/// The normalization path with fixed statistics `(mu, var)`. Pure; the
/// statistics are treated as constants by the matching backward.
pub fn normalize_with_stats(
    x: &Tensor4,
    mu: &[f64],
    var: &[f64],
    p: &UbnParams,
    cfg: &NormConfig,
) -> Result<NormOutput> {
    check_input(x, p)?;
    if mu.len() != x.channels() || var.len() != x.channels() {
        return Err(Error::Dimension(format!(
            "statistics of length {}/{} for {} channels",
            mu.len(),
            var.len(),
            x.channels()
        )));
    }
    let rect = cfg.kind == NormKind::Ubn;
    Ok(stage_two(
        x,
        ChannelVec::new(mu.to_vec()),
        ChannelVec::new(var.to_vec()),
        StatLink::Detached,
        p,
        cfg,
        Rects {
            centering: rect && cfg.centering_rect,
            scaling: rect && cfg.scaling_rect,
            affine: rect && cfg.affine_rect,
        },
        0,
    ))
}

#[derive(Clone, Copy)]
struct Rects {
    centering: bool,
    scaling: bool,
    affine: bool,
}

#[allow(clippy::too_many_arguments)]
fn stage_two(
    x: &Tensor4,
    mu: ChannelVec,
    var: ChannelVec,
    link: StatLink,
    p: &UbnParams,
    cfg: &NormConfig,
    rects: Rects,
    step_count: u64,
) -> NormOutput {
    let nc = x.channels();
    let nb = x.batch();

    let pooled_input = rects
        .centering
        .then(|| global_avg_pool(x).expect("nonempty planes"));
    let mut centered = x.clone();
    for b in 0..nb {
        for c in 0..nc {
            let shift = match &pooled_input {
                Some(k) => p.w_c[c] * k.at(b, c, 0, 0),
                None => 0.0,
            };
            let mu_c = mu[c];
            for v in centered.plane_mut(b, c) {
                if rects.centering {
                    *v += shift;
                }
                *v -= mu_c;
            }
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
    let mut scaled = centered.clone();
    for b in 0..nb {
        for (c, &inv) in inv_std.iter().enumerate() {
            scaled.plane_mut(b, c).iter_mut().for_each(|v| *v *= inv);
        }
    }

    let (pooled_scaled, gate, rectified) = if rects.scaling {
        let pooled = global_avg_pool(&scaled).expect("nonempty planes");
        let gate = Tensor4::from_fn(pooled.dims(), |b, c, _, _| {
            sigmoid(p.w_s[c] * pooled.at(b, c, 0, 0) + p.b_s[c])
        });
        let mut out = scaled.clone();
        for b in 0..nb {
            for c in 0..nc {
                let g = gate.at(b, c, 0, 0);
                out.plane_mut(b, c).iter_mut().for_each(|v| *v *= g);
            }
        }
        (Some(pooled), Some(gate), out)
    } else {
        (None, None, scaled.clone())
    };

    let output = if rects.affine {
        depthwise_conv3(&rectified, &p.affine_kernels, &p.affine_bias).expect("validated shapes")
    } else {
        let mut out = rectified.clone();
        for b in 0..nb {
            for c in 0..nc {
                let (g, be) = (p.gamma[c], p.beta[c]);
                out.plane_mut(b, c)
                    .iter_mut()
                    .for_each(|v| *v = g * *v + be);
            }
        }
        out
    };

    NormOutput {
        output,
        cache: ForwardCache {
            kind: cfg.kind,
            input: x.clone(),
            step_count,
            mu,
            var,
            link,
            affine: rects.affine,
            pooled_input,
            centered,
            scaled,
            pooled_scaled,
            gate,
            rectified,
            gate_open: None,
        },
    }
}

/// Training-mode batch normalization: normalizes with the batch moments and
/// folds them into the running statistics with momentum `cfg.momentum`.
pub fn bn_train_forward(
    x: &Tensor4,
    state: &mut RunningStats,
    p: &UbnParams,
    cfg: &NormConfig,
) -> Result<NormOutput> {
    if cfg.kind != NormKind::Bn {
        return Err(Error::config(
            "norm.kind",
            "bn_train_forward needs kind = bn",
        ));
    }
    check_input(x, p)?;
    check_state(x, state)?;
    if x.batch() * x.plane_len() < 2 {
        return Err(Error::Dimension(format!(
            "batch normalization needs B*H*W >= 2, got dims {:?}",
            x.dims()
        )));
    }
    let (mean, var) = channel_moments(x)?;
    let m = cfg.momentum;
    for c in 0..x.channels() {
        state.mu[c] = m * mean[c] + (1.0 - m) * state.mu[c];
        state.var[c] = m * var[c] + (1.0 - m) * state.var[c];
    }
    state.step_count += 1;
    state.gate_open_steps += 1;
    let link = if cfg.grad_through_batch_stats {
        StatLink::Linked {
            weight: 1.0,
            batch_mean: mean.clone(),
        }
    } else {
        StatLink::Detached
    };
    let no_rects = Rects {
        centering: false,
        scaling: false,
        affine: false,
    };
    Ok(stage_two(
        x,
        mean,
        var,
        link,
        p,
        cfg,
        no_rects,
        state.step_count,
    ))
}

/// Inference-mode batch normalization with the stored statistics. Never
/// mutates `state`.
pub fn bn_eval_forward(
    x: &Tensor4,
    state: &RunningStats,
    p: &UbnParams,
    cfg: &NormConfig,
    allow_cold_start: bool,
) -> Result<Tensor4> {
    if cfg.kind != NormKind::Bn {
        return Err(Error::config(
            "norm.kind",
            "bn_eval_forward needs kind = bn",
        ));
    }
    eval_forward(x, state, p, cfg, allow_cold_start).map(|o| o.output)
}

pub(crate) fn eval_forward(
    x: &Tensor4,
    state: &RunningStats,
    p: &UbnParams,
    cfg: &NormConfig,
    allow_cold_start: bool,
) -> Result<NormOutput> {
    check_input(x, p)?;
    check_state(x, state)?;
    if state.step_count == 0 && !allow_cold_start {
        return Err(Error::State(
            "evaluation before any training step; running statistics are uninitialized".into(),
        ));
    }
    let rect = cfg.kind == NormKind::Ubn;
    let rects = Rects {
        centering: rect && cfg.centering_rect,
        scaling: rect && cfg.scaling_rect,
        affine: rect && cfg.affine_rect,
    };
    Ok(stage_two(
        x,
        state.mu.clone(),
        state.var.clone(),
        StatLink::Detached,
        p,
        cfg,
        rects,
        state.step_count,
    ))
}

fn check_state(x: &Tensor4, state: &RunningStats) -> Result<()> {
    if state.channels() != x.channels() || state.var.len() != x.channels() {
        return Err(Error::Dimension(format!(
            "running statistics for {} channels, input has {}",
            state.channels(),
            x.channels()
        )));
    }
    Ok(())
}

/// The gated, rectified layer.
///
/// Training mode first runs [`ubn_update_stats`] and then normalizes with the
/// statistics it selects (the updated running values, or raw batch moments
/// when `cfg.train_stats` is [`TrainStats::Batch`] and the gate is open).
/// Evaluation mode uses the stored statistics and leaves `state` untouched.
pub fn ubn_forward(
    x: &Tensor4,
    state: &mut RunningStats,
    p: &UbnParams,
    cfg: &NormConfig,
    mode: Mode,
) -> Result<NormOutput> {
    if cfg.kind != NormKind::Ubn {
        return Err(Error::config("norm.kind", "ubn_forward needs kind = ubn"));
    }
    match mode {
        Mode::Eval { allow_cold_start } => eval_forward(x, state, p, cfg, allow_cold_start),
        Mode::Train => {
            check_input(x, p)?;
            check_state(x, state)?;
            let sel = ubn_update_stats(x, state, cfg)?;
            let (mu, var, link) = match (sel.gate_open, cfg.train_stats) {
                (false, _) => (sel.mu, sel.var, StatLink::Detached),
                (true, TrainStats::Updated) => {
                    (sel.mu, sel.var, link_for(cfg, cfg.momentum, sel.batch_mean))
                }
                (true, TrainStats::Batch) => {
                    let link = link_for(cfg, 1.0, sel.batch_mean.clone());
                    (sel.batch_mean, sel.batch_var, link)
                }
            };
            let rects = Rects {
                centering: cfg.centering_rect,
                scaling: cfg.scaling_rect,
                affine: cfg.affine_rect,
            };
            let mut out = stage_two(x, mu, var, link, p, cfg, rects, state.step_count);
            out.cache.gate_open = Some(sel.gate_open);
            Ok(out)
        }
    }
}

fn link_for(cfg: &NormConfig, weight: f64, batch_mean: ChannelVec) -> StatLink {
    if cfg.grad_through_batch_stats {
        StatLink::Linked { weight, batch_mean }
    } else {
        StatLink::Detached
    }
}

/// Backward pass for [`ubn_forward`] or [`bn_train_forward`].
///
/// `cache` must come from the forward pass on exactly `x` with the current
/// `state`; anything else is a contract error.
pub fn ubn_backward(
    x: &Tensor4,
    upstream: &Tensor4,
    state: &RunningStats,
    p: &UbnParams,
    cfg: &NormConfig,
    cache: &ForwardCache,
) -> Result<NormGrads> {
    if cache.kind != cfg.kind {
        return Err(Error::Contract(format!(
            "cache from a {} layer used for a {} layer",
            cache.kind.name(),
            cfg.kind.name()
        )));
    }
    if cache.input != *x {
        return Err(Error::Contract(
            "stale forward cache: input differs from the cached forward input".into(),
        ));
    }
    if cache.step_count != state.step_count {
        return Err(Error::Contract(format!(
            "stale forward cache: recorded at step {}, state is at step {}",
            cache.step_count, state.step_count
        )));
    }
    backward_from_cache(cache, upstream, p, cfg.eps)
}

/// Backward using only the cache, without the staleness checks against live
/// state. Used where the caller already owns the cache/state pairing.
pub(crate) fn backward_from_cache(
    cache: &ForwardCache,
    upstream: &Tensor4,
    p: &UbnParams,
    eps: f64,
) -> Result<NormGrads> {
    let x = &cache.input;
    if upstream.dims() != x.dims() {
        return Err(Error::Dimension(format!(
            "upstream dims {:?} differ from input dims {:?}",
            upstream.dims(),
            x.dims()
        )));
    }
    p.validate(x.channels())?;
    let (nb, nc) = (x.batch(), x.channels());
    let plane = x.plane_len() as f64;
    let count = (nb * x.plane_len()) as f64;
    let mut grads = UbnParams::zeros(nc);

    // Affine stage.
    let d_rectified = if cache.affine {
        let (d_in, d_k, d_b) =
            depthwise_conv3_backward(&cache.rectified, &p.affine_kernels, upstream)?;
        grads.affine_kernels = d_k;
        grads.affine_bias = d_b;
        d_in
    } else {
        let mut d_in = upstream.clone();
        for b in 0..nb {
            for c in 0..nc {
                let g = upstream.plane(b, c);
                let r = cache.rectified.plane(b, c);
                grads.gamma[c] += g.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
                grads.beta[c] += g.iter().sum::<f64>();
                let gamma = p.gamma[c];
                d_in.plane_mut(b, c).iter_mut().for_each(|v| *v *= gamma);
            }
        }
        d_in
    };

    // Scaling rectification.
    let d_scaled = match (&cache.gate, &cache.pooled_scaled) {
        (Some(gate), Some(pooled)) => {
            let mut d = d_rectified.clone();
            for b in 0..nb {
                for c in 0..nc {
                    let g = gate.at(b, c, 0, 0);
                    let r: f64 = d_rectified
                        .plane(b, c)
                        .iter()
                        .zip(cache.scaled.plane(b, c))
                        .map(|(a, s)| a * s)
                        .sum();
                    let dz = r * g * (1.0 - g);
                    grads.w_s[c] += dz * pooled.at(b, c, 0, 0);
                    grads.b_s[c] += dz;
                    let spread = dz * p.w_s[c] / plane;
                    d.plane_mut(b, c)
                        .iter_mut()
                        .for_each(|v| *v = *v * g + spread);
                }
            }
            d
        }
        _ => d_rectified,
    };

    // Scaling and centering.
    let inv_std: Vec<f64> = cache.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut d_var = vec![0.0; nc];
    let mut d_mu = vec![0.0; nc];
    let mut d_input = d_scaled;
    for b in 0..nb {
        for c in 0..nc {
            let inv = inv_std[c];
            let centered = cache.centered.plane(b, c);
            let plane_grad = d_input.plane_mut(b, c);
            d_var[c] += plane_grad
                .iter()
                .zip(centered)
                .map(|(g, xc)| g * xc)
                .sum::<f64>();
            plane_grad.iter_mut().for_each(|v| *v *= inv);
            d_mu[c] -= plane_grad.iter().sum::<f64>();
        }
    }
    for c in 0..nc {
        let inv = inv_std[c];
        d_var[c] *= -0.5 * inv * inv * inv;
    }

    // Centering rectification.
    if let Some(pooled) = &cache.pooled_input {
        for b in 0..nb {
            for c in 0..nc {
                let s: f64 = d_input.plane(b, c).iter().sum();
                grads.w_c[c] += s * pooled.at(b, c, 0, 0);
                let spread = p.w_c[c] * s / plane;
                d_input
                    .plane_mut(b, c)
                    .iter_mut()
                    .for_each(|v| *v += spread);
            }
        }
    }

    // Statistics that depend on the batch.
    if let StatLink::Linked { weight, batch_mean } = &cache.link {
        for b in 0..nb {
            for c in 0..nc {
                let mean_term = weight * d_mu[c] / count;
                let var_coef = weight * d_var[c] * 2.0 / count;
                let e = batch_mean[c];
                let xs = x.plane(b, c);
                d_input
                    .plane_mut(b, c)
                    .iter_mut()
                    .zip(xs)
                    .for_each(|(g, &xv)| *g += mean_term + var_coef * (xv - e));
            }
        }
    }

    Ok(NormGrads {
        d_input,
        params: grads,
    })
}
