//! Central-difference gradient checking for the hand-written backward passes.
//!
//! The scalar probed is `L = sum(upstream * forward(x))` for a fixed random
//! `upstream`, so the analytic gradient of `L` is exactly what a layer's
//! backward returns when fed `upstream`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::norm::backward_from_cache;
use crate::norm::{
    alt_norm_backward, alt_norm_forward, bn_train_forward, normalize_with_stats, ubn_forward,
    ubn_update_stats, Mode, NormConfig, NormKind, RunningStats, TrainStats, UbnParams,
};
use crate::tensor::{channel_moments, ChannelVec, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Floor on the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

/// Worst disagreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> Result<GradReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::Contract(format!(
            "analytic gradient has {} entries, numeric has {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        if !report.max_rel_err.is_nan() && (err.is_nan() || err > report.max_rel_err) {
            report = GradReport {
                max_rel_err: err,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    Ok(report)
}

/// Central differences of `f` over a flat parameter vector.
pub fn finite_diff_slice(
    mut f: impl FnMut(&[f64]) -> f64,
    values: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = values.to_vec();
    let mut grad = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(+h) = {plus}, f(-h) = {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Central-difference gradient of a scalar function of a tensor.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor4) -> f64,
    x: &Tensor4,
    h: f64,
) -> Result<Tensor4> {
    let dims = x.dims();
    let grad = finite_diff_slice(
        |values| {
            let probe = Tensor4::new(dims, values.to_vec()).expect("same dims, finite values");
            f(&probe)
        },
        x.data(),
        h,
    )?;
    Tensor4::new(dims, grad)
}

/// A layer with hand-written gradients, seen as a pure function of its input
/// and parameters.
pub trait Differentiable {
    /// Named flat parameter groups.
    fn param_groups(&self) -> Vec<(String, Vec<f64>)>;
    fn set_param_group(&mut self, group: usize, values: &[f64]);
    fn forward(&self, x: &Tensor4) -> Result<Tensor4>;
    /// Input gradient and one gradient vector per parameter group.
    fn backward(&self, x: &Tensor4, upstream: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)>;
}

/// Reports for the input and every parameter group.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub tol: f64,
    pub input: GradReport,
    pub params: Vec<(String, GradReport)>,
}

impl GradCheck {
    /// The single worst report and what it belongs to.
    pub fn worst(&self) -> (&str, &GradReport) {
        let mut worst = ("input", &self.input);
        for (name, r) in &self.params {
            if r.max_rel_err > worst.1.max_rel_err {
                worst = (name, r);
            }
        }
        worst
    }

    pub fn passed(&self) -> bool {
        self.input.passes(self.tol) && self.params.iter().all(|(_, r)| r.passes(self.tol))
    }
}

fn weighted_sum(y: &Tensor4, upstream: &Tensor4) -> f64 {
    y.data()
        .iter()
        .zip(upstream.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Checks `layer`'s backward against central differences at step `h`.
pub fn gradcheck<L: Differentiable>(
    layer: &mut L,
    input: &Tensor4,
    upstream: &Tensor4,
    tol: f64,
    h: f64,
) -> Result<GradCheck> {
    let y = layer.forward(input)?;
    if !y.is_finite() {
        return Err(Error::NonFinite("forward output on the check input".into()));
    }
    if y.dims() != upstream.dims() {
        return Err(Error::Contract(format!(
            "upstream dims {:?} differ from output dims {:?}",
            upstream.dims(),
            y.dims()
        )));
    }
    let (d_input, d_params) = layer.backward(input, upstream)?;
    if d_input.dims() != input.dims() {
        return Err(Error::Contract(format!(
            "input gradient dims {:?} differ from input dims {:?}",
            d_input.dims(),
            input.dims()
        )));
    }

    let numeric = finite_diff_grad(
        |x| {
            layer
                .forward(x)
                .map(|y| weighted_sum(&y, upstream))
                .unwrap_or(f64::NAN)
        },
        input,
        h,
    )?;
    let input_report = compare_gradients(d_input.data(), numeric.data())?;

    let groups = layer.param_groups();
    if d_params.len() != groups.len() {
        return Err(Error::Contract(format!(
            "backward returned {} parameter gradients for {} groups",
            d_params.len(),
            groups.len()
        )));
    }
    let mut params = Vec::with_capacity(groups.len());
    for (g, ((name, values), analytic)) in groups.into_iter().zip(&d_params).enumerate() {
        if analytic.len() != values.len() {
            return Err(Error::Contract(format!(
                "gradient for `{name}` has {} entries, parameter has {}",
                analytic.len(),
                values.len()
            )));
        }
        let numeric = finite_diff_slice(
            |probe| {
                layer.set_param_group(g, probe);
                layer
                    .forward(input)
                    .map(|y| weighted_sum(&y, upstream))
                    .unwrap_or(f64::NAN)
            },
            &values,
            h,
        )?;
        layer.set_param_group(g, &values);
        params.push((name, compare_gradients(analytic, &numeric)?));
    }
    Ok(GradCheck {
        tol,
        input: input_report,
        params,
    })
}

/// [`gradcheck`] with a uniform(-1, 1) upstream drawn from `seed`.
pub fn gradcheck_seeded<L: Differentiable>(
    layer: &mut L,
    input: &Tensor4,
    tol: f64,
    seed: u64,
) -> Result<GradCheck> {
    let y = layer.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upstream = Tensor4::from_fn(y.dims(), |_, _, _, _| rng.random_range(-1.0..1.0));
    gradcheck(layer, input, &upstream, tol, DEFAULT_STEP)
}

/// A normalization layer frozen for checking: every forward starts from the
/// same running-state snapshot, so probes never see each other's updates.
///
/// When `grad_through_batch_stats` is off, the statistics are detached in the
/// analytic gradient, so the numeric side holds them fixed at their values
/// for the unperturbed `reference_input`.
#[derive(Debug, Clone)]
pub struct NormCheck {
    pub cfg: NormConfig,
    pub params: UbnParams,
    pub state: RunningStats,
    detached_stats: Option<(ChannelVec, ChannelVec)>,
}

impl NormCheck {
    pub fn new(
        cfg: NormConfig,
        params: UbnParams,
        state: RunningStats,
        reference_input: &Tensor4,
    ) -> Result<Self> {
        cfg.validate(Some(reference_input.channels()))?;
        let detached_stats = match cfg.kind {
            NormKind::Bn if !cfg.grad_through_batch_stats => {
                Some(channel_moments(reference_input)?)
            }
            NormKind::Ubn if !cfg.grad_through_batch_stats => {
                let mut scratch = state.clone();
                let sel = ubn_update_stats(reference_input, &mut scratch, &cfg)?;
                Some(match (sel.gate_open, cfg.train_stats) {
                    (true, TrainStats::Batch) => (sel.batch_mean, sel.batch_var),
                    _ => (sel.mu, sel.var),
                })
            }
            _ => None,
        };
        Ok(Self {
            cfg,
            params,
            state,
            detached_stats,
        })
    }

    fn run(
        &self,
        x: &Tensor4,
        upstream: Option<&Tensor4>,
    ) -> Result<(Tensor4, Option<(Tensor4, UbnParams)>)> {
        let mut state = self.state.clone();
        let (output, grads) = match self.cfg.kind {
            NormKind::Bn | NormKind::Ubn => {
                let out = match (&self.detached_stats, self.cfg.kind) {
                    (Some((mu, var)), _) => {
                        normalize_with_stats(x, mu, var, &self.params, &self.cfg)?
                    }
                    (None, NormKind::Bn) => {
                        bn_train_forward(x, &mut state, &self.params, &self.cfg)?
                    }
                    (None, _) => ubn_forward(x, &mut state, &self.params, &self.cfg, Mode::Train)?,
                };
                let grads = upstream
                    .map(|up| backward_from_cache(&out.cache, up, &self.params, self.cfg.eps))
                    .transpose()?;
                (out.output, grads)
            }
            _ => {
                let out = alt_norm_forward(x, &self.params, &self.cfg)?;
                let grads = upstream
                    .map(|up| alt_norm_backward(x, up, &self.params, &out.cache))
                    .transpose()?;
                (out.output, grads)
            }
        };
        Ok((output, grads.map(|g| (g.d_input, g.params))))
    }
}

impl Differentiable for NormCheck {
    fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
        UbnParams::GROUPS
            .iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), self.params.group(i).to_vec()))
            .collect()
    }

    fn set_param_group(&mut self, group: usize, values: &[f64]) {
        self.params.group_mut(group).copy_from_slice(values);
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.run(x, None).map(|(y, _)| y)
    }

    fn backward(&self, x: &Tensor4, upstream: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
        let (_, grads) = self.run(x, Some(upstream))?;
        let (d_input, p) = grads.expect("upstream given");
        let groups = (0..UbnParams::GROUPS.len())
            .map(|i| p.group(i).to_vec())
            .collect();
        Ok((d_input, groups))
    }
}

/// Random test instance for a layer kind: input in (-2, 2), parameters
/// perturbed away from their identity initialization, running statistics
/// away from (0, 1).
pub fn random_norm_check(
    cfg: NormConfig,
    dims: [usize; 4],
    seed: u64,
) -> Result<(NormCheck, Tensor4)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dims[1];
    let x = Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-2.0..2.0));
    let mut p = UbnParams::new(c);
    for g in 0..UbnParams::GROUPS.len() {
        p.group_mut(g)
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let mut state = RunningStats::new(c);
    for v in state.mu.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in state.var.iter_mut() {
        *v = rng.random_range(0.5..2.0);
    }
    state.s = rng.random_range(-0.2..0.8);
    state.step_count = 1;
    let check = NormCheck::new(cfg, p, state, &x)?;
    Ok((check, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor4::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let g =
            finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn linear_gradient() {
        let x = Tensor4::new([1, 2, 1, 2], vec![-1.0, 0.5, 3.0, 7.0]).unwrap();
        let g =
            finite_diff_grad(|t| t.data().iter().map(|v| 3.0 * v).sum(), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|v| (v - 3.0).abs() < 1e-8));
    }

    #[test]
    fn non_finite_objective_fails_the_check() {
        let x = Tensor4::new([1, 1, 1, 1], vec![0.0]).unwrap();
        let r = finite_diff_grad(|t| 1.0 / t.data()[0].abs().min(0.0), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(matches!(
            finite_diff_grad(|_| 0.0, &x, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradient_lengths_are_contract_errors() {
        assert!(matches!(
            compare_gradients(&[1.0], &[1.0, 2.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn polynomial_truncation_is_tiny() {
        // Degree-2 polynomial: central differences are exact up to rounding.
        let x = Tensor4::new([1, 1, 2, 2], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let f = |t: &Tensor4| -> f64 {
            t.data()
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * v * v - 2.0 * v + 0.5)
                .sum()
        };
        let g = finite_diff_grad(f, &x, DEFAULT_STEP).unwrap();
        for (i, (gv, v)) in g.data().iter().zip(x.data()).enumerate() {
            let exact = 2.0 * (i as f64 + 1.0) * v - 2.0;
            assert!((gv - exact).abs() <= 1e-8);
        }
    }

    /// `y = g * x + b` per channel; the simplest layer with parameters.
    struct Affine {
        g: Vec<f64>,
        b: Vec<f64>,
    }

    impl Differentiable for Affine {
        fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
            vec![("g".into(), self.g.clone()), ("b".into(), self.b.clone())]
        }

        fn set_param_group(&mut self, group: usize, values: &[f64]) {
            match group {
                0 => self.g = values.to_vec(),
                _ => self.b = values.to_vec(),
            }
        }

        fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
            Ok(Tensor4::from_fn(x.dims(), |b, c, h, w| {
                self.g[c] * x.at(b, c, h, w) + self.b[c]
            }))
        }

        fn backward(&self, x: &Tensor4, up: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
            let d = Tensor4::from_fn(x.dims(), |b, c, h, w| self.g[c] * up.at(b, c, h, w));
            let mut dg = vec![0.0; self.g.len()];
            let mut db = vec![0.0; self.g.len()];
            for b in 0..x.batch() {
                for c in 0..x.channels() {
                    for (u, v) in up.plane(b, c).iter().zip(x.plane(b, c)) {
                        dg[c] += u * v;
                        db[c] += u;
                    }
                }
            }
            Ok((d, vec![dg, db]))
        }
    }

    #[test]
    fn affine_layer_passes_tightly() {
        let mut layer = Affine {
            g: vec![0.7, -1.3],
            b: vec![0.2, 0.0],
        };
        let x = Tensor4::from_fn([2, 2, 2, 2], |b, c, h, w| {
            (b + 2 * c + 3 * h) as f64 * 0.4 - w as f64
        });
        let report = gradcheck_seeded(&mut layer, &x, 1e-6, 5).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_analytic_gradient_is_caught() {
        struct Broken(Affine);
        impl Differentiable for Broken {
            fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
                self.0.param_groups()
            }
            fn set_param_group(&mut self, group: usize, values: &[f64]) {
                self.0.set_param_group(group, values)
            }
            fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
                self.0.forward(x)
            }
            fn backward(&self, x: &Tensor4, up: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
                let (d, mut p) = self.0.backward(x, up)?;
                p[1][0] *= 1.01;
                Ok((d, p))
            }
        }
        let mut layer = Broken(Affine {
            g: vec![1.0],
            b: vec![0.0],
        });
        let x = Tensor4::from_fn([2, 1, 2, 2], |b, _, h, w| (b + h + w) as f64);
        let report = gradcheck_seeded(&mut layer, &x, 1e-4, 1).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().0, "b");
    }

    fn ubn_variants() -> Vec<NormConfig> {
        let mut out = Vec::new();
        for mask in 0..8u8 {
            for grad_flow in [true, false] {
                for tau in [-1.0, 2.0] {
                    let mut cfg = NormConfig::ubn(tau);
                    cfg.centering_rect = mask & 1 != 0;
                    cfg.scaling_rect = mask & 2 != 0;
                    cfg.affine_rect = mask & 4 != 0;
                    cfg.grad_through_batch_stats = grad_flow;
                    out.push(cfg);
                }
            }
        }
        out
    }

    #[test]
    fn every_layer_kind_passes() {
        let mut cfgs = vec![
            NormConfig::bn(),
            NormConfig::instance(),
            NormConfig::layer(),
            NormConfig::group(2),
        ];
        let mut detached_bn = NormConfig::bn();
        detached_bn.grad_through_batch_stats = false;
        cfgs.push(detached_bn);
        let mut batch_stats = NormConfig::ubn(-1.0);
        batch_stats.train_stats = TrainStats::Batch;
        cfgs.push(batch_stats);
        cfgs.extend(ubn_variants());
        for (i, cfg) in cfgs.into_iter().enumerate() {
            let (mut check, x) =
                random_norm_check(cfg.clone(), [3, 2, 3, 3], 100 + i as u64).unwrap();
            let report = gradcheck_seeded(&mut check, &x, DEFAULT_TOL, i as u64).unwrap();
            assert!(report.passed(), "{cfg:?}: {:?}", report.worst());
        }
    }
}
