//! Running statistics and the condensation gate that decides whether a batch
//! is allowed to update them.

use super::config::{NormConfig, ScoreDivisor};
use crate::error::{Error, Result};
use crate::tensor::{channel_moments, pairwise_cosine_matrix, ChannelVec, Tensor4};

/// Per-layer running state: EMA mean/variance plus the smoothed condensation score.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mu: ChannelVec,
    pub var: ChannelVec,
    /// Smoothed condensation score. Starts at 0.
    pub s: f64,
    /// Training steps seen.
    pub step_count: u64,
    /// Training steps on which the running mean/variance were updated.
    pub gate_open_steps: u64,
}

impl RunningStats {
    /// Mean 0, variance 1, score 0.
    pub fn new(channels: usize) -> Self {
        Self {
            mu: ChannelVec::zeros(channels),
            var: ChannelVec::filled(channels, 1.0),
            s: 0.0,
            step_count: 0,
            gate_open_steps: 0,
        }
    }

    /// Initial state honouring `cfg.zero_init_var`.
    pub fn for_config(channels: usize, cfg: &NormConfig) -> Self {
        let mut stats = Self::new(channels);
        if cfg.zero_init_var {
            stats.var = ChannelVec::zeros(channels);
        }
        stats
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Fraction of training steps on which the gate was open.
    pub fn gate_open_fraction(&self) -> f64 {
        if self.step_count == 0 {
            0.0
        } else {
            self.gate_open_steps as f64 / self.step_count as f64
        }
    }
}

/// Average off-diagonal cosine similarity between the samples of `x`.
///
/// With fewer than two samples the score is undefined; 0 is returned and a
/// debug message is logged.
pub fn condensation_score(x: &Tensor4, divisor: ScoreDivisor) -> f64 {
    let nb = x.batch();
    if nb < 2 {
        log::debug!("condensation score undefined for batch of {nb}; using 0");
        return 0.0;
    }
    let sum = pairwise_cosine_matrix(x).off_diagonal_sum();
    match divisor {
        ScoreDivisor::Pairs => sum / (nb * (nb - 1)) as f64,
        ScoreDivisor::Batch => sum / nb as f64,
    }
}

/// Outcome of the statistics-selection stage for one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsSelection {
    /// Mean to normalize with: the updated running mean if the gate opened,
    /// otherwise the stored one.
    pub mu: ChannelVec,
    pub var: ChannelVec,
    pub gate_open: bool,
    /// Batch score that fed the running score.
    pub s_batch: f64,
    /// Raw batch moments, kept for backward and for batch-statistics mode.
    pub batch_mean: ChannelVec,
    pub batch_var: ChannelVec,
}

/// Applies the score EMA and then the gated statistics update.
///
/// The score is always updated first; the comparison against `cfg.tau` uses
/// the new score. `force_open` bypasses the comparison (used for batches too
/// small to score).
pub fn gated_update(
    state: &mut RunningStats,
    s_batch: f64,
    batch_mean: ChannelVec,
    batch_var: ChannelVec,
    cfg: &NormConfig,
    force_open: bool,
) -> Result<StatsSelection> {
    if !s_batch.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch condensation score {s_batch}"
        )));
    }
    if batch_mean.len() != state.channels() || batch_var.len() != state.channels() {
        return Err(Error::Dimension(format!(
            "batch moments over {} channels for state of {} channels",
            batch_mean.len(),
            state.channels()
        )));
    }
    let mp = cfg.score_momentum;
    state.s = mp * state.s + (1.0 - mp) * s_batch;
    let gate_open = force_open || state.s > cfg.tau;
    if gate_open {
        let m = cfg.momentum;
        for c in 0..state.channels() {
            state.mu[c] = m * batch_mean[c] + (1.0 - m) * state.mu[c];
            state.var[c] = m * batch_var[c] + (1.0 - m) * state.var[c];
        }
        state.gate_open_steps += 1;
    }
    state.step_count += 1;
    Ok(StatsSelection {
        mu: state.mu.clone(),
        var: state.var.clone(),
        gate_open,
        s_batch,
        batch_mean,
        batch_var,
    })
}

/// Stage one of the gated layer on a training batch: score the batch, update
/// the running score, and update the running statistics only if the gate opens.
pub fn ubn_update_stats(
    x: &Tensor4,
    state: &mut RunningStats,
    cfg: &NormConfig,
) -> Result<StatsSelection> {
    let (batch_mean, batch_var) = channel_moments(x)?;
    let undefined = x.batch() < 2;
    if undefined {
        log::warn!("batch of {} cannot be scored; gate forced open", x.batch());
    }
    let s_batch = condensation_score(x, cfg.score_divisor);
    gated_update(state, s_batch, batch_mean, batch_var, cfg, undefined)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tau: f64, m: f64, mp: f64) -> NormConfig {
        NormConfig {
            momentum: m,
            score_momentum: mp,
            ..NormConfig::ubn_stats_only(tau)
        }
    }

    #[test]
    fn score_examples() {
        let same = Tensor4::from_fn([5, 2, 2, 2], |_, c, h, w| 1.0 + (c * 4 + h * 2 + w) as f64);
        assert!((condensation_score(&same, ScoreDivisor::Pairs) - 1.0).abs() < 1e-15);

        let ortho = Tensor4::new([2, 1, 1, 2], vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(condensation_score(&ortho, ScoreDivisor::Pairs), 0.0);

        // The literal divisor scales the same sum by (B - 1).
        assert!((condensation_score(&same, ScoreDivisor::Batch) - 4.0).abs() < 1e-14);

        let single = Tensor4::full([1, 2, 2, 2], 1.0);
        assert_eq!(condensation_score(&single, ScoreDivisor::Pairs), 0.0);
    }

    #[test]
    fn score_matches_pair_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let x = Tensor4::from_fn([4, 3, 2, 2], |_, _, _, _| rng.random_range(-1.0..1.0));
        let mut sum = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let (a, b) = (x.sample(i), x.sample(j));
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                sum += dot / (na * nb);
            }
        }
        let got = condensation_score(&x, ScoreDivisor::Pairs);
        assert!((got - sum / 12.0).abs() < 1e-14);
    }

    #[test]
    fn closed_gate_returns_stored_stats_untouched() {
        let mut state = RunningStats::new(2);
        state.mu = ChannelVec::new(vec![0.3, -0.7]);
        state.var = ChannelVec::new(vec![1.5, 0.25]);
        let before = state.clone();
        let sel = gated_update(
            &mut state,
            0.1,
            ChannelVec::new(vec![5.0, 5.0]),
            ChannelVec::new(vec![9.0, 9.0]),
            &cfg(0.5, 0.1, 0.9),
            false,
        )
        .unwrap();
        assert!(!sel.gate_open);
        assert_eq!(sel.mu, before.mu);
        assert_eq!(sel.var, before.var);
        assert_eq!(state.mu, before.mu);
        assert_eq!(state.var, before.var);
        assert_eq!(state.step_count, 1);
        assert_eq!(state.gate_open_steps, 0);
        // The score still moved.
        assert!((state.s - 0.01).abs() < 1e-17);
    }

    #[test]
    fn score_update_happens_before_the_comparison() {
        let mut state = RunningStats::new(1);
        let sel = gated_update(
            &mut state,
            0.4,
            ChannelVec::new(vec![1.0]),
            ChannelVec::new(vec![2.0]),
            &cfg(0.15, 0.1, 0.5),
            false,
        )
        .unwrap();
        assert!((state.s - 0.2).abs() < 1e-16);
        assert!(sel.gate_open);
        assert!((state.mu[0] - 0.1).abs() < 1e-16);
        assert!((state.var[0] - (0.1 * 2.0 + 0.9)).abs() < 1e-16);
    }

    #[test]
    fn always_open_with_unit_momentum_copies_batch_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::from_fn([3, 2, 2, 3], |_, _, _, _| rng.random_range(-5.0..5.0));
        let mut state = RunningStats::new(2);
        state.mu = ChannelVec::new(vec![100.0, -100.0]);
        let sel = ubn_update_stats(&x, &mut state, &cfg(-1.0, 1.0, 0.9)).unwrap();
        let (mean, var) = channel_moments(&x).unwrap();
        assert_eq!(sel.mu, mean);
        assert_eq!(sel.var, var);
    }

    #[test]
    fn single_sample_batch_forces_gate_open() {
        let x = Tensor4::from_fn([1, 1, 2, 2], |_, _, h, w| (h * 2 + w) as f64);
        let mut state = RunningStats::new(1);
        let sel = ubn_update_stats(&x, &mut state, &cfg(0.9, 0.5, 0.9)).unwrap();
        assert!(sel.gate_open);
        assert_eq!(sel.s_batch, 0.0);
        assert_eq!(state.s, 0.0);
    }

    #[test]
    fn non_finite_score_is_rejected() {
        let mut state = RunningStats::new(1);
        let err = gated_update(
            &mut state,
            f64::NAN,
            ChannelVec::zeros(1),
            ChannelVec::zeros(1),
            &cfg(0.1, 0.1, 0.9),
            false,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
