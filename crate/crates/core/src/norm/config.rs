use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum NormKind {
    /// Batch normalization.
    Bn,
    /// Condensation-gated batch normalization with optional rectifications.
    Ubn,
    /// Instance normalization: statistics per `(b, c)`.
    In,
    /// Layer normalization: statistics per sample.
    Ln,
    /// Group normalization: statistics per `(b, group)`.
    Gn { groups: usize },
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Ubn => "ubn",
            NormKind::In => "in",
            NormKind::Ln => "ln",
            NormKind::Gn { .. } => "gn",
        }
    }

    /// Whether the layer keeps running statistics.
    pub fn is_batch_kind(&self) -> bool {
        matches!(self, NormKind::Bn | NormKind::Ubn)
    }
}

/// Divisor applied to the sum of off-diagonal cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreDivisor {
    /// `B * (B - 1)`: a true mean over ordered pairs, bounded by [-1, 1].
    #[default]
    Pairs,
    /// `B`, the literal prefactor written next to the pair sum. Not bounded.
    Batch,
}

/// Which statistics a gated layer normalizes with in training mode when the
/// gate is open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStats {
    /// The freshly EMA-updated running statistics.
    #[default]
    Updated,
    /// Raw batch statistics, as plain batch normalization does.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub kind: NormKind,
    /// Condensation threshold: running statistics update only while the score exceeds it.
    pub tau: f64,
    /// EMA momentum for running mean/variance, in (0, 1].
    pub momentum: f64,
    /// EMA momentum for the condensation score, in [0, 1).
    pub score_momentum: f64,
    pub eps: f64,
    pub centering_rect: bool,
    pub scaling_rect: bool,
    pub affine_rect: bool,
    pub grad_through_batch_stats: bool,
    pub score_divisor: ScoreDivisor,
    pub train_stats: TrainStats,
    /// Start the running variance at 0 instead of 1.
    pub zero_init_var: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self::bn()
    }
}

impl NormConfig {
    pub const DEFAULT_TAU: f64 = 0.15;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_SCORE_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    fn base(kind: NormKind) -> Self {
        Self {
            kind,
            tau: Self::DEFAULT_TAU,
            momentum: Self::DEFAULT_MOMENTUM,
            score_momentum: Self::DEFAULT_SCORE_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            centering_rect: false,
            scaling_rect: false,
            affine_rect: false,
            grad_through_batch_stats: true,
            score_divisor: ScoreDivisor::Pairs,
            train_stats: TrainStats::Updated,
            zero_init_var: false,
        }
    }

    pub fn bn() -> Self {
        Self::base(NormKind::Bn)
    }

    /// Gated normalization with all three rectifications on.
    pub fn ubn(tau: f64) -> Self {
        Self {
            tau,
            centering_rect: true,
            scaling_rect: true,
            affine_rect: true,
            ..Self::base(NormKind::Ubn)
        }
    }

    /// Gated statistics only; no rectifications.
    pub fn ubn_stats_only(tau: f64) -> Self {
        Self {
            tau,
            ..Self::base(NormKind::Ubn)
        }
    }

    /// Centering and scaling rectification on batch statistics with the gate
    /// permanently open: a representative-BN-style layer.
    pub fn rbn() -> Self {
        Self {
            tau: -1.0,
            centering_rect: true,
            scaling_rect: true,
            train_stats: TrainStats::Batch,
            ..Self::base(NormKind::Ubn)
        }
    }

    /// Depthwise-convolution affine on plain batch statistics: a BNET-style layer.
    pub fn bnet() -> Self {
        Self {
            tau: -1.0,
            affine_rect: true,
            train_stats: TrainStats::Batch,
            ..Self::base(NormKind::Ubn)
        }
    }

    pub fn instance() -> Self {
        Self::base(NormKind::In)
    }

    pub fn layer() -> Self {
        Self::base(NormKind::Ln)
    }

    pub fn group(groups: usize) -> Self {
        Self::base(NormKind::Gn { groups })
    }

    /// Checks the value ranges and, when `channels` is given, that group
    /// normalization divides it.
    pub fn validate(&self, channels: Option<usize>) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(
                "norm.eps",
                format!("must be > 0, got {}", self.eps),
            ));
        }
        if self.kind.is_batch_kind() && !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config(
                "norm.momentum",
                format!("must lie in (0, 1], got {}", self.momentum),
            ));
        }
        if self.kind == NormKind::Ubn {
            if !(0.0..1.0).contains(&self.score_momentum) {
                return Err(Error::config(
                    "norm.score_momentum",
                    format!("must lie in [0, 1), got {}", self.score_momentum),
                ));
            }
            if !self.tau.is_finite() {
                return Err(Error::config("norm.tau", "must be finite"));
            }
        }
        if let NormKind::Gn { groups } = self.kind {
            if groups == 0 {
                return Err(Error::config("norm.groups", "must be >= 1"));
            }
            if let Some(c) = channels {
                if c % groups != 0 {
                    return Err(Error::config(
                        "norm.groups",
                        format!("{groups} groups do not divide {c} channels"),
                    ));
                }
            }
        }
        Ok(())
    }
}
