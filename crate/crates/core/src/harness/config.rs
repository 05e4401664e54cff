//! Training configuration: a TOML file parsed into raw optional fields, then
//! validated into a [`TrainConfig`] with dotted error paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SyntheticSpec;
use super::model::{tiny_conv_net, LayerSpec};
use super::schedule::LrSchedule;
use crate::error::{Error, Result};
use crate::norm::{NormConfig, NormKind, ScoreDivisor, TrainStats};

/// Environment variable naming the default CIFAR-10 directory.
pub const DATA_DIR_ENV: &str = "UBN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DatasetConfig {
    Synthetic {
        train_size: usize,
        test_size: usize,
        dims: [usize; 3],
        offset_scale: f64,
        noise_scale: f64,
        margin: f64,
    },
    Cifar10 {
        /// `None` falls back to the data-directory environment variable.
        path: Option<PathBuf>,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
        augment: bool,
    },
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { .. } => SyntheticSpec::CLASSES,
            DatasetConfig::Cifar10 { .. } => super::data::CIFAR_CLASSES,
        }
    }

    pub fn sample_dims(&self) -> [usize; 3] {
        match self {
            DatasetConfig::Synthetic { dims, .. } => *dims,
            DatasetConfig::Cifar10 { .. } => super::data::CIFAR_DIMS,
        }
    }
}

/// A validated training run description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub decay_norm_params: bool,
    pub probe_size: usize,
    pub keep_probe_matrices: bool,
    /// Record elapsed seconds in the metrics; off keeps metrics reproducible.
    pub record_wall_time: bool,
    pub model: Vec<LayerSpec>,
    pub dataset: DatasetConfig,
    pub norm: NormConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr0: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    warmup_epochs: Option<usize>,
    decay_norm_params: Option<bool>,
    probe_size: Option<usize>,
    keep_probe_matrices: Option<bool>,
    record_wall_time: Option<bool>,
    schedule: Option<RawSchedule>,
    model: Option<RawModel>,
    dataset: Option<RawDataset>,
    norm: Option<RawNorm>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    milestones: Option<Vec<usize>>,
    factor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    width: Option<usize>,
    layers: Option<Vec<LayerSpec>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: Option<String>,
    train_size: Option<usize>,
    test_size: Option<usize>,
    dims: Option<[usize; 3]>,
    offset_scale: Option<f64>,
    noise_scale: Option<f64>,
    margin: Option<f64>,
    path: Option<PathBuf>,
    train_subset: Option<usize>,
    test_subset: Option<usize>,
    augment: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNorm {
    kind: Option<String>,
    tau: Option<f64>,
    groups: Option<usize>,
    momentum: Option<f64>,
    score_momentum: Option<f64>,
    eps: Option<f64>,
    centering_rect: Option<bool>,
    scaling_rect: Option<bool>,
    affine_rect: Option<bool>,
    grad_through_batch_stats: Option<bool>,
    score_divisor: Option<ScoreDivisor>,
    train_stats: Option<TrainStats>,
    zero_init_var: Option<bool>,
}

fn required<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(field, "missing required field"))
}

fn reject<T>(v: &Option<T>, field: &str, why: &str) -> Result<()> {
    match v {
        Some(_) => Err(Error::config(field, why)),
        None => Ok(()),
    }
}

impl TrainConfig {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
    pub const DEFAULT_WIDTH: usize = 16;

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<toml>", e.message().to_owned()))?;
        let raw: RawConfig = serde_path_to_error::deserialize(table).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." { "<root>".into() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        Self::from_raw(raw)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let epochs = required(raw.epochs, "epochs")?;
        let batch_size = required(raw.batch_size, "batch_size")?;
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        let momentum = raw.momentum.unwrap_or(Self::DEFAULT_MOMENTUM);
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {momentum}"),
            ));
        }
        let weight_decay = raw.weight_decay.unwrap_or(Self::DEFAULT_WEIGHT_DECAY);
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                format!("must be >= 0, got {weight_decay}"),
            ));
        }
        let sched = raw.schedule.unwrap_or_default();
        let schedule = LrSchedule {
            lr0: required(raw.lr0, "lr0")?,
            milestones: sched.milestones.unwrap_or_default(),
            factor: sched.factor.unwrap_or(0.1),
            warmup_epochs: raw.warmup_epochs.unwrap_or(0),
        };
        schedule.validate(epochs)?;
        let probe_size = raw.probe_size.unwrap_or(crate::monitor::DEFAULT_PROBE_SIZE);
        if probe_size < 2 {
            return Err(Error::config("probe_size", "must be >= 2"));
        }

        let dataset = parse_dataset(required(raw.dataset, "dataset")?)?;
        let norm = parse_norm(required(raw.norm, "norm")?)?;
        let model = parse_model(raw.model.unwrap_or_default(), dataset.classes())?;

        let cfg = Self {
            seed: raw.seed.unwrap_or(0),
            epochs,
            batch_size,
            momentum,
            weight_decay,
            schedule,
            decay_norm_params: raw.decay_norm_params.unwrap_or(false),
            probe_size,
            keep_probe_matrices: raw.keep_probe_matrices.unwrap_or(false),
            record_wall_time: raw.record_wall_time.unwrap_or(false),
            model,
            dataset,
            norm,
        };
        if let DatasetConfig::Synthetic { train_size, .. } = cfg.dataset {
            if cfg.probe_size > train_size {
                return Err(Error::config(
                    "probe_size",
                    format!(
                        "{} exceeds dataset.train_size = {train_size}",
                        cfg.probe_size
                    ),
                ));
            }
        }
        Ok(cfg)
    }

    /// Whether `self` and `other` differ in nothing but their norm settings.
    pub fn differs_only_in_norm(&self, other: &TrainConfig) -> bool {
        let mut aligned = other.clone();
        aligned.norm = self.norm.clone();
        aligned == *self
    }
}

fn parse_dataset(raw: RawDataset) -> Result<DatasetConfig> {
    let kind = required(raw.kind, "dataset.kind")?;
    match kind.as_str() {
        "synthetic" => {
            let why = "only valid for kind = \"cifar10\"";
            reject(&raw.path, "dataset.path", why)?;
            reject(&raw.train_subset, "dataset.train_subset", why)?;
            reject(&raw.test_subset, "dataset.test_subset", why)?;
            reject(&raw.augment, "dataset.augment", why)?;
            let train_size = required(raw.train_size, "dataset.train_size")?;
            let test_size = required(raw.test_size, "dataset.test_size")?;
            if train_size < 2 {
                return Err(Error::config("dataset.train_size", "must be >= 2"));
            }
            if test_size == 0 {
                return Err(Error::config("dataset.test_size", "must be >= 1"));
            }
            let spec = SyntheticSpec {
                dims: raw.dims.unwrap_or([3, 8, 8]),
                offset_scale: required(raw.offset_scale, "dataset.offset_scale")?,
                noise_scale: required(raw.noise_scale, "dataset.noise_scale")?,
                margin: raw.margin.unwrap_or(SyntheticSpec::DEFAULT_MARGIN),
                direction_seed: 0,
            };
            spec.validate()?;
            Ok(DatasetConfig::Synthetic {
                train_size,
                test_size,
                dims: spec.dims,
                offset_scale: spec.offset_scale,
                noise_scale: spec.noise_scale,
                margin: spec.margin,
            })
        }
        "cifar10" => {
            let why = "only valid for kind = \"synthetic\"";
            reject(&raw.train_size, "dataset.train_size", why)?;
            reject(&raw.test_size, "dataset.test_size", why)?;
            reject(&raw.dims, "dataset.dims", why)?;
            reject(&raw.offset_scale, "dataset.offset_scale", why)?;
            reject(&raw.noise_scale, "dataset.noise_scale", why)?;
            reject(&raw.margin, "dataset.margin", why)?;
            for (field, v) in [
                ("dataset.train_subset", raw.train_subset),
                ("dataset.test_subset", raw.test_subset),
            ] {
                if v == Some(0) {
                    return Err(Error::config(field, "must be >= 1"));
                }
            }
            Ok(DatasetConfig::Cifar10 {
                path: raw.path,
                train_subset: raw.train_subset,
                test_subset: raw.test_subset,
                augment: raw.augment.unwrap_or(true),
            })
        }
        other => Err(Error::config(
            "dataset.kind",
            format!("expected \"synthetic\" or \"cifar10\", got \"{other}\""),
        )),
    }
}

fn parse_norm(raw: RawNorm) -> Result<NormConfig> {
    let kind = match required(raw.kind, "norm.kind")?.as_str() {
        "bn" => NormKind::Bn,
        "ubn" => NormKind::Ubn,
        "in" => NormKind::In,
        "ln" => NormKind::Ln,
        "gn" => NormKind::Gn {
            groups: required(raw.groups, "norm.groups")?,
        },
        other => {
            return Err(Error::config(
                "norm.kind",
                format!("expected one of bn, ubn, in, ln, gn; got \"{other}\""),
            ))
        }
    };
    if !matches!(kind, NormKind::Gn { .. }) {
        reject(&raw.groups, "norm.groups", "only valid for kind = \"gn\"")?;
    }
    let mut cfg = match kind {
        NormKind::Ubn => NormConfig::ubn(required(raw.tau, "norm.tau")?),
        NormKind::Bn => NormConfig::bn(),
        NormKind::In => NormConfig::instance(),
        NormKind::Ln => NormConfig::layer(),
        NormKind::Gn { groups } => NormConfig::group(groups),
    };
    if kind != NormKind::Ubn {
        let why = "only valid for kind = \"ubn\"";
        reject(&raw.tau, "norm.tau", why)?;
        reject(&raw.score_momentum, "norm.score_momentum", why)?;
        reject(&raw.centering_rect, "norm.centering_rect", why)?;
        reject(&raw.scaling_rect, "norm.scaling_rect", why)?;
        reject(&raw.affine_rect, "norm.affine_rect", why)?;
        reject(&raw.score_divisor, "norm.score_divisor", why)?;
        reject(&raw.train_stats, "norm.train_stats", why)?;
    }
    if !kind.is_batch_kind() {
        let why = "only valid for kind = \"bn\" or \"ubn\"";
        reject(&raw.momentum, "norm.momentum", why)?;
        reject(
            &raw.grad_through_batch_stats,
            "norm.grad_through_batch_stats",
            why,
        )?;
        reject(&raw.zero_init_var, "norm.zero_init_var", why)?;
    }
    if let Some(v) = raw.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = raw.score_momentum {
        cfg.score_momentum = v;
    }
    if let Some(v) = raw.eps {
        cfg.eps = v;
    }
    if let Some(v) = raw.centering_rect {
        cfg.centering_rect = v;
    }
    if let Some(v) = raw.scaling_rect {
        cfg.scaling_rect = v;
    }
    if let Some(v) = raw.affine_rect {
        cfg.affine_rect = v;
    }
    if let Some(v) = raw.grad_through_batch_stats {
        cfg.grad_through_batch_stats = v;
    }
    if let Some(v) = raw.score_divisor {
        cfg.score_divisor = v;
    }
    if let Some(v) = raw.train_stats {
        cfg.train_stats = v;
    }
    if let Some(v) = raw.zero_init_var {
        cfg.zero_init_var = v;
    }
    cfg.validate(None)?;
    Ok(cfg)
}

fn parse_model(raw: RawModel, classes: usize) -> Result<Vec<LayerSpec>> {
    match (raw.preset.as_deref(), raw.layers) {
        (Some(_), Some(_)) => Err(Error::config(
            "model.layers",
            "give either model.preset or model.layers, not both",
        )),
        (None, Some(layers)) => {
            reject(&raw.width, "model.width", "only valid with model.preset")?;
            if layers.is_empty() {
                return Err(Error::config("model.layers", "must not be empty"));
            }
            Ok(layers)
        }
        (Some("tiny_conv") | None, None) => {
            let width = raw.width.unwrap_or(TrainConfig::DEFAULT_WIDTH);
            if width == 0 {
                return Err(Error::config("model.width", "must be >= 1"));
            }
            Ok(tiny_conv_net(width, classes))
        }
        (Some(other), None) => Err(Error::config(
            "model.preset",
            format!("unknown preset \"{other}\"; expected \"tiny_conv\""),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
epochs = 2
batch_size = 8
lr0 = 0.05

[dataset]
kind = "synthetic"
train_size = 32
test_size = 16
offset_scale = 2.0
noise_scale = 1.0

[norm]
kind = "ubn"
tau = 0.15
"#;

    fn field_of(text: &str) -> String {
        match TrainConfig::from_toml_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = TrainConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.norm, NormConfig::ubn(0.15));
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.probe_size, 32);
        assert_eq!(cfg.model, tiny_conv_net(16, 2));
        assert!(!cfg.record_wall_time);
    }

    #[test]
    fn missing_tau_names_the_field() {
        assert_eq!(field_of(&MINIMAL.replace("tau = 0.15", "")), "norm.tau");
    }

    #[test]
    fn errors_carry_dotted_paths() {
        assert_eq!(field_of(&MINIMAL.replace("lr0 = 0.05", "")), "lr0");
        assert_eq!(
            field_of(&MINIMAL.replace("tau = 0.15", "tau = 0.15\ntypo = 1")),
            "norm.typo"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("tau = 0.15", "tau = \"x\"")),
            "norm.tau"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("kind = \"ubn\"\ntau = 0.15", "kind = \"bn\"\ntau = 0.15")),
            "norm.tau"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("kind = \"ubn\"", "kind = \"bogus\"")),
            "norm.kind"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("batch_size = 8", "batch_size = 0")),
            "batch_size"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("lr0 = 0.05", "lr0 = 0.05\n[schedule]\nmilestones = [1, 1]")),
            "schedule.milestones"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("epochs = 2", "epochs = 2\nprobe_size = 64")),
            "probe_size"
        );
    }

    #[test]
    fn explicit_layers_parse() {
        let text = MINIMAL.replace(
            "lr0 = 0.05",
            "lr0 = 0.05\n[model]\nlayers = [{ type = \"linear\", out = 2 }]",
        );
        let cfg = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.model, vec![LayerSpec::Linear { out: 2 }]);
    }

    #[test]
    fn norm_only_difference_is_detected() {
        let a = TrainConfig::from_toml_str(MINIMAL).unwrap();
        let b = TrainConfig::from_toml_str(
            &MINIMAL.replace("kind = \"ubn\"\ntau = 0.15", "kind = \"bn\""),
        )
        .unwrap();
        assert!(a.differs_only_in_norm(&b));
        let c = TrainConfig::from_toml_str(&MINIMAL.replace("epochs = 2", "epochs = 3")).unwrap();
        assert!(!a.differs_only_in_norm(&c));
    }
}
