//! Subcommand implementations for the `ubn` binary. Each returns a process
//! exit code: 0 success, 1 check failure, 2 usage or config error,
//! 3 training divergence.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use ubn_core::checkpoint::{Checkpoint, VERSION as CHECKPOINT_VERSION};
use ubn_core::gradcheck::{gradcheck_seeded, random_norm_check, GradCheck};
use ubn_core::harness::rng::{stream_rng, Stream};
use ubn_core::harness::train::{RunStatus, METRICS_HEADER};
use ubn_core::harness::{
    prepare_data, probe_model, select_probe_indices, train, write_metrics_csv, Model, PreparedData,
    TrainConfig, TrainOutcome,
};
use ubn_core::monitor::{
    condensed_flag, export_csv, write_gate_csv, CondensationTrace, DEFAULT_CONDENSED_THRESHOLD,
};
use ubn_core::norm::NormConfig;
use ubn_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_COPY_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const GATE_FILE: &str = "gate.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MATRIX_DIR: &str = "matrices";
pub const SUMMARY_FILE: &str = "summary.json";

pub const GRADCHECK_KINDS: [&str; 5] = ["bn", "ubn", "in", "ln", "gn"];

/// Exit code for an error that ends a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Io { .. } | Error::Format { .. } => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_CHECK_FAILED,
    }
}

fn fail(err: Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(&err)
}

/// Metadata written once per run, before the metrics.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// SHA-256 of the effective configuration (JSON form, seed included).
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub status: String,
    pub outputs: Vec<String>,
    pub versions: Versions,
    pub layers: Vec<String>,
    pub norm_layers: Vec<String>,
    pub probe_indices: Vec<usize>,
    pub data_source: Option<PathBuf>,
    pub standardization: Option<ubn_core::harness::Standardization>,
    /// Command that reproduces this run from the directory's config copy.
    pub replay: String,
    pub config: TrainConfig,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub ubn: &'static str,
    pub checkpoint_format: u32,
    pub metrics_columns: Vec<&'static str>,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Loads a config file and applies a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes every artifact of a finished run under `out_dir`.
fn write_run(
    cfg: &TrainConfig,
    config_path: &Path,
    out_dir: &Path,
    data: &PreparedData,
    outcome: &TrainOutcome,
    started: u128,
) -> Result<()> {
    create_dir(out_dir)?;
    let matrix_dir = out_dir.join(MATRIX_DIR);
    let mut outputs = vec![
        CONFIG_COPY_FILE,
        METRICS_FILE,
        TRACE_FILE,
        GATE_FILE,
        CHECKPOINT_FILE,
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    if cfg.keep_probe_matrices {
        outputs.push(format!("{MATRIX_DIR}/"));
    }
    let status = match &outcome.status {
        RunStatus::Completed => "completed".to_owned(),
        RunStatus::Diverged { epoch, step, loss } => {
            format!("diverged at epoch {epoch}, step {step} (loss {loss})")
        }
    };
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        status,
        outputs,
        versions: Versions {
            ubn: env!("CARGO_PKG_VERSION"),
            checkpoint_format: CHECKPOINT_VERSION,
            metrics_columns: METRICS_HEADER.to_vec(),
        },
        layers: outcome.model.describe(),
        norm_layers: outcome
            .traces
            .iter()
            .map(|t| t.layer_id().to_owned())
            .collect(),
        probe_indices: outcome.probe_indices.clone(),
        data_source: data.source.clone(),
        standardization: data.standardization.clone(),
        replay: format!(
            "ubn train --config {CONFIG_COPY_FILE} --seed {} --out <dir>",
            cfg.seed
        ),
        config: cfg.clone(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;

    std::fs::copy(config_path, out_dir.join(CONFIG_COPY_FILE)).map_err(|e| Error::Io {
        path: config_path.to_path_buf(),
        source: e,
    })?;
    write_metrics_csv(&outcome.metrics, &out_dir.join(METRICS_FILE))?;
    if cfg.keep_probe_matrices {
        create_dir(&matrix_dir)?;
    }
    if outcome.traces.iter().any(|t| !t.is_empty()) {
        export_csv(&outcome.traces, &out_dir.join(TRACE_FILE), &matrix_dir)?;
    }
    write_gate_csv(&outcome.gates, &out_dir.join(GATE_FILE))?;
    outcome.model.save().write(&out_dir.join(CHECKPOINT_FILE))
}

fn run_one(cfg: &TrainConfig, config_path: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let started = unix_ms();
    let data = prepare_data(cfg)?;
    let outcome = train(cfg, &data)?;
    write_run(cfg, config_path, out_dir, &data, &outcome, started)?;
    Ok(outcome)
}

fn report_status(outcome: &TrainOutcome) -> i32 {
    match outcome.check() {
        Ok(()) => EXIT_OK,
        Err(e) => fail(e),
    }
}

/// `ubn train`: one run from a config file.
pub fn cmd_train(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> i32 {
    let cfg = match load_config(config_path, seed) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match run_one(&cfg, config_path, out_dir) {
        Ok(outcome) => {
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "epochs {}: test acc {:.4}, test loss {:.4}",
                    outcome.metrics.len(),
                    last.test_acc,
                    last.test_loss
                );
            }
            report_status(&outcome)
        }
        Err(e) => fail(e),
    }
}

/// Parses `B,C,H,W`.
pub fn parse_shape(text: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config {
            field: "--shape".into(),
            message: format!("expected B,C,H,W as positive integers, got `{text}`"),
        })?;
    match dims.as_slice() {
        &[b, c, h, w] if b > 0 && c > 0 && h > 0 && w > 0 => Ok([b, c, h, w]),
        _ => Err(Error::Config {
            field: "--shape".into(),
            message: format!("expected four positive integers B,C,H,W, got `{text}`"),
        }),
    }
}

/// The layer configuration `cmd_gradcheck` uses for `kind`.
pub fn gradcheck_config(kind: &str, channels: usize) -> Result<NormConfig> {
    Ok(match kind {
        "bn" => NormConfig::bn(),
        "ubn" => NormConfig::ubn(-1.0),
        "in" => NormConfig::instance(),
        "ln" => NormConfig::layer(),
        "gn" => NormConfig::group(if channels.is_multiple_of(2) { 2 } else { 1 }),
        other => {
            return Err(Error::Config {
                field: "kind".into(),
                message: format!(
                    "unknown layer kind `{other}`; expected one of {}",
                    GRADCHECK_KINDS.join(", ")
                ),
            })
        }
    })
}

pub fn print_grad_report(report: &GradCheck) {
    println!(
        "{:<16} {:>12} {:>8} {:>22} {:>22}",
        "tensor", "max_rel_err", "index", "analytic", "numeric"
    );
    let rows = std::iter::once(("input", &report.input))
        .chain(report.params.iter().map(|(n, r)| (n.as_str(), r)));
    for (name, r) in rows {
        println!(
            "{:<16} {:>12.3e} {:>8} {:>22.15e} {:>22.15e}",
            name, r.max_rel_err, r.worst_index, r.analytic, r.numeric
        );
    }
    let (worst, r) = report.worst();
    println!(
        "{}: worst {:.3e} at {worst} (tol {:.1e})",
        if report.passed() { "PASS" } else { "FAIL" },
        r.max_rel_err,
        report.tol
    );
}

/// `ubn gradcheck`: finite-difference check of one layer kind on a random
/// instance.
pub fn cmd_gradcheck(kind: &str, shape: &str, tol: f64, seed: u64) -> i32 {
    let run = || -> Result<GradCheck> {
        let dims = parse_shape(shape)?;
        if tol.is_nan() || tol <= 0.0 {
            return Err(Error::Config {
                field: "--tol".into(),
                message: format!("must be > 0, got {tol}"),
            });
        }
        let cfg = gradcheck_config(kind, dims[1])?;
        let (mut check, x) = random_norm_check(cfg, dims, seed)?;
        gradcheck_seeded(&mut check, &x, tol, seed.wrapping_add(1))
    };
    match run() {
        Ok(report) => {
            println!("gradcheck {kind} shape {shape} seed {seed}");
            print_grad_report(&report);
            if report.passed() {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => fail(e),
    }
}

/// Per-method entry of the comparison summary.
#[derive(Debug, Serialize)]
pub struct MethodSummary {
    pub label: String,
    pub norm: NormConfig,
    pub status: String,
    pub final_test_acc: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// Final probe score at the input of the first normalization layer.
    pub final_s: Option<f64>,
    /// Final probe score per normalization layer.
    pub final_s_per_layer: Vec<(String, f64)>,
    /// Fraction of training steps with an open gate, per layer with running
    /// statistics.
    pub gate_open_fraction: Vec<(String, f64)>,
}

#[derive(Debug, Serialize)]
pub struct CompareSummary {
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
}

pub fn summarize(label: &str, cfg: &TrainConfig, outcome: &TrainOutcome) -> MethodSummary {
    let last = outcome.metrics.last();
    let last_epoch = outcome.gates.last().map(|g| g.epoch);
    MethodSummary {
        label: label.to_owned(),
        norm: cfg.norm.clone(),
        status: match outcome.status {
            RunStatus::Completed => "completed".into(),
            RunStatus::Diverged { .. } => "diverged".into(),
        },
        final_test_acc: last.map(|m| m.test_acc),
        final_test_loss: last.map(|m| m.test_loss),
        final_train_loss: last.map(|m| m.train_loss),
        final_s: outcome
            .traces
            .first()
            .and_then(|t| t.latest())
            .map(|r| r.s_batch),
        final_s_per_layer: outcome
            .traces
            .iter()
            .filter_map(|t| t.latest().map(|r| (t.layer_id().to_owned(), r.s_batch)))
            .collect(),
        gate_open_fraction: outcome
            .gates
            .iter()
            .filter(|g| Some(g.epoch) == last_epoch)
            .map(|g| (g.layer.clone(), g.open_fraction()))
            .collect(),
    }
}

fn method_label(prefix: &str, cfg: &TrainConfig) -> String {
    format!("{prefix}_{}", cfg.norm.kind.name())
}

/// `ubn compare`: two runs that differ only in their norm settings, on the
/// same seed and data.
pub fn cmd_compare(config_a: &Path, config_b: &Path, out_dir: &Path, seed: Option<u64>) -> i32 {
    let configs = match (load_config(config_a, seed), load_config(config_b, seed)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(e),
    };
    let (a, b) = configs;
    if !a.differs_only_in_norm(&b) {
        eprintln!("error: the two configs must differ only in their [norm] table");
        return EXIT_USAGE;
    }
    let mut methods = Vec::new();
    let mut code = EXIT_OK;
    for (prefix, cfg, path) in [("a", &a, config_a), ("b", &b, config_b)] {
        let label = method_label(prefix, cfg);
        match run_one(cfg, path, &out_dir.join(&label)) {
            Ok(outcome) => {
                if outcome.check().is_err() {
                    code = EXIT_DIVERGED;
                }
                let s = summarize(&label, cfg, &outcome);
                println!(
                    "{label}: test acc {:?}, final S {:?}",
                    s.final_test_acc, s.final_s
                );
                methods.push(s);
            }
            Err(e) => return fail(e),
        }
    }
    let summary = CompareSummary {
        seed: a.seed,
        methods,
    };
    if let Err(e) = write_json(&out_dir.join(SUMMARY_FILE), &summary) {
        return fail(e);
    }
    code
}

/// `ubn probe`: condensation scores of the probe batch at every
/// normalization layer input, for a fresh model or a checkpoint.
pub fn cmd_probe(
    config_path: &Path,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
) -> i32 {
    let run = || -> Result<Vec<CondensationTrace>> {
        let cfg = load_config(config_path, seed)?;
        let data = prepare_data(&cfg)?;
        let mut model = Model::build(
            &cfg.model,
            data.train.sample_dims(),
            data.train.classes,
            &cfg.norm,
            &mut stream_rng(cfg.seed, Stream::Init),
        )?;
        if let Some(path) = checkpoint {
            model.load(&Checkpoint::read(path)?)?;
        }
        let idx = select_probe_indices(data.train.len(), cfg.probe_size, cfg.seed);
        let batch = data.train.images.select(&idx)?;
        let mut traces: Vec<CondensationTrace> = model
            .norm_layers()
            .into_iter()
            .map(|(id, _)| CondensationTrace::new(id))
            .collect();
        probe_model(&model, &batch, 0, true, &mut traces)?;
        create_dir(out_dir)?;
        let matrix_dir = out_dir.join(MATRIX_DIR);
        create_dir(&matrix_dir)?;
        export_csv(&traces, &out_dir.join(TRACE_FILE), &matrix_dir)?;
        Ok(traces)
    };
    match run() {
        Ok(traces) => {
            for t in &traces {
                let r = t.latest().expect("one probe per layer");
                println!(
                    "{}: s_batch {:.6}, condensed {}",
                    t.layer_id(),
                    r.s_batch,
                    condensed_flag(t, DEFAULT_CONDENSED_THRESHOLD)
                );
            }
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}
