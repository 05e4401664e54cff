//! Condensation diagnostics: per-epoch probe scores, their CSV export, and
//! the per-layer gate counters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::norm::RunningStats;
use crate::tensor::{pairwise_cosine_matrix, CosineMatrix, Tensor4};

pub const DEFAULT_CONDENSED_THRESHOLD: f64 = 0.3;
pub const DEFAULT_PROBE_SIZE: usize = 32;

pub const TRACE_HEADER: [&str; 4] = ["epoch", "layer", "s_batch", "s_running"];
pub const GATE_HEADER: [&str; 4] = ["epoch", "layer", "steps", "gate_open_steps"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    /// Mean off-diagonal cosine of the probe batch.
    pub s_batch: f64,
    /// The layer's smoothed score; `None` for layers without running state.
    pub s_running: Option<f64>,
}

/// Probe history of one layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensationTrace {
    layer_id: String,
    records: Vec<TraceRecord>,
    matrices: BTreeMap<usize, CosineMatrix>,
}

impl CondensationTrace {
    pub fn new(layer_id: impl Into<String>) -> Self {
        Self {
            layer_id: layer_id.into(),
            records: Vec::new(),
            matrices: BTreeMap::new(),
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    /// Stored probe matrices keyed by epoch.
    pub fn matrices(&self) -> &BTreeMap<usize, CosineMatrix> {
        &self.matrices
    }

    pub fn latest(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record; epochs must be strictly increasing.
    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::Contract(format!(
                    "trace `{}`: epoch {} after epoch {}",
                    self.layer_id, record.epoch, last.epoch
                )));
            }
        }
        let finite = record.s_batch.is_finite() && record.s_running.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite(format!(
                "trace `{}` epoch {}: s_batch = {}, s_running = {:?}",
                self.layer_id, record.epoch, record.s_batch, record.s_running
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Attaches a matrix to an already recorded epoch.
    pub fn insert_matrix(&mut self, epoch: usize, matrix: CosineMatrix) -> Result<()> {
        if !self.records.iter().any(|r| r.epoch == epoch) {
            return Err(Error::Contract(format!(
                "trace `{}` has no record for epoch {epoch}",
                self.layer_id
            )));
        }
        self.matrices.insert(epoch, matrix);
        Ok(())
    }
}

/// Scores the probe activations `x` and appends them to `trace` together
/// with the layer's running score. Reads `state` only.
pub fn probe(
    x: &Tensor4,
    epoch: usize,
    state: Option<&RunningStats>,
    keep_matrix: bool,
    trace: &mut CondensationTrace,
) -> Result<()> {
    if x.batch() < 2 {
        return Err(Error::Dimension(format!(
            "probe batch needs at least 2 samples, got {}",
            x.batch()
        )));
    }
    let matrix = pairwise_cosine_matrix(x);
    let s_batch = matrix.off_diagonal_mean().expect("at least two samples");
    trace.push(TraceRecord {
        epoch,
        s_batch,
        s_running: state.map(|s| s.s),
    })?;
    if keep_matrix {
        trace.insert_matrix(epoch, matrix)?;
    }
    Ok(())
}

/// Whether the latest probe exceeds `threshold` (strictly).
pub fn condensed_flag(trace: &CondensationTrace, threshold: f64) -> bool {
    trace.latest().is_some_and(|r| r.s_batch > threshold)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, path: &Path, line: u64) -> Result<f64> {
    s.parse().map_err(|_| Error::Format {
        offset: line,
        message: format!("{}: `{s}` is not a number", path.display()),
    })
}

fn parse_usize(s: &str, path: &Path, line: u64) -> Result<usize> {
    s.parse().map_err(|_| Error::Format {
        offset: line,
        message: format!("{}: `{s}` is not a non-negative integer", path.display()),
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

fn matrix_file_name(layer_id: &str, epoch: usize) -> String {
    format!("{layer_id}_{epoch}.csv")
}

/// Writes all traces to one CSV at `path` and every stored matrix to
/// `<layer>_<epoch>.csv` in `matrix_dir`. Returns the matrix file paths.
pub fn export_csv(
    traces: &[CondensationTrace],
    path: &Path,
    matrix_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if traces.iter().all(CondensationTrace::is_empty) {
        return Err(Error::Contract("refusing to export an empty trace".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(TRACE_HEADER).map_err(|e| csv_err(path, e))?;
    for trace in traces {
        for r in &trace.records {
            let running = r.s_running.map(fmt_f64).unwrap_or_default();
            w.write_record([
                r.epoch.to_string(),
                trace.layer_id.clone(),
                fmt_f64(r.s_batch),
                running,
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let mut written = Vec::new();
    for trace in traces {
        for (&epoch, m) in &trace.matrices {
            let file = matrix_dir.join(matrix_file_name(&trace.layer_id, epoch));
            write_matrix(m, &file)?;
            written.push(file);
        }
    }
    Ok(written)
}

pub fn write_matrix(m: &CosineMatrix, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for i in 0..m.size() {
        w.write_record(m.row(i).iter().map(|&v| fmt_f64(v)))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<CosineMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for field in rec.iter() {
            values.push(parse_f64(field, path, line as u64)?);
        }
        rows += 1;
    }
    CosineMatrix::from_values(rows, values)
}

/// Reads a trace CSV back, one trace per layer in order of first appearance.
/// Matrices are not attached; see [`read_matrix`].
pub fn read_csv(path: &Path) -> Result<Vec<CondensationTrace>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::Format {
            offset: 0,
            message: format!("{}: unexpected header {header:?}", path.display()),
        });
    }
    let mut traces: Vec<CondensationTrace> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 4 {
            return Err(Error::Format {
                offset: line,
                message: format!("{}: expected 4 fields, got {}", path.display(), rec.len()),
            });
        }
        let record = TraceRecord {
            epoch: parse_usize(&rec[0], path, line)?,
            s_batch: parse_f64(&rec[2], path, line)?,
            s_running: match &rec[3] {
                "" => None,
                s => Some(parse_f64(s, path, line)?),
            },
        };
        let layer = &rec[1];
        let idx = match traces.iter().position(|t| t.layer_id == layer) {
            Some(idx) => idx,
            None => {
                traces.push(CondensationTrace::new(layer));
                traces.len() - 1
            }
        };
        traces[idx].push(record)?;
    }
    Ok(traces)
}

/// Cumulative gate counters of one layer after an epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateRecord {
    pub epoch: usize,
    pub layer: String,
    pub steps: u64,
    pub gate_open_steps: u64,
}

impl GateRecord {
    pub fn open_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.gate_open_steps as f64 / self.steps as f64
        }
    }
}

pub fn write_gate_csv(records: &[GateRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(GATE_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.layer.clone(),
            r.steps.to_string(),
            r.gate_open_steps.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gate_csv(path: &Path) -> Result<Vec<GateRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 4 {
            return Err(Error::Format {
                offset: line,
                message: format!("{}: expected 4 fields, got {}", path.display(), rec.len()),
            });
        }
        out.push(GateRecord {
            epoch: parse_usize(&rec[0], path, line)?,
            layer: rec[1].to_owned(),
            steps: parse_usize(&rec[2], path, line)? as u64,
            gate_open_steps: parse_usize(&rec[3], path, line)? as u64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(epoch: usize, s_batch: f64) -> TraceRecord {
        TraceRecord {
            epoch,
            s_batch,
            s_running: Some(0.0),
        }
    }

    #[test]
    fn identical_samples_score_one() {
        let x = Tensor4::from_fn([4, 2, 2, 2], |_, c, h, w| (c * 4 + h * 2 + w) as f64 + 1.0);
        let mut t = CondensationTrace::new("n0");
        probe(&x, 0, None, false, &mut t).unwrap();
        assert!((t.latest().unwrap().s_batch - 1.0).abs() < 1e-15);
        assert_eq!(t.latest().unwrap().s_running, None);
    }

    #[test]
    fn probes_are_ordered_and_duplicates_rejected() {
        let x = Tensor4::from_fn([3, 1, 2, 2], |b, _, h, w| (b + h + 2 * w) as f64 - 1.5);
        let mut t = CondensationTrace::new("n0");
        probe(&x, 0, None, false, &mut t).unwrap();
        probe(&x, 1, None, false, &mut t).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.records()[0].epoch, 0);
        assert_eq!(t.records()[1].epoch, 1);
        assert!(matches!(
            probe(&x, 1, None, false, &mut t),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            probe(&x, 0, None, false, &mut t),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn probe_reports_running_score() {
        let x = Tensor4::from_fn([2, 1, 1, 2], |b, _, _, w| (b + w) as f64);
        let mut state = RunningStats::new(1);
        state.s = 0.42;
        let snapshot = state.clone();
        let mut t = CondensationTrace::new("n0");
        probe(&x, 3, Some(&state), false, &mut t).unwrap();
        assert_eq!(t.latest().unwrap().s_running, Some(0.42));
        assert_eq!(state, snapshot);
    }

    #[test]
    fn condensed_flag_is_strict() {
        let mut t = CondensationTrace::new("n0");
        assert!(!condensed_flag(&t, DEFAULT_CONDENSED_THRESHOLD));
        t.push(rec(0, 0.31)).unwrap();
        assert!(condensed_flag(&t, DEFAULT_CONDENSED_THRESHOLD));
        t.push(rec(1, 0.0)).unwrap();
        assert!(!condensed_flag(&t, DEFAULT_CONDENSED_THRESHOLD));
        t.push(rec(2, 0.3)).unwrap();
        assert!(!condensed_flag(&t, DEFAULT_CONDENSED_THRESHOLD));
    }

    #[test]
    fn one_record_exports_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = CondensationTrace::new("n0");
        t.push(rec(0, 0.5)).unwrap();
        let path = dir.path().join("trace.csv");
        export_csv(&[t], &path, dir.path()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "epoch,layer,s_batch,s_running");
    }

    #[test]
    fn empty_export_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let r = export_csv(
            &[CondensationTrace::new("n0")],
            &dir.path().join("t.csv"),
            dir.path(),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn matrix_file_shape_and_mean() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor4::from_fn([4, 2, 1, 3], |b, c, _, w| {
            ((b * 5 + c * 3 + w * 7) % 11) as f64 - 4.0
        });
        let mut t = CondensationTrace::new("n1");
        probe(&x, 0, None, true, &mut t).unwrap();
        let files = export_csv(&[t.clone()], &dir.path().join("t.csv"), dir.path()).unwrap();
        assert_eq!(files, vec![dir.path().join("n1_0.csv")]);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.split(',').count() == 4));
        let m = read_matrix(&files[0]).unwrap();
        let mut sum = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    sum += m.get(i, j);
                }
            }
        }
        assert!((sum / 12.0 - t.latest().unwrap().s_batch).abs() < 1e-15);
    }

    #[test]
    fn missing_trace_file_names_path() {
        let err = read_csv(Path::new("/nonexistent/trace.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/trace.csv"));
    }

    proptest! {
        #[test]
        fn trace_round_trips_exactly(
            scores in proptest::collection::vec((-1.0f64..=1.0, proptest::option::of(-1.0f64..=1.0)), 1..8),
            layers in 1usize..3,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let traces: Vec<CondensationTrace> = (0..layers)
                .map(|l| {
                    let mut t = CondensationTrace::new(format!("layer{l}"));
                    for (e, &(s, r)) in scores.iter().enumerate() {
                        t.push(TraceRecord { epoch: e * 2, s_batch: s / (l + 1) as f64, s_running: r }).unwrap();
                    }
                    t
                })
                .collect();
            let path = dir.path().join("trace.csv");
            export_csv(&traces, &path, dir.path()).unwrap();
            prop_assert_eq!(read_csv(&path).unwrap(), traces);
        }

        #[test]
        fn gate_csv_round_trips(counts in proptest::collection::vec((0u64..1000, 0u64..1000), 0..6)) {
            let dir = tempfile::tempdir().unwrap();
            let recs: Vec<GateRecord> = counts
                .iter()
                .enumerate()
                .map(|(e, &(a, b))| GateRecord { epoch: e, layer: "n0".into(), steps: a + b, gate_open_steps: a })
                .collect();
            let path = dir.path().join("gate.csv");
            write_gate_csv(&recs, &path).unwrap();
            prop_assert_eq!(read_gate_csv(&path).unwrap(), recs);
        }
    }
}
