//! Run artifacts: checkpoints, metrics tables and the per-run results table.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::net::{build, ArchitectureSpec, PartitionedModel};
use crate::train::{RunMetrics, StepRow, TrainOutcome};

const MAGIC: &[u8; 8] = b"IBPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub step: u64,
}

fn tensors_of(model: &PartitionedModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for c in &model.components {
        for p in &c.params {
            out.push((p.id.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        for b in &c.buffers {
            out.push((format!("{}.running_mean", b.id), vec![b.mean.len()], b.mean.clone()));
            out.push((format!("{}.running_var", b.id), vec![b.var.len()], b.var.clone()));
        }
    }
    out
}

/// Versioned binary container: magic, version, a text header with the
/// architecture, seed and step, then `(id, shape, little-endian f64 data)`
/// records for every parameter and batch-norm buffer.
pub fn encode_checkpoint(model: &PartitionedModel, seed: u64, step: u64) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = format!("arch = {}\nseed = {seed}\nstep = {step}\n", model.spec);
    b.extend_from_slice(&(header.len() as u32).to_le_bytes());
    b.extend_from_slice(header.as_bytes());
    let tensors = tensors_of(model);
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (id, shape, data) in tensors {
        b.extend_from_slice(&(id.len() as u32).to_le_bytes());
        b.extend_from_slice(id.as_bytes());
        b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("need {n} more bytes, file ends")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Parse { offset: at as u64, message: "text is not UTF-8".into() })
    }
}

/// Rebuilds the model recorded in a checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PartitionedModel, CheckpointHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "not a checkpoint (bad magic)".into() });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse { offset: 8, message: format!("unsupported checkpoint version {version}") });
    }
    let len = r.u32()? as usize;
    let header_at = r.pos as u64;
    let header = r.text(len)?;
    let bad_header = |m: String| Error::Parse { offset: header_at, message: m };
    let (mut spec, mut seed, mut step) = (None, None, None);
    for line in header.lines() {
        match line.split_once(" = ") {
            Some(("arch", v)) => spec = Some(v.parse::<ArchitectureSpec>().map_err(|e| bad_header(e.to_string()))?),
            Some(("seed", v)) => seed = v.parse().ok(),
            Some(("step", v)) => step = v.parse().ok(),
            _ => return Err(bad_header(format!("unexpected header line `{line}`"))),
        }
    }
    let (Some(spec), Some(seed), Some(step)) = (spec, seed, step) else {
        return Err(bad_header("header needs arch, seed and step".into()));
    };
    let mut model = build(&spec, seed).map_err(|e| bad_header(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut records = std::collections::HashMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let id = r.text(n)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let at = r.pos;
        let data: Vec<f64> = r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        records.insert(id, (shape, data, at));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after the last record"));
    }
    let end = r.pos as u64;
    let mut fetch = |id: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let (s, data, at) = records
            .remove(id)
            .ok_or_else(|| Error::Parse { offset: end, message: format!("missing record `{id}`") })?;
        if s != shape {
            return Err(Error::Parse { offset: at as u64, message: format!("`{id}` has shape {s:?}, model needs {shape:?}") });
        }
        Ok(data)
    };
    for c in &mut model.components {
        for p in &mut c.params {
            let data = fetch(&p.id, p.value.shape())?;
            p.value.data_mut().copy_from_slice(&data);
        }
        for b in &mut c.buffers {
            b.mean = fetch(&format!("{}.running_mean", b.id), &[b.mean.len()])?;
            b.var = fetch(&format!("{}.running_var", b.id), &[b.var.len()])?;
        }
    }
    if let Some(id) = records.keys().next() {
        return Err(Error::Parse { offset: end, message: format!("record `{id}` does not belong to the model") });
    }
    Ok((model, CheckpointHeader { version, spec, seed, step }))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &PartitionedModel, seed: u64, step: u64) -> Result<()> {
    fs::write(path, encode_checkpoint(model, seed, step))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PartitionedModel, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Parses the step rows of a metrics file written by [`RunMetrics::metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<RunMetrics> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty metrics file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n = cols.len().saturating_sub(4);
    if n == 0 || header != RunMetrics::metrics_header(n) {
        return Err(Error::Data(format!("unexpected metrics header `{header}`")));
    }
    let mut m = RunMetrics::new(n);
    for (no, line) in lines.enumerate() {
        let bad = || Error::Data(format!("metrics line {}: cannot parse `{line}`", no + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != n + 4 {
            return Err(bad());
        }
        let row = StepRow {
            step: f[0].parse().map_err(|_| bad())?,
            time_logical: f[1].parse().map_err(|_| bad())?,
            time_wall: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) },
            lr: f[3].parse().map_err(|_| bad())?,
            losses: f[4..].iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?,
        };
        if m.steps.last().is_some_and(|r| r.step >= row.step) {
            return Err(Error::Data(format!("metrics line {}: steps must increase", no + 2)));
        }
        m.steps.push(row);
    }
    Ok(m)
}

/// One line of the results table: a finished (or aborted) run.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub arch: String,
    pub strategy: String,
    pub mix_local: bool,
    pub components: usize,
    pub seed: u64,
    pub mode: String,
    pub steps: u64,
    pub time_logical: u64,
    /// Final head's loss averaged over the last tenth of the run.
    pub final_loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub head_train_acc: Vec<f64>,
    pub head_test_acc: Vec<f64>,
    pub ensemble_test_acc: Vec<f64>,
    pub staleness_mean: Vec<f64>,
    /// `ok`, or the failure message.
    pub status: String,
}

pub const RESULTS_HEADER: &str = "arch,strategy,mix_local,components,seed,mode,steps,time_logical,final_loss,\
train_acc,test_acc,head_train_acc,head_test_acc,ensemble_test_acc,staleness_mean,status";

fn semi(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultRow {
    pub fn from_outcome(out: &TrainOutcome, strategy: String, mix_local: bool, seed: u64, mode: &str) -> Self {
        let m = &out.metrics;
        let n = m.components;
        let window = (m.steps.len() / 10).max(1);
        let final_loss = if m.steps.is_empty() { f64::NAN } else { m.tail_loss(n, window) };
        let fin = m.final_eval.as_ref();
        let test = fin.and_then(|e| e.test.as_ref());
        ResultRow {
            arch: out.model.spec.preset.to_string(),
            strategy,
            mix_local,
            components: n,
            seed,
            mode: mode.to_string(),
            steps: out.steps,
            time_logical: m.steps.last().map_or(0, |r| r.time_logical),
            final_loss,
            train_acc: fin.map(|e| e.train.final_head()),
            test_acc: test.map(|t| t.final_head()),
            head_train_acc: fin.map(|e| e.train.per_head.clone()).unwrap_or_default(),
            head_test_acc: test.map(|t| t.per_head.clone()).unwrap_or_default(),
            ensemble_test_acc: test.map(|t| t.ensemble.clone()).unwrap_or_default(),
            staleness_mean: m.staleness.as_ref().map(|s| s.iter().map(|x| x.mean).collect()).unwrap_or_default(),
            status: match &out.failure {
                None => "ok".into(),
                Some(e) => format!("failed: {e}").replace([',', '\n', '\r'], " "),
            },
        }
    }

    pub fn to_csv_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.arch.replace(',', ";"),
            self.strategy.replace(',', ";"),
            self.mix_local,
            self.components,
            self.seed,
            self.mode,
            self.steps,
            self.time_logical,
            self.final_loss,
            opt(self.train_acc),
            opt(self.test_acc),
            semi(&self.head_train_acc),
            semi(&self.head_test_acc),
            semi(&self.ensemble_test_acc),
            semi(&self.staleness_mean),
            self.status
        )
        .unwrap();
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("cannot parse results line `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 16 {
            return Err(bad());
        }
        let floats = |s: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(';').map(|v| v.parse().map_err(|_| bad())).collect()
        };
        let optf = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        Ok(ResultRow {
            arch: f[0].replace(';', ","),
            strategy: f[1].replace(';', ","),
            mix_local: f[2].parse().map_err(|_| bad())?,
            components: f[3].parse().map_err(|_| bad())?,
            seed: f[4].parse().map_err(|_| bad())?,
            mode: f[5].to_string(),
            steps: f[6].parse().map_err(|_| bad())?,
            time_logical: f[7].parse().map_err(|_| bad())?,
            final_loss: f[8].parse().map_err(|_| bad())?,
            train_acc: optf(f[9])?,
            test_acc: optf(f[10])?,
            head_train_acc: floats(f[11])?,
            head_test_acc: floats(f[12])?,
            ensemble_test_acc: floats(f[13])?,
            staleness_mean: floats(f[14])?,
            status: f[15].to_string(),
        })
    }
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        other => return Err(Error::Data(format!("unexpected results header {other:?}"))),
    }
    lines.filter(|l| !l.is_empty()).map(ResultRow::parse_line).collect()
}

/// Appends rows to a results table, writing the header if the file is new.
pub fn append_results(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.to_csv_line())?;
    }
    Ok(())
}

/// Writes `metrics.csv`, `eval.csv` (only when periodic evaluations exist)
/// and the final checkpoint into `dir`. Returns the paths written.
pub fn write_run(dir: impl AsRef<Path>, out: &TrainOutcome, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let metrics = dir.join(METRICS_FILE);
    fs::write(&metrics, out.metrics.metrics_csv())?;
    written.push(metrics);
    if !out.metrics.evals.is_empty() {
        let eval = dir.join(EVAL_FILE);
        fs::write(&eval, out.metrics.eval_csv())?;
        written.push(eval);
    }
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &out.model, seed, out.steps)?;
    written.push(ckpt);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::net::{ArchitectureSpec, Preset};
    use crate::routing::{RoutingPolicy, Strategy};
    use crate::train::{train, LrSchedule, OptimizerKind, TrainConfig};

    fn conv_model() -> PartitionedModel {
        let mut spec = ArchitectureSpec::toy_conv(3, vec![2, 5, 5], 3);
        spec.preset = Preset::ToyConv { depth: 3, narrow: 2, wide: 3 };
        let mut m = build(&spec, 4).unwrap();
        m.components[0].buffers[0].mean[0] = 0.25;
        m.components[1].params[0].value.data_mut()[0] = -1.5;
        m
    }

    #[test]
    fn checkpoint_round_trips_params_and_buffers() {
        let m = conv_model();
        let bytes = encode_checkpoint(&m, 4, 17);
        let (back, header) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!((header.seed, header.step, header.version), (4, 17, CHECKPOINT_VERSION));
        assert_eq!(header.spec, m.spec);
    }

    #[test]
    fn corrupt_checkpoints_report_offsets() {
        let m = conv_model();
        let bytes = encode_checkpoint(&m, 4, 1);
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset > 20), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad).unwrap_err(), Error::Parse { offset: 0, .. }));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut wrong_version = bytes;
        wrong_version[8] = 9;
        assert!(matches!(decode_checkpoint(&wrong_version).unwrap_err(), Error::Parse { offset: 8, .. }));
    }

    fn outcome() -> TrainOutcome {
        let data = synth_blobs(3, 4, 5.0, 60, 20, 1).unwrap();
        let model = build(&ArchitectureSpec::mlp(vec![6, 6], 4, 3), 1).unwrap();
        let mut cfg = TrainConfig::new(
            RoutingPolicy::new(Strategy::NWise(1)),
            OptimizerKind::sgd(0.9, 0.0),
            LrSchedule::Constant(0.05),
            10,
            20,
        );
        cfg.eval_every = 10;
        train(model, &data, &cfg).unwrap()
    }

    #[test]
    fn metrics_file_reads_back() {
        let out = outcome();
        let text = out.metrics.metrics_csv();
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back.steps, out.metrics.steps);
        assert_eq!(back.metrics_csv(), text);
        assert!(parse_metrics_csv("step,lr\n").is_err());
        assert!(parse_metrics_csv(&format!("{}\n2,1,,0.1,1,1\n1,1,,0.1,1,1\n", RunMetrics::metrics_header(2))).is_err());
    }

    #[test]
    fn results_rows_read_back() {
        let out = outcome();
        let row = ResultRow::from_outcome(&out, "n_wise(1)".into(), false, 0, "reference");
        assert_eq!(row.status, "ok");
        assert_eq!(row.head_test_acc.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        append_results(&path, &[row.clone()]).unwrap();
        append_results(&path, &[row.clone()]).unwrap();
        let rows = parse_results_csv(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(rows, vec![row.clone(), row]);
    }

    #[test]
    fn run_directory_holds_metrics_eval_and_checkpoint() {
        let out = outcome();
        let dir = tempfile::tempdir().unwrap();
        let files = write_run(dir.path(), &out, 0).unwrap();
        assert_eq!(files.len(), 3);
        let (model, header) = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(model, out.model);
        assert_eq!(header.step, 20);
    }
}
