//! On-disk layout of a run: one directory per seed holding the config
//! snapshot, checkpoints, traces, selected points and the JSON report.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use pinnx_core::metrics::{RegionReport, TlEffectReport};
use pinnx_core::network::{Architecture, ParamVector};
use pinnx_core::optim::{StopReason, TraceRow};
use pinnx_core::pde::{Equation, PdeProblem, PinnModel};
use pinnx_core::trainer::TlMethod;

use crate::config::ExperimentConfig;
use crate::error::{ExpError, IoContext, Result};

pub const MODEL_MAGIC: &str = "PINNX-MODEL v1";

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed:03}"))
}

pub struct SeedPaths {
    pub dir: PathBuf,
}

impl SeedPaths {
    pub fn new(dir: PathBuf) -> Self {
        SeedPaths { dir }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn model_initial(&self) -> PathBuf {
        self.dir.join("model_initial.pinnx")
    }
    pub fn trace_initial(&self) -> PathBuf {
        self.dir.join("trace_initial.csv")
    }
    pub fn selected(&self) -> PathBuf {
        self.dir.join("selected.csv")
    }
    pub fn model_transfer(&self, m: TlMethod) -> PathBuf {
        self.dir.join(format!("model_transfer_{}.pinnx", m.name()))
    }
    pub fn trace_transfer(&self, m: TlMethod) -> PathBuf {
        self.dir.join(format!("trace_transfer_{}.csv", m.name()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    equation: Equation,
    arch: Architecture,
    len: usize,
}

/// Text header line, a JSON line with the equation and architecture, then
/// the parameter values as little-endian f64.
pub fn write_model<W: Write>(model: &PinnModel, mut w: W) -> std::io::Result<()> {
    let header = ModelHeader { equation: model.problem.equation, arch: model.arch.clone(), len: model.params.len() };
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for v in &model.params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_model<R: Read>(r: R) -> Result<PinnModel> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| ExpError::Config(e.to_string()))?;
    if line.trim_end() != MODEL_MAGIC {
        return Err(ExpError::Config(format!("not a model file (header '{}')", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| ExpError::Config(e.to_string()))?;
    let header: ModelHeader = serde_json::from_str(&line).map_err(|e| ExpError::Config(format!("model header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| ExpError::Config(e.to_string()))?;
    if payload.len() != 8 * header.len {
        return Err(ExpError::Config(format!("model payload has {} bytes, expected {}", payload.len(), 8 * header.len)));
    }
    let mut params = ParamVector::zeros(&header.arch);
    if params.len() != header.len {
        return Err(ExpError::Config("model length does not match its architecture".into()));
    }
    for (v, c) in params.values.iter_mut().zip(payload.chunks_exact(8)) {
        *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
    }
    Ok(PinnModel::new(PdeProblem::new(header.equation), header.arch, params)?)
}

pub fn save_model(model: &PinnModel, path: &Path) -> Result<()> {
    let f = fs::File::create(path).at(path)?;
    write_model(model, std::io::BufWriter::new(f)).at(path)
}

pub fn load_model(path: &Path) -> Result<PinnModel> {
    let f = fs::File::open(path).at(path)?;
    read_model(f).map_err(|e| match e {
        ExpError::Config(m) => ExpError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceCsvRow {
    iteration: usize,
    loss: f64,
    grad_norm: f64,
    val_l2: Option<f64>,
    note: Option<String>,
}

pub fn write_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in trace {
        w.serialize(TraceCsvRow {
            iteration: r.iteration,
            loss: r.loss,
            grad_norm: r.grad_norm,
            val_l2: r.val_l2,
            note: r.note.clone(),
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<TraceCsvRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_err(path, e))?;
            Ok(TraceRow { iteration: row.iteration, loss: row.loss, grad_norm: row.grad_norm, val_l2: row.val_l2, note: row.note })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedPoint {
    pub t: f64,
    pub x: f64,
    pub residual_sq: f64,
}

pub fn write_selected(points: &[SelectedPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_selected(path: &Path) -> Result<Vec<SelectedPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub equation: String,
    pub activation: String,
    /// `none` before transfer learning.
    pub tl_method: String,
    pub region: String,
    pub l2: f64,
    pub mae: f64,
}

pub fn write_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> ExpError {
    ExpError::Config(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialSummary {
    pub reports: Vec<RegionReport>,
    pub best_iteration: Option<usize>,
    pub best_val_l2: f64,
    pub stop: StopReason,
    pub iterations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub method: TlMethod,
    pub reports: Vec<RegionReport>,
    pub effect: TlEffectReport,
    /// Frozen entries bit-identical to the initial model.
    pub freeze_ok: bool,
    pub aborted: Option<String>,
    pub final_loss: f64,
    /// Selection plus retraining.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub run_id: String,
    pub seed: u64,
    pub equation: Equation,
    pub activation: String,
    pub initial: InitialSummary,
    #[serde(default)]
    pub transfer: Vec<TransferSummary>,
}

impl SeedReport {
    pub fn transfer(&self, m: TlMethod) -> Option<&TransferSummary> {
        self.transfer.iter().find(|t| t.method == m)
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let row = |method: &str, r: &RegionReport| MetricRow {
            run_id: self.run_id.clone(),
            seed: self.seed,
            equation: self.equation.id().to_string(),
            activation: self.activation.clone(),
            tl_method: method.to_string(),
            region: r.region.name().to_string(),
            l2: r.rel_l2,
            mae: r.rel_mae,
        };
        let mut rows: Vec<MetricRow> = self.initial.reports.iter().map(|r| row("none", r)).collect();
        for t in &self.transfer {
            rows.extend(t.reports.iter().map(|r| row(t.method.name(), r)));
        }
        rows
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| ExpError::Config(format!("{}: {e}", path.display())))
}

/// Config snapshot of a single seed: the resolved config plus `seed`.
pub fn write_snapshot(cfg: &ExperimentConfig, seed: u64, path: &Path) -> Result<()> {
    let mut table = toml::Table::try_from(cfg).expect("config serializes");
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    fs::write(path, toml::to_string(&table).expect("table serializes")).at(path)
}

pub fn read_snapshot(path: &Path) -> Result<(ExperimentConfig, u64)> {
    let text = fs::read_to_string(path).at(path)?;
    let mut table: toml::Table = text.parse().map_err(|e| ExpError::Config(format!("{}: {e}", path.display())))?;
    let seed = match table.remove("seed") {
        Some(toml::Value::Integer(s)) if s >= 0 => s as u64,
        _ => return Err(ExpError::Config(format!("{}: missing seed", path.display()))),
    };
    Ok((ExperimentConfig::from_table(table)?, seed))
}

/// Seed directories under a run directory, sorted.
pub fn list_seed_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(run_dir)
        .at(run_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pinnx_core::activations::ActivationKind;
    use pinnx_core::network::init_xavier;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let arch = Architecture::new(2, 5, ActivationKind::new(pinnx_core::activations::Family::LcTanh, 2)).unwrap();
        let params = init_xavier(&arch, 3).unwrap();
        let model = PinnModel::new(PdeProblem::new(Equation::Kdv), arch, params).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        buf.pop();
        assert!(read_model(buf.as_slice()).is_err());
    }
}
