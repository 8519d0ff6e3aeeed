//! Wall-clock training times for tanh and lctanh, with and without transfer
//! learning.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use pinnx_core::activations::Family;
use pinnx_core::pde::PdeProblem;
use pinnx_core::trainer::{select_high_loss_points, train_initial, transfer_train};

use crate::config::{default_terms, ExperimentConfig};
use crate::error::{IoContext, Result};
use crate::rundir::write_json;
use crate::runner::{ensure_reference, workers};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub hardware: String,
    pub profile: String,
    pub seed: u64,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn minutes(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.minutes)
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("Hardware: {}\nProfile: {}, seed {}\n\n| Method | Training time (min) |\n|---|---|\n", self.hardware, self.profile, self.seed);
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {:.2} |", r.method, r.minutes);
        }
        s
    }
}

/// CPU model, logical cores, OS and worker count.
pub fn hardware_descriptor() -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = workers().unwrap_or(1);
    format!("{cpu}; {cores} logical cores; {}-{}; {workers} workers", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times one seed of `cfg` with a tanh and an lctanh final layer. The TL rows
/// add point selection and retraining to the initial time.
pub fn cmd_timing(cfg: &ExperimentConfig, out: &Path) -> Result<TimingReport> {
    let grid = ensure_reference(cfg)?;
    let seed = cfg.seed_base;
    let mut base = Vec::new();
    let mut with = Vec::new();
    for family in [Family::Tanh, Family::LcTanh] {
        let mut c = cfg.clone();
        c.activation.family = family;
        c.activation.n = default_terms(family, cfg.equation);
        c.activation.candidates.clear();
        c.validate()?;
        let arch = c.architecture()?;
        let problem = PdeProblem::new(c.equation);
        let t0 = Instant::now();
        let trained = train_initial(&problem, &arch, &grid, &c.split, &c.initial, seed)?;
        let initial = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let tl = &c.transfer;
        let sel = select_high_loss_points(&trained.model, tl.pool_size, tl.k, tl.val_fraction, &c.split, seed)?;
        transfer_train(&trained.model, &sel.points, tl, &c.split, seed)?;
        let transfer = t1.elapsed().as_secs_f64();
        let name = family.name();
        base.push(TimingRow { method: format!("{name} w/o TL"), minutes: initial / 60.0 });
        with.push(TimingRow { method: format!("{name} w/ TL"), minutes: (initial + transfer) / 60.0 });
    }
    base.extend(with);
    let report = TimingReport { hardware: hardware_descriptor(), profile: cfg.profile.name().into(), seed, rows: base };
    fs::create_dir_all(out).at(out)?;
    write_json(&report, &out.join("timing.json"))?;
    let p = out.join("timing.md");
    fs::write(&p, report.markdown()).at(&p)?;
    Ok(report)
}
