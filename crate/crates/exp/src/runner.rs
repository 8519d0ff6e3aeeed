//! Reference generation, initial training and transfer learning across seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pinnx_core::activations::Family;
use pinnx_core::metrics::{mean_std, standard_reports, tl_effect, tl_effect_from_errors, EvalRegion, TlEffectReport};
use pinnx_core::pde::{Equation, PdeProblem, PinnModel};
use pinnx_core::refsolver::{convergence_study, generate_reference, ConvergenceReport, GridSpec, IntegratorConfig, ReferenceGrid};
use pinnx_core::trainer::{frozen_entries_unchanged, select_high_loss_points, train_initial, transfer_train, TlMethod};

use crate::config::ExperimentConfig;
use crate::error::{ExpError, IoContext, Result};
use crate::rundir::*;

pub const WORKERS_ENV: &str = "PINNX_WORKERS";

/// Worker count from `PINNX_WORKERS`, else the available parallelism.
pub fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ExpError::Config(format!("{WORKERS_ENV} must be a positive integer, got '{s}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers()?)
        .build()
        .map_err(|e| ExpError::Config(format!("worker pool: {e}")))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).at(p)
}

/// Sidecar written next to a grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSidecar {
    pub equation: Equation,
    pub spec: GridSpec,
    pub mass_drift: f64,
    pub seconds: f64,
    /// Internal resolutions `nx/4, nx/2, nx` compared on the coarsest nodes.
    pub convergence: Option<ConvergenceReport>,
}

pub fn sidecar_path(grid_path: &Path) -> PathBuf {
    let mut s = grid_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn cmd_reference(equation: Equation, spec: &GridSpec, out: &Path, csv: bool, convergence: bool) -> Result<ReferenceSidecar> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let t0 = Instant::now();
    let grid = generate_reference(equation, spec)?;
    let seconds = t0.elapsed().as_secs_f64();
    grid.check()?;
    let f = fs::File::create(out).at(out)?;
    grid.write(std::io::BufWriter::new(f))?;
    if csv {
        let p = out.with_extension("csv");
        grid.write_csv(std::io::BufWriter::new(fs::File::create(&p).at(&p)?))?;
    }
    let convergence = if convergence {
        let cfg = IntegratorConfig { rtol: spec.rtol, atol: spec.atol, ..IntegratorConfig::default() };
        Some(convergence_study(equation, spec.nx_internal / 4, 1.0, &cfg)?)
    } else {
        None
    };
    let sidecar = ReferenceSidecar { equation, spec: *spec, mass_drift: grid.mass_drift(), seconds, convergence };
    write_json(&sidecar, &sidecar_path(out))?;
    Ok(sidecar)
}

pub fn read_reference(path: &Path) -> Result<ReferenceGrid> {
    let f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ExpError::Config(format!("reference grid {} not found; run `pinnx reference` first", path.display()))
        } else {
            ExpError::io(path, e)
        }
    })?;
    let grid = ReferenceGrid::read(std::io::BufReader::new(f))?;
    grid.check()?;
    Ok(grid)
}

/// Reads the configured grid and checks it belongs to this experiment.
pub fn load_reference(cfg: &ExperimentConfig) -> Result<ReferenceGrid> {
    let path = cfg.reference_path();
    let grid = read_reference(&path)?;
    if grid.equation != cfg.equation {
        return Err(ExpError::Config(format!("{} holds {}, config asks for {}", path.display(), grid.equation, cfg.equation)));
    }
    if grid.nx() != cfg.grid.nx || grid.nt() != cfg.grid.nt {
        return Err(ExpError::Config(format!(
            "{} is {}x{}, config expects {}x{}",
            path.display(),
            grid.nt(),
            grid.nx(),
            cfg.grid.nt,
            cfg.grid.nx
        )));
    }
    Ok(grid)
}

/// Loads the configured grid, generating it first when the file is missing.
pub fn ensure_reference(cfg: &ExperimentConfig) -> Result<ReferenceGrid> {
    let path = cfg.reference_path();
    if !path.exists() {
        cmd_reference(cfg.equation, &cfg.grid, &path, false, false)?;
    }
    load_reference(cfg)
}

/// True when two configs describe the same initial training.
fn same_initial(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut b = b.clone();
    b.seeds = a.seeds;
    b.seed_base = a.seed_base;
    b.output = a.output.clone();
    b.reference = a.reference.clone();
    b.transfer = a.transfer;
    *a == b
}

pub fn train_seed(cfg: &ExperimentConfig, grid: &ReferenceGrid, seed: u64) -> Result<SeedReport> {
    let paths = SeedPaths::new(seed_dir(&cfg.run_dir(), seed));
    mkdir(&paths.dir)?;
    write_snapshot(cfg, seed, &paths.config())?;
    let arch = cfg.architecture()?;
    let problem = PdeProblem::new(cfg.equation);
    let t0 = Instant::now();
    let out = train_initial(&problem, &arch, grid, &cfg.split, &cfg.initial, seed)?;
    let seconds = t0.elapsed().as_secs_f64();
    let reports = standard_reports(&out.model, grid)?;
    save_model(&out.model, &paths.model_initial())?;
    write_trace(&out.trace, &paths.trace_initial())?;
    let report = SeedReport {
        run_id: cfg.name.clone(),
        seed,
        equation: cfg.equation,
        activation: arch.final_activation().label(),
        initial: InitialSummary {
            reports,
            best_iteration: out.best_iteration,
            best_val_l2: out.best_val_l2,
            stop: out.stop,
            iterations: out.trace.last().map_or(0, |r| r.iteration),
            seconds,
        },
        transfer: Vec::new(),
    };
    write_json(&report, &paths.report())?;
    write_metrics(&report.metric_rows(), &paths.metrics())?;
    Ok(report)
}

/// A finished seed whose snapshot matches `cfg` can be reused.
fn reusable(cfg: &ExperimentConfig, seed: u64) -> Option<SeedReport> {
    let paths = SeedPaths::new(seed_dir(&cfg.run_dir(), seed));
    let (snap, s) = read_snapshot(&paths.config()).ok()?;
    if s != seed || !same_initial(cfg, &snap) || !paths.model_initial().exists() {
        return None;
    }
    read_json(&paths.report()).ok()
}

/// Initial training for every seed. With `resume`, seeds already trained
/// under the same config are kept.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let grid = load_reference(cfg)?;
    let run_dir = cfg.run_dir();
    mkdir(&run_dir)?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).at(&cfg_path)?;
    let results: Vec<Result<SeedReport>> = pool()?.install(|| {
        cfg.seed_list()
            .into_par_iter()
            .map(|seed| match resume.then(|| reusable(cfg, seed)).flatten() {
                Some(r) => Ok(r),
                None => train_seed(cfg, &grid, seed),
            })
            .collect()
    });
    for r in results {
        r?;
    }
    finish_run(&run_dir)
}

pub fn transfer_seed(cfg: &ExperimentConfig, grid: &ReferenceGrid, dir: &Path, methods: &[TlMethod], resume: bool) -> Result<SeedReport> {
    let paths = SeedPaths::new(dir.to_path_buf());
    let (snap, seed) = read_snapshot(&paths.config())?;
    if !same_initial(cfg, &snap) {
        return Err(ExpError::Config(format!("{} was trained with a different configuration", dir.display())));
    }
    if resume && snap.transfer == cfg.transfer {
        if let Ok(done) = read_json::<SeedReport>(&paths.report()) {
            if methods.iter().all(|&m| done.transfer(m).is_some() && paths.model_transfer(m).exists()) {
                return Ok(done);
            }
        }
    }
    let model = load_model(&paths.model_initial())?;
    if model.arch != cfg.architecture()? || model.problem.equation != cfg.equation {
        return Err(ExpError::Config(format!("{}: checkpoint does not match the config", dir.display())));
    }
    let mut report: SeedReport = read_json(&paths.report())?;

    let t0 = Instant::now();
    let tl = &cfg.transfer;
    let sel = select_high_loss_points(&model, tl.pool_size, tl.k, tl.val_fraction, &cfg.split, seed)?;
    let select_seconds = t0.elapsed().as_secs_f64();
    let selected: Vec<SelectedPoint> = sel
        .points
        .points
        .iter()
        .zip(&sel.residual_sq)
        .map(|(&(t, x), &r)| SelectedPoint { t, x, residual_sq: r })
        .collect();
    write_selected(&selected, &paths.selected())?;

    let mask = model.params.mask_final_layer();
    let mut broken = Vec::new();
    for &m in methods {
        let t1 = Instant::now();
        let out = transfer_train(&model, &sel.points, &cfg.transfer_for(m), &cfg.split, seed)?;
        let seconds = select_seconds + t1.elapsed().as_secs_f64();
        let freeze_ok = frozen_entries_unchanged(&model.params, &out.model.params, &mask);
        if !freeze_ok {
            broken.push(m.name());
        }
        save_model(&out.model, &paths.model_transfer(m))?;
        write_trace(&out.trace, &paths.trace_transfer(m))?;
        let summary = TransferSummary {
            method: m,
            reports: standard_reports(&out.model, grid)?,
            effect: tl_effect(&model, &out.model, grid)?,
            freeze_ok,
            aborted: out.aborted,
            final_loss: out.trace.last().map_or(f64::NAN, |r| r.loss),
            seconds,
        };
        report.transfer.retain(|t| t.method != m);
        report.transfer.push(summary);
    }
    report.transfer.sort_by_key(|t| TlMethod::ALL.iter().position(|&m| m == t.method));
    write_snapshot(cfg, seed, &paths.config())?;
    write_json(&report, &paths.report())?;
    write_metrics(&report.metric_rows(), &paths.metrics())?;
    if !broken.is_empty() {
        return Err(ExpError::Invariant(format!("{}: frozen parameters changed under {}", dir.display(), broken.join(", "))));
    }
    Ok(report)
}

/// Transfer learning on every trained seed under `run_dir`. With `resume`,
/// seeds that already hold results for `methods` under the same transfer
/// settings are kept.
pub fn cmd_transfer(cfg: &ExperimentConfig, run_dir: &Path, methods: &[TlMethod], resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(ExpError::Config("no transfer method given".into()));
    }
    let grid = load_reference(cfg)?;
    let dirs = list_seed_dirs(run_dir)?;
    if dirs.is_empty() {
        return Err(ExpError::Config(format!("{} holds no trained seeds", run_dir.display())));
    }
    let results: Vec<Result<SeedReport>> =
        pool()?.install(|| dirs.par_iter().map(|d| transfer_seed(cfg, &grid, d, methods, resume)).collect());
    let mut first_err = None;
    for r in results {
        if let Err(e) = r {
            first_err.get_or_insert(e);
        }
    }
    let summary = finish_run(run_dir)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let (mean, std) = mean_std(xs);
        Stat { mean, std, n: xs.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: EvalRegion,
    pub l2: Stat,
    pub mae: Stat,
}

fn region_stats<'a>(reports: impl Iterator<Item = &'a [pinnx_core::metrics::RegionReport]> + Clone) -> Vec<RegionStats> {
    EvalRegion::REPORTED
        .iter()
        .filter_map(|&region| {
            let pick = |f: fn(&pinnx_core::metrics::RegionReport) -> f64| -> Vec<f64> {
                reports.clone().filter_map(|rs| rs.iter().find(|r| r.region == region).map(f)).collect()
            };
            let l2 = pick(|r| r.rel_l2);
            (!l2.is_empty()).then(|| RegionStats { region, l2: Stat::of(&l2), mae: Stat::of(&pick(|r| r.rel_mae)) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: TlMethod,
    pub seeds: usize,
    pub regions: Vec<RegionStats>,
    /// Percentages computed per seed, then averaged.
    pub effect_per_seed: TlEffectReport,
    /// Percentages of the seed-averaged errors.
    pub effect_of_means: TlEffectReport,
    pub freeze_ok: bool,
    pub aborted: usize,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub equation: Equation,
    pub family: Family,
    pub activation: String,
    pub primary_method: TlMethod,
    pub seeds: Vec<u64>,
    pub initial: Vec<RegionStats>,
    pub mean_initial_seconds: f64,
    pub transfer: Vec<MethodStats>,
}

impl RunSummary {
    pub fn initial_region(&self, region: EvalRegion) -> Option<&RegionStats> {
        self.initial.iter().find(|r| r.region == region)
    }

    pub fn method(&self, m: TlMethod) -> Option<&MethodStats> {
        self.transfer.iter().find(|t| t.method == m)
    }

    pub fn transfer_region(&self, m: TlMethod, region: EvalRegion) -> Option<&RegionStats> {
        self.method(m)?.regions.iter().find(|r| r.region == region)
    }
}

fn mean_effect(effects: &[TlEffectReport]) -> TlEffectReport {
    let m = |f: &dyn Fn(&TlEffectReport) -> f64| Stat::of(&effects.iter().map(f).collect::<Vec<_>>()).mean;
    let pair = |f: &dyn Fn(&TlEffectReport) -> (f64, f64)| (m(&|e| f(e).0), m(&|e| f(e).1));
    TlEffectReport {
        forgetting_l2_pct: m(&|e| e.forgetting_l2_pct),
        forgetting_mae_pct: m(&|e| e.forgetting_mae_pct),
        reduction_l2_pct: m(&|e| e.reduction_l2_pct),
        reduction_mae_pct: m(&|e| e.reduction_mae_pct),
        seen_before: pair(&|e| e.seen_before),
        seen_after: pair(&|e| e.seen_after),
        extrap_before: pair(&|e| e.extrap_before),
        extrap_after: pair(&|e| e.extrap_after),
    }
}

/// Aggregates the seed reports under `run_dir`.
pub fn summarize(run_dir: &Path) -> Result<RunSummary> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let mut reports = Vec::new();
    for d in list_seed_dirs(run_dir)? {
        let p = SeedPaths::new(d).report();
        if p.exists() {
            reports.push(read_json::<SeedReport>(&p)?);
        }
    }
    if reports.is_empty() {
        return Err(ExpError::Config(format!("{} holds no seed reports", run_dir.display())));
    }
    reports.sort_by_key(|r| r.seed);
    let initial = region_stats(reports.iter().map(|r| r.initial.reports.as_slice()));
    let transfer = TlMethod::ALL
        .iter()
        .filter_map(|&m| {
            let ts: Vec<&TransferSummary> = reports.iter().filter_map(|r| r.transfer(m)).collect();
            if ts.is_empty() {
                return None;
            }
            let effects: Vec<TlEffectReport> = ts.iter().map(|t| t.effect).collect();
            let avg = mean_effect(&effects);
            Some(MethodStats {
                method: m,
                seeds: ts.len(),
                regions: region_stats(ts.iter().map(|t| t.reports.as_slice())),
                effect_per_seed: avg,
                effect_of_means: tl_effect_from_errors(avg.seen_before, avg.seen_after, avg.extrap_before, avg.extrap_after),
                freeze_ok: ts.iter().all(|t| t.freeze_ok),
                aborted: ts.iter().filter(|t| t.aborted.is_some()).count(),
                mean_seconds: Stat::of(&ts.iter().map(|t| t.seconds).collect::<Vec<_>>()).mean,
            })
        })
        .collect();
    Ok(RunSummary {
        run_id: cfg.name.clone(),
        equation: cfg.equation,
        family: cfg.activation.family,
        activation: cfg.activation.kind().label(),
        primary_method: cfg.transfer.method,
        seeds: reports.iter().map(|r| r.seed).collect(),
        initial,
        mean_initial_seconds: Stat::of(&reports.iter().map(|r| r.initial.seconds).collect::<Vec<_>>()).mean,
        transfer,
    })
}

/// Writes `summary.json` and the run-level `metrics.csv`.
pub fn finish_run(run_dir: &Path) -> Result<RunSummary> {
    let summary = summarize(run_dir)?;
    write_json(&summary, &run_dir.join("summary.json"))?;
    let mut rows = Vec::new();
    for d in list_seed_dirs(run_dir)? {
        let p = SeedPaths::new(d).report();
        if p.exists() {
            rows.extend(read_json::<SeedReport>(&p)?.metric_rows());
        }
    }
    write_metrics(&rows, &run_dir.join("metrics.csv"))?;
    Ok(summary)
}

/// Re-runs one seed from its persisted snapshot into `scratch` and returns
/// the metric rows of the original and the replay.
pub fn replay_seed(seed_dir: &Path, scratch: &Path, methods: &[TlMethod]) -> Result<(Vec<MetricRow>, Vec<MetricRow>)> {
    let original: SeedReport = read_json(&SeedPaths::new(seed_dir.to_path_buf()).report())?;
    let (mut cfg, seed) = read_snapshot(&SeedPaths::new(seed_dir.to_path_buf()).config())?;
    cfg.reference = Some(cfg.reference_path());
    let grid = load_reference(&cfg)?;
    cfg.output = scratch.to_path_buf();
    let replay = train_seed(&cfg, &grid, seed)?;
    let replay = if methods.is_empty() {
        replay
    } else {
        transfer_seed(&cfg, &grid, &seed_dir_of(&cfg, seed), methods, false)?
    };
    let keep = |r: &SeedReport| {
        let mut r = r.clone();
        r.transfer.retain(|t| methods.contains(&t.method));
        r.metric_rows()
    };
    Ok((keep(&original), replay.metric_rows()))
}

fn seed_dir_of(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(&cfg.run_dir(), seed)
}

/// Model of one seed: the initial checkpoint, or the one after `method`.
pub fn seed_model(seed_dir: &Path, method: Option<TlMethod>) -> Result<PinnModel> {
    let paths = SeedPaths::new(seed_dir.to_path_buf());
    load_model(&match method {
        None => paths.model_initial(),
        Some(m) => paths.model_transfer(m),
    })
}
