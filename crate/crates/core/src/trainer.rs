//! Initial training with validation-driven early stopping, residual-based
//! point selection, and final-layer transfer learning with optional L2 or
//! EWC regularization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_gradient, Objective};
use crate::error::{Error, Result};
use crate::metrics::{region_points, region_values, relative_errors, EvalRegion};
use crate::network::{init_xavier, Architecture, ParamVector};
use crate::optim::{
    adam_step_params, lbfgs_minimize_params, AdamConfig, AdamState, Control, Decision, EarlyStopState, LbfgsConfig,
    StopReason, TraceRow,
};
use crate::pde::{sample_in, CollocationSet, Equation, PdeLoss, PdeProblem, PinnModel, Region};
use crate::refsolver::ReferenceGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub t_train: f64,
    pub t_val: f64,
    pub t_test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { t_train: 0.5, t_val: 0.8, t_test: 1.0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.t_train && self.t_train < self.t_val && self.t_val < self.t_test {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("split times must increase, got {self:?}")))
        }
    }
}

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Collocation = 1,
    Boundary = 2,
    Pool = 3,
    Fisher = 4,
    TransferBoundary = 5,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConfig {
    pub collocation_points: usize,
    /// KdV periodicity times per run.
    pub boundary_points: usize,
    pub lbfgs: LbfgsConfig,
    pub check_every: usize,
    pub patience: usize,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig {
            collocation_points: 8000,
            boundary_points: 200,
            lbfgs: LbfgsConfig::default(),
            check_every: 10,
            patience: 15,
        }
    }
}

impl InitialConfig {
    pub fn validate(&self) -> Result<()> {
        self.lbfgs.validate()?;
        if self.collocation_points == 0 {
            return Err(Error::EmptyCollocation);
        }
        if self.check_every == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig("early stopping needs check_every and patience >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PinnModel,
    pub trace: Vec<TraceRow>,
    pub best_iteration: Option<usize>,
    pub best_val_l2: f64,
    pub stop: StopReason,
}

/// Relative L2 of a model on the validation rows of the reference grid.
pub struct Validator<'a> {
    points: Vec<(f64, f64)>,
    reference: &'a [f64],
}

impl<'a> Validator<'a> {
    pub fn new(grid: &'a ReferenceGrid) -> Self {
        Validator { points: region_points(grid, EvalRegion::Validation), reference: region_values(grid, EvalRegion::Validation) }
    }

    pub fn rel_l2(&self, problem: &PdeProblem, arch: &Architecture, params: &ParamVector) -> Result<f64> {
        let model = PinnModel { problem: *problem, arch: arch.clone(), params: params.clone() };
        relative_errors(&model.predict(&self.points)?, self.reference).map(|e| e.0)
    }
}

/// L-BFGS on uniform collocation points in `[0, t_train]`, early-stopped on
/// the validation error; the best checked iterate is returned.
pub fn train_initial(
    problem: &PdeProblem,
    arch: &Architecture,
    grid: &ReferenceGrid,
    split: &SplitSpec,
    cfg: &InitialConfig,
    seed: u64,
) -> Result<TrainOutput> {
    split.validate()?;
    cfg.validate()?;
    if grid.equation != problem.equation {
        return Err(Error::Contract(format!("reference grid is for {}, problem is {}", grid.equation, problem.equation)));
    }
    let params = init_xavier(arch, seed)?;
    let colloc = CollocationSet::uniform(&mut rng_for(seed, Stream::Collocation), cfg.collocation_points, 0.0, split.t_train, Region::Train);
    let boundary: Option<Vec<f64>> = problem.needs_boundary_loss().then(|| {
        let mut rng = rng_for(seed, Stream::Boundary);
        (0..cfg.boundary_points).map(|_| sample_in(&mut rng, 0.0, split.t_train, false)).collect()
    });
    let loss = PdeLoss::new(problem, arch, &colloc, boundary.as_deref())?;
    let validator = Validator::new(grid);
    let mut early = EarlyStopState::new(cfg.patience, cfg.check_every);
    let mut failure: Option<Error> = None;

    let result = lbfgs_minimize_params(&loss, &params, &cfg.lbfgs, |p, row| {
        if !early.is_check(row.iteration) {
            return Control::Continue;
        }
        match validator.rel_l2(problem, arch, p) {
            Ok(v) => {
                row.val_l2 = Some(v);
                match early.update(row.iteration, v, p) {
                    Decision::Continue => Control::Continue,
                    Decision::Stop => Control::Stop,
                }
            }
            Err(e) => {
                failure = Some(e);
                Control::Stop
            }
        }
    });
    let (last, outcome) = match result {
        Ok(r) => r,
        Err(Error::NonFinite(detail)) => return Err(Error::Diverged { iteration: 0, detail }),
        Err(e) => return Err(e),
    };
    if let Some(e) = failure {
        let iteration = outcome.trace.last().map_or(0, |r| r.iteration);
        return Err(Error::Diverged { iteration, detail: e.to_string() });
    }
    let mut trace = outcome.trace;
    // the final iterate competes with the checked ones
    if let Some(row) = trace.last_mut() {
        if row.val_l2.is_none() {
            let v = validator.rel_l2(problem, arch, &last)?;
            row.val_l2 = Some(v);
            early.update(row.iteration, v, &last);
        }
    }
    let best = early.best_params.clone().unwrap_or(last);
    Ok(TrainOutput {
        model: PinnModel::new(*problem, arch.clone(), best)?,
        trace,
        best_iteration: early.best_epoch,
        best_val_l2: early.best_val,
        stop: outcome.stop,
    })
}

/// Indices of the `k` largest values, largest first, ties to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub points: CollocationSet,
    /// Squared residual of each selected point.
    pub residual_sq: Vec<f64>,
}

/// Samples a pool of `pool_size` points, a fraction `val_fraction` of them in
/// `(t_train, t_val]` and the rest in `[0, t_train]`, and keeps the `k` with
/// the largest squared residual.
pub fn select_high_loss_points(
    model: &PinnModel,
    pool_size: usize,
    k: usize,
    val_fraction: f64,
    split: &SplitSpec,
    seed: u64,
) -> Result<Selection> {
    if k > pool_size {
        return Err(Error::InvalidConfig(format!("cannot select {k} points from a pool of {pool_size}")));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidConfig(format!("validation fraction {val_fraction} outside [0, 1]")));
    }
    let mut rng = rng_for(seed, Stream::Pool);
    let n_val = (pool_size as f64 * val_fraction).round() as usize;
    let mut pool = CollocationSet::uniform(&mut rng, n_val, split.t_train, split.t_val, Region::Validation).points;
    pool.extend(CollocationSet::uniform(&mut rng, pool_size - n_val, 0.0, split.t_train, Region::Train).points);
    let residual_sq: Vec<f64> = model.residuals(&pool)?.into_iter().map(|r| r * r).collect();
    let chosen = top_k_indices(&residual_sq, k);
    let region = if n_val == pool_size { Region::Validation } else if n_val == 0 { Region::Train } else { Region::Mixed };
    Ok(Selection {
        points: CollocationSet { points: chosen.iter().map(|&i| pool[i]).collect(), region },
        residual_sq: chosen.iter().map(|&i| residual_sq[i]).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TlMethod {
    Vanilla,
    L2,
    Ewc,
}

impl TlMethod {
    pub const ALL: [TlMethod; 3] = [TlMethod::Vanilla, TlMethod::L2, TlMethod::Ewc];

    pub fn name(self) -> &'static str {
        match self {
            TlMethod::Vanilla => "vanilla",
            TlMethod::L2 => "l2",
            TlMethod::Ewc => "ewc",
        }
    }

    pub fn from_name(s: &str) -> Option<TlMethod> {
        TlMethod::ALL.into_iter().find(|m| m.name() == s.to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Mode {
    /// `lambda * sum theta^2`
    Magnitude,
    /// `lambda * sum (theta - theta*)^2`
    Deviation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TlConfig {
    pub method: TlMethod,
    pub epochs: usize,
    pub lr: f64,
    pub k: usize,
    pub pool_size: usize,
    /// Share of the pool drawn from the validation interval.
    pub val_fraction: f64,
    pub lambda_l2: f64,
    pub lambda_ewc: f64,
    pub l2_mode: L2Mode,
    pub boundary_points: usize,
    pub fisher_points: usize,
}

impl Default for TlConfig {
    fn default() -> Self {
        TlConfig {
            method: TlMethod::L2,
            epochs: 150,
            lr: 5e-3,
            k: 80,
            pool_size: 4000,
            val_fraction: 1.0,
            lambda_l2: 0.01,
            lambda_ewc: 0.001,
            l2_mode: L2Mode::Magnitude,
            boundary_points: 200,
            fisher_points: 1000,
        }
    }
}

impl TlConfig {
    pub fn for_equation(equation: Equation, method: TlMethod) -> Self {
        let lr = match equation {
            Equation::AllenCahn => 5e-3,
            Equation::Kdv | Equation::Burgers => 5e-2,
        };
        TlConfig { method, lr, ..TlConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.pool_size {
            return Err(Error::InvalidConfig(format!("need 1 <= k <= pool size, got k = {}, pool = {}", self.k, self.pool_size)));
        }
        if self.lambda_l2 < 0.0 || self.lambda_ewc < 0.0 {
            return Err(Error::InvalidConfig("regularization weights must be nonnegative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Diagonal Fisher estimate over the trainable entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    pub values: Vec<f64>,
}

/// Mean over `old_points` of the squared per-point gradient of `r^2`,
/// restricted to the trainable entries of `model.params`.
pub fn fisher_diag(model: &PinnModel, old_points: &CollocationSet) -> Result<FisherDiag> {
    if old_points.is_empty() {
        return Err(Error::EmptyCollocation);
    }
    let idx = model.params.trainable_indices();
    let mut acc = vec![0.0; idx.len()];
    let mut full = vec![0.0; model.params.len()];
    for &p in &old_points.points {
        let single = CollocationSet { points: vec![p], region: old_points.region };
        let loss = PdeLoss::new(&model.problem, &model.arch, &single, Some(&[]))?;
        loss.evaluate(&model.params, Some(&mut full))?;
        for (a, &i) in acc.iter_mut().zip(&idx) {
            *a += full[i] * full[i];
        }
    }
    let n = old_points.len() as f64;
    Ok(FisherDiag { values: acc.into_iter().map(|a| a / n).collect() })
}

/// `L_new` plus the method's penalty on the trainable entries.
pub struct TransferLoss<'a> {
    pub base: &'a dyn Objective,
    pub method: TlMethod,
    pub cfg: TlConfig,
    /// Pre-transfer parameter values (full length).
    pub anchor: &'a [f64],
    /// Fisher values scattered to full length.
    pub fisher: Option<Vec<f64>>,
}

impl Objective for TransferLoss<'_> {
    fn evaluate(&self, params: &ParamVector, mut grad: Option<&mut [f64]>) -> Result<f64> {
        let mut loss = self.base.evaluate(params, grad.as_deref_mut())?;
        let train = params.trainable_indices();
        match self.method {
            TlMethod::Vanilla => {}
            TlMethod::L2 if self.cfg.lambda_l2 == 0.0 => {}
            TlMethod::L2 => {
                let lam = self.cfg.lambda_l2;
                let mut pen = 0.0;
                for &i in &train {
                    let d = match self.cfg.l2_mode {
                        L2Mode::Magnitude => params.values[i],
                        L2Mode::Deviation => params.values[i] - self.anchor[i],
                    };
                    pen += d * d;
                    if let Some(g) = grad.as_deref_mut() {
                        g[i] += 2.0 * lam * d;
                    }
                }
                loss += lam * pen;
            }
            TlMethod::Ewc => {
                let lam = self.cfg.lambda_ewc;
                let f = self.fisher.as_ref().ok_or_else(|| Error::Contract("EWC needs a Fisher estimate".into()))?;
                let mut pen = 0.0;
                for &i in &train {
                    let d = params.values[i] - self.anchor[i];
                    pen += 0.5 * lam * f[i] * d * d;
                    if let Some(g) = grad.as_deref_mut() {
                        g[i] += lam * f[i] * d;
                    }
                }
                loss += pen;
            }
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub model: PinnModel,
    pub trace: Vec<TraceRow>,
    /// Set when training hit a non-finite loss and the input model was kept.
    pub aborted: Option<String>,
}

/// Adam on the output layer and final activation coefficients over the
/// selected points. `seed` drives the KdV periodicity times.
pub fn transfer_train(
    model: &PinnModel,
    points: &CollocationSet,
    cfg: &TlConfig,
    split: &SplitSpec,
    seed: u64,
) -> Result<TransferOutput> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyCollocation);
    }
    let frozen = model.params.clone();
    let mask = frozen.mask_final_layer();
    let mut params = frozen.clone().with_mask(mask);
    let boundary: Option<Vec<f64>> = model.problem.needs_boundary_loss().then(|| {
        let mut rng = rng_for(seed, Stream::TransferBoundary);
        (0..cfg.boundary_points).map(|_| sample_in(&mut rng, 0.0, split.t_val, false)).collect()
    });
    let base = PdeLoss::new(&model.problem, &model.arch, points, boundary.as_deref())?;
    let fisher = if cfg.method == TlMethod::Ewc {
        let fmodel = PinnModel { params: params.clone(), ..model.clone() };
        let old = CollocationSet::uniform(&mut rng_for(seed, Stream::Fisher), cfg.fisher_points, 0.0, split.t_train, Region::Train);
        let diag = fisher_diag(&fmodel, &old)?;
        let mut full = vec![0.0; params.len()];
        for (v, i) in diag.values.iter().zip(params.trainable_indices()) {
            full[i] = *v;
        }
        Some(full)
    } else {
        None
    };
    let loss = TransferLoss { base: &base, method: cfg.method, cfg: *cfg, anchor: &frozen.values, fisher };
    let mut adam = AdamState::new(params.trainable_count(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (value, grad) = match value_and_gradient(&loss, &params) {
            Ok(r) => r,
            Err(Error::NonFinite(detail)) | Err(Error::NonFiniteLayer { detail, .. }) => {
                return Ok(TransferOutput { model: model.clone(), trace, aborted: Some(format!("epoch {epoch}: {detail}")) });
            }
            Err(e) => return Err(e),
        };
        trace.push(TraceRow { iteration: epoch, loss: value, grad_norm: grad.norm(), val_l2: None, note: None });
        if epoch == cfg.epochs {
            break;
        }
        adam_step_params(&mut adam, &mut params, &grad.values);
    }
    let out = PinnModel { params: params.with_mask(frozen.mask.clone()), ..model.clone() };
    Ok(TransferOutput { model: out, trace, aborted: None })
}

/// True when every entry outside `mask` is bit-identical.
pub fn frozen_entries_unchanged(before: &ParamVector, after: &ParamVector, mask: &[bool]) -> bool {
    before.values.len() == after.values.len()
        && before
            .values
            .iter()
            .zip(&after.values)
            .zip(mask)
            .all(|((a, b), m)| *m || a.to_bits() == b.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{ActivationKind, Family};
    use crate::metrics::rel_l2;
    use crate::refsolver::{generate_reference, GridSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn model(eq: Equation, seed: u64) -> PinnModel {
        let arch = Architecture::new(3, 8, ActivationKind::new(Family::LcTanh, 2)).unwrap();
        PinnModel::new(PdeProblem::new(eq), arch.clone(), init_xavier(&arch, seed).unwrap()).unwrap()
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(1..300);
            let k = rng.gen_range(0..=n);
            // coarse values force ties
            let v: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) * 0.5).collect();
            let got = top_k_indices(&v, k);
            let mut pairs: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = pairs.iter().take(k).map(|p| p.1).collect();
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn selection_is_monotone(values in proptest::collection::vec(0.0f64..10.0, 1..200), frac in 0.0f64..1.0) {
            let k = ((values.len() as f64) * frac) as usize;
            let chosen = top_k_indices(&values, k);
            let picked: std::collections::HashSet<usize> = chosen.iter().copied().collect();
            let min_in = chosen.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
            let max_out = (0..values.len()).filter(|i| !picked.contains(i)).map(|i| values[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(k == 0 || min_in >= max_out);
        }
    }

    #[test]
    fn selection_draws_from_the_requested_region() {
        let m = model(Equation::Burgers, 1);
        let split = SplitSpec::default();
        let all = select_high_loss_points(&m, 50, 50, 1.0, &split, 3).unwrap();
        assert_eq!(all.points.len(), 50);
        assert!(all.points.points.iter().all(|&(t, _)| t > 0.5 && t <= 0.8));
        for w in all.residual_sq.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let mixed = select_high_loss_points(&m, 100, 10, 0.5, &split, 3).unwrap();
        assert_eq!(mixed.points.region, Region::Mixed);
        assert!(select_high_loss_points(&m, 10, 11, 1.0, &split, 3).is_err());
        let again = select_high_loss_points(&m, 100, 10, 0.5, &split, 3).unwrap();
        assert_eq!(again, mixed);
    }

    fn fd_squared_grad(m: &PinnModel, p: (f64, f64), i: usize) -> f64 {
        let single = CollocationSet { points: vec![p], region: Region::Train };
        let loss = PdeLoss::new(&m.problem, &m.arch, &single, Some(&[])).unwrap();
        let e = 1e-6;
        let mut q = m.params.clone();
        q.values[i] += e;
        let up = loss.evaluate(&q, None).unwrap();
        q.values[i] -= 2.0 * e;
        let dn = loss.evaluate(&q, None).unwrap();
        ((up - dn) / (2.0 * e)).powi(2)
    }

    #[test]
    fn fisher_matches_finite_differences() {
        let mut m = model(Equation::AllenCahn, 4);
        m.params = m.params.clone().with_mask(m.params.mask_final_layer());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = CollocationSet::uniform(&mut rng, 100, 0.0, 0.5, Region::Train);
        let f = fisher_diag(&m, &pts).unwrap();
        let idx = m.params.trainable_indices();
        assert_eq!(f.values.len(), idx.len());
        for (k, &i) in idx.iter().enumerate().step_by(3) {
            let fd = pts.points.iter().map(|&p| fd_squared_grad(&m, p, i)).sum::<f64>() / 100.0;
            assert!((fd - f.values[k]).abs() <= 1e-4 * fd.max(1e-12), "entry {i}: {fd} vs {}", f.values[k]);
        }
        let one = CollocationSet { points: vec![pts.points[0]], region: Region::Train };
        let f1 = fisher_diag(&m, &one).unwrap();
        assert!((f1.values[0] - fd_squared_grad(&m, pts.points[0], idx[0])).abs() < 1e-6 * f1.values[0].max(1e-12));
    }

    #[test]
    fn fisher_vanishes_for_exact_solution() {
        let mut m = model(Equation::Burgers, 0);
        m.params.values.iter_mut().for_each(|v| *v = 0.0);
        m.params = m.params.clone().with_mask(m.params.mask_final_layer());
        // u = -sin(pi x) at t = 0 gives r = u u_x - nu u_xx, zero where sin = 0
        let pts = CollocationSet { points: vec![(0.0, 0.0), (0.0, 1.0), (0.0, -1.0)], region: Region::Train };
        for r in m.residuals(&pts.points).unwrap() {
            assert!(r.abs() < 1e-12);
        }
        let f = fisher_diag(&m, &pts).unwrap();
        assert!(f.values.iter().all(|v| *v < 1e-24));
    }

    fn selected(m: &PinnModel) -> CollocationSet {
        select_high_loss_points(m, 200, 20, 1.0, &SplitSpec::default(), 7).unwrap().points
    }

    #[test]
    fn transfer_changes_only_final_layer() {
        for eq in Equation::ALL {
            let m = model(eq, 11);
            let pts = selected(&m);
            for method in TlMethod::ALL {
                let cfg = TlConfig { epochs: 15, fisher_points: 30, boundary_points: 20, ..TlConfig::for_equation(eq, method) };
                let out = transfer_train(&m, &pts, &cfg, &SplitSpec::default(), 5).unwrap();
                assert!(out.aborted.is_none());
                let mask = m.params.mask_final_layer();
                assert!(frozen_entries_unchanged(&m.params, &out.model.params, &mask));
                assert_ne!(m.params.values, out.model.params.values);
                assert_eq!(out.trace.len(), 16);
                assert!(out.trace.last().unwrap().loss < out.trace[0].loss, "{eq} {method:?}");
            }
        }
    }

    #[test]
    fn zero_lambda_matches_vanilla_bitwise() {
        let m = model(Equation::AllenCahn, 2);
        let pts = selected(&m);
        let split = SplitSpec::default();
        let van = transfer_train(&m, &pts, &TlConfig { epochs: 10, method: TlMethod::Vanilla, ..TlConfig::default() }, &split, 1).unwrap();
        let l2 = transfer_train(&m, &pts, &TlConfig { epochs: 10, method: TlMethod::L2, lambda_l2: 0.0, ..TlConfig::default() }, &split, 1).unwrap();
        let bits = |p: &ParamVector| p.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&van.model.params), bits(&l2.model.params));
    }

    #[test]
    fn nonfinite_transfer_returns_input_model() {
        let m = model(Equation::Burgers, 3);
        let pts = selected(&m);
        let cfg = TlConfig { epochs: 200, lr: 1e6, method: TlMethod::Vanilla, ..TlConfig::default() };
        let out = transfer_train(&m, &pts, &cfg, &SplitSpec::default(), 1).unwrap();
        if out.aborted.is_some() {
            assert_eq!(out.model, m);
        }
        // a poisoned input always aborts
        let mut bad = m.clone();
        let out_layer = bad.params.layout.output_layer();
        bad.params.weights_mut(out_layer)[0] = 1e308;
        let out = transfer_train(&bad, &pts, &cfg, &SplitSpec::default(), 1).unwrap();
        assert!(out.aborted.is_some());
        assert_eq!(out.model, bad);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let m = model(Equation::Kdv, 6);
        let pts = selected(&m);
        let ts = [0.1, 0.4, 0.7];
        let base = PdeLoss::new(&m.problem, &m.arch, &pts, Some(&ts)).unwrap();
        let params = m.params.clone().with_mask(m.params.mask_final_layer());
        let anchor: Vec<f64> = m.params.values.iter().map(|v| v + 0.05).collect();
        let fisher: Vec<f64> = (0..params.len()).map(|i| 1.0 + (i % 5) as f64).collect();
        for (method, mode) in [(TlMethod::L2, L2Mode::Magnitude), (TlMethod::L2, L2Mode::Deviation), (TlMethod::Ewc, L2Mode::Magnitude)] {
            let cfg = TlConfig { method, l2_mode: mode, lambda_l2: 0.3, lambda_ewc: 0.2, ..TlConfig::default() };
            let loss = TransferLoss { base: &base, method, cfg, anchor: &anchor, fisher: Some(fisher.clone()) };
            let (_, g) = value_and_gradient(&loss, &params).unwrap();
            for (k, i) in params.trainable_indices().into_iter().enumerate() {
                let e = 1e-6;
                let mut q = params.clone();
                q.values[i] += e;
                let up = loss.evaluate(&q, None).unwrap();
                q.values[i] -= 2.0 * e;
                let dn = loss.evaluate(&q, None).unwrap();
                let fd = (up - dn) / (2.0 * e);
                assert!((fd - g.values[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "{method:?} {mode:?} entry {i}: {fd} vs {}", g.values[k]);
            }
        }
    }

    #[test]
    fn short_initial_training_improves_validation_error() {
        let problem = PdeProblem::new(Equation::Burgers);
        let grid = generate_reference(Equation::Burgers, &GridSpec { nx_internal: 256, ..GridSpec::standard(Equation::Burgers) }).unwrap();
        let arch = Architecture::new(3, 10, ActivationKind::tanh()).unwrap();
        let cfg = InitialConfig {
            collocation_points: 300,
            lbfgs: LbfgsConfig { max_iters: 60, ..LbfgsConfig::default() },
            check_every: 10,
            patience: 3,
            ..InitialConfig::default()
        };
        let out = train_initial(&problem, &arch, &grid, &SplitSpec::default(), &cfg, 0).unwrap();
        let start = PinnModel::new(problem, arch.clone(), init_xavier(&arch, 0).unwrap()).unwrap();
        let before = rel_l2(&start, &grid, EvalRegion::Validation).unwrap();
        let after = rel_l2(&out.model, &grid, EvalRegion::Validation).unwrap();
        assert!(after < before, "{after} vs {before}");
        assert_eq!(after.to_bits(), out.best_val_l2.to_bits());
        for w in out.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        // same seed, same result
        let again = train_initial(&problem, &arch, &grid, &SplitSpec::default(), &cfg, 0).unwrap();
        assert_eq!(again.model.params, out.model.params);
        // other equation's grid is rejected
        let kdv = PdeProblem::new(Equation::Kdv);
        assert!(train_initial(&kdv, &arch, &grid, &SplitSpec::default(), &cfg, 0).is_err());
    }
}
