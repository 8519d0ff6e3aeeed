//! Limited-memory BFGS with a strong-Wolfe line search, Adam, and the
//! validation-driven early-stopping controller.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::autodiff::Objective;
use crate::error::{Error, Result};
use crate::network::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iters: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step changes the loss by less than this.
    pub loss_change_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 50,
            max_iters: 5000,
            grad_tol: 1e-9,
            loss_change_tol: 1e-15,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if self.history == 0 {
            return Err(Error::InvalidConfig("L-BFGS history must be at least 1".into()));
        }
        if self.max_line_search == 0 {
            return Err(Error::InvalidConfig("line search needs at least one evaluation".into()));
        }
        Ok(())
    }
}

/// One optimizer trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub val_l2: Option<f64>,
    /// Set when the iteration ended abnormally (line-search failure, ...).
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    GradientTolerance,
    LossChange,
    MaxIterations,
    Callback,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub loss: f64,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Probe {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, clamped to
/// the inside of the interval; bisection when the cubic is degenerate.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mid = 0.5 * (lo + hi);
    if disc < 0.0 || !disc.is_finite() {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    let margin = 0.1 * (hi - lo);
    if !t.is_finite() || t < lo + margin || t > hi - margin {
        mid
    } else {
        t
    }
}

/// Strong-Wolfe line search. Returns the accepted probe, or the best probe
/// with sufficient decrease if the budget runs out, or `None`.
fn strong_wolfe<F>(
    f: &mut F,
    x: &[f64],
    dir: &[f64],
    f0: f64,
    slope0: f64,
    alpha0: f64,
    cfg: &LbfgsConfig,
    evals: &mut usize,
) -> Result<Option<Probe>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut trial = vec![0.0; x.len()];
    let mut eval = |alpha: f64, evals: &mut usize| -> Result<Probe> {
        for ((t, xi), di) in trial.iter_mut().zip(x).zip(dir) {
            *t = xi + alpha * di;
        }
        *evals += 1;
        let (fv, g) = f(&trial)?;
        let slope = dot(&g, dir);
        Ok(Probe { alpha, f: fv, g, slope })
    };
    let armijo = |p: &Probe| p.f <= f0 + cfg.c1 * p.alpha * slope0 && p.f.is_finite();
    let curvature = |p: &Probe| p.slope.abs() <= -cfg.c2 * slope0;

    let mut budget = cfg.max_line_search;
    let mut best: Option<Probe> = None;
    let keep_best = |p: &Probe, best: &mut Option<Probe>| {
        if armijo(p) && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(Probe { alpha: p.alpha, f: p.f, g: p.g.clone(), slope: p.slope });
        }
    };

    let mut prev = Probe { alpha: 0.0, f: f0, g: Vec::new(), slope: slope0 };
    let mut alpha = alpha0;
    let mut first = true;
    let (mut lo, mut hi);
    loop {
        if budget == 0 {
            return Ok(best);
        }
        budget -= 1;
        let cur = eval(alpha, evals)?;
        keep_best(&cur, &mut best);
        if !cur.f.is_finite() || !armijo(&cur) || (!first && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        first = false;
        alpha = cur.alpha * 2.0;
        prev = cur;
    }

    // zoom
    loop {
        if budget == 0 {
            return Ok(best);
        }
        budget -= 1;
        let a = if hi.f.is_finite() && !hi.g.is_empty() {
            cubic_step(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope)
        } else {
            0.5 * (lo.alpha + hi.alpha)
        };
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            return Ok(best);
        }
        let cur = eval(a, evals)?;
        keep_best(&cur, &mut best);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
}

/// L-BFGS on a plain vector. `f` returns the loss and its gradient. The
/// callback runs at the start point (iteration 0) and after every accepted
/// step; it may fill `val_l2` and request a stop.
pub fn lbfgs_minimize<F, C>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig, mut callback: C) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&[f64], &mut TraceRow) -> Control,
{
    cfg.validate()?;
    let mut x = x0;
    let mut evals = 1;
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("initial loss {fx}")));
    }
    let mut trace = Vec::new();
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);

    let mut row = TraceRow { iteration: 0, loss: fx, grad_norm: l2_norm(&g), val_l2: None, note: None };
    let control = callback(&x, &mut row);
    trace.push(row);
    if control == Control::Stop {
        return Ok(LbfgsOutcome { x, loss: fx, trace, stop: StopReason::Callback, evaluations: evals });
    }
    if inf_norm(&g) <= cfg.grad_tol {
        return Ok(LbfgsOutcome { x, loss: fx, trace, stop: StopReason::GradientTolerance, evaluations: evals });
    }

    for iter in 1..=cfg.max_iters {
        // two-loop recursion
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = memory.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir = q;
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            memory.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let alpha0 = if memory.is_empty() {
            (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            1.0
        };

        let probe = strong_wolfe(&mut f, &x, &dir, fx, slope, alpha0, cfg, &mut evals)?;
        let Some(probe) = probe else {
            let row = TraceRow {
                iteration: iter,
                loss: fx,
                grad_norm: l2_norm(&g),
                val_l2: None,
                note: Some("line search failed".into()),
            };
            trace.push(row);
            return Ok(LbfgsOutcome { x, loss: fx, trace, stop: StopReason::LineSearchFailed, evaluations: evals });
        };

        let s: Vec<f64> = dir.iter().map(|d| probe.alpha * d).collect();
        let y: Vec<f64> = probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * l2_norm(&s) * l2_norm(&y) && sy > 0.0 {
            if memory.len() == cfg.history {
                memory.pop_front();
            }
            memory.push_back((s.clone(), y, 1.0 / sy));
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let change = fx - probe.f;
        fx = probe.f;
        g = probe.g;

        let mut row = TraceRow { iteration: iter, loss: fx, grad_norm: l2_norm(&g), val_l2: None, note: None };
        let control = callback(&x, &mut row);
        trace.push(row);
        if control == Control::Stop {
            return Ok(LbfgsOutcome { x, loss: fx, trace, stop: StopReason::Callback, evaluations: evals });
        }
        if inf_norm(&g) <= cfg.grad_tol {
            return Ok(LbfgsOutcome { x, loss: fx, trace, stop: StopReason::GradientTolerance, evaluations: evals });
        }
        if change.abs() < cfg.loss_change_tol {
            return Ok(LbfgsOutcome { x, loss: fx, trace, stop: StopReason::LossChange, evaluations: evals });
        }
    }
    Ok(LbfgsOutcome { x, loss: fx, trace, stop: StopReason::MaxIterations, evaluations: evals })
}

/// Evaluates an objective on the trainable subset of `template`.
pub fn subset_fn<'a>(
    obj: &'a dyn Objective,
    template: &'a ParamVector,
) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a {
    let idx = template.trainable_indices();
    let mut work = template.clone();
    move |subset: &[f64]| {
        work.set_trainable_values(subset);
        let mut full = vec![0.0; work.len()];
        let v = obj.evaluate(&work, Some(&mut full))?;
        Ok((v, idx.iter().map(|&i| full[i]).collect()))
    }
}

/// L-BFGS over the trainable entries of `params`. The callback receives the
/// full parameter vector at each accepted iterate.
pub fn lbfgs_minimize_params<C>(
    obj: &dyn Objective,
    params: &ParamVector,
    cfg: &LbfgsConfig,
    mut callback: C,
) -> Result<(ParamVector, LbfgsOutcome)>
where
    C: FnMut(&ParamVector, &mut TraceRow) -> Control,
{
    let mut view = params.clone();
    let outcome = lbfgs_minimize(subset_fn(obj, params), params.trainable_values(), cfg, |x, row| {
        view.set_trainable_values(x);
        callback(&view, row)
    })?;
    let mut out = params.clone();
    out.set_trainable_values(&outcome.x);
    Ok((out, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates over the trainable entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0, config }
    }
}

/// Bias-corrected Adam update of a trainable subset.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(state.m.len(), grad.len());
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam on the masked-in entries of a parameter vector; `grad` is in
/// trainable order.
pub fn adam_step_params(state: &mut AdamState, params: &mut ParamVector, grad: &[f64]) {
    let mut subset = params.trainable_values();
    adam_step(state, &mut subset, grad);
    params.set_trainable_values(&subset);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Continue,
    Stop,
}

/// Tracks the best validation error seen at periodic checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_val: f64,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamVector>,
    pub since_improvement: usize,
    pub patience: usize,
    pub check_every: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize, check_every: usize) -> Self {
        EarlyStopState {
            best_val: f64::INFINITY,
            best_epoch: None,
            best_params: None,
            since_improvement: 0,
            patience,
            check_every: check_every.max(1),
        }
    }

    pub fn is_check(&self, epoch: usize) -> bool {
        epoch % self.check_every == 0
    }

    /// Records one validation check. Snapshots `params` on improvement and
    /// asks to stop after `patience` consecutive checks without one.
    pub fn update(&mut self, epoch: usize, val_l2: f64, params: &ParamVector) -> Decision {
        if val_l2 < self.best_val {
            self.best_val = val_l2;
            self.best_epoch = Some(epoch);
            self.best_params = Some(params.clone());
            self.since_improvement = 0;
            return Decision::Continue;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

pub fn early_stop_update(state: &mut EarlyStopState, epoch: usize, val_l2: f64, params: &ParamVector) -> Decision {
    state.update(epoch, val_l2, params)
}
