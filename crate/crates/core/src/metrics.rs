//! Relative error metrics on the reference grids, transfer-learning effect
//! reports, layer-wise gradient norms and trace diagnostics.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::autodiff::{pairwise_sum, Objective};
use crate::error::{Error, Result};
use crate::optim::TraceRow;
use crate::pde::{CollocationSet, PdeLoss, PinnModel};
use crate::refsolver::ReferenceGrid;

pub const T_TRAIN: f64 = 0.5;
pub const T_VAL: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalRegion {
    /// `[0, 0.5]`
    Train,
    /// `(0.5, 0.8]`
    Validation,
    /// `(0.8, 1.0]`
    Extrapolation,
    /// `[0, 0.8]`, where forgetting is measured
    Seen,
    Full,
}

impl EvalRegion {
    pub const REPORTED: [EvalRegion; 3] = [EvalRegion::Train, EvalRegion::Validation, EvalRegion::Extrapolation];

    pub fn name(self) -> &'static str {
        match self {
            EvalRegion::Train => "train",
            EvalRegion::Validation => "validation",
            EvalRegion::Extrapolation => "extrapolation",
            EvalRegion::Seen => "seen",
            EvalRegion::Full => "full",
        }
    }
}

/// Time rows of `grid` that fall in `region`.
pub fn region_rows(grid: &ReferenceGrid, region: EvalRegion) -> Range<usize> {
    let train_end = grid.time_index(T_TRAIN) + 1;
    let val_end = grid.time_index(T_VAL) + 1;
    match region {
        EvalRegion::Train => 0..train_end,
        EvalRegion::Validation => train_end..val_end,
        EvalRegion::Extrapolation => val_end..grid.nt(),
        EvalRegion::Seen => 0..val_end,
        EvalRegion::Full => 0..grid.nt(),
    }
}

pub fn region_points(grid: &ReferenceGrid, region: EvalRegion) -> Vec<(f64, f64)> {
    region_rows(grid, region).flat_map(|ti| grid.x.iter().map(move |&x| (grid.t[ti], x))).collect()
}

pub fn region_values(grid: &ReferenceGrid, region: EvalRegion) -> &[f64] {
    let rows = region_rows(grid, region);
    &grid.u[rows.start * grid.nx()..rows.end * grid.nx()]
}

/// Anything that can produce solution values at space-time points.
pub trait FieldSampler {
    fn sample(&self, points: &[(f64, f64)]) -> Result<Vec<f64>>;
}

impl FieldSampler for PinnModel {
    fn sample(&self, points: &[(f64, f64)]) -> Result<Vec<f64>> {
        self.predict(points)
    }
}

/// Closure adapter.
pub struct FnSampler<F>(pub F);

impl<F: Fn(f64, f64) -> f64> FieldSampler for FnSampler<F> {
    fn sample(&self, points: &[(f64, f64)]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|&(t, x)| (self.0)(t, x)).collect())
    }
}

/// `(sqrt(sum (p - r)^2) / sqrt(sum r^2), sum |p - r| / sum |r|)`.
pub fn relative_errors(pred: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != reference.len() {
        return Err(Error::Contract(format!("{} predictions for {} reference values", pred.len(), reference.len())));
    }
    let sq: Vec<f64> = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).collect();
    let ab: Vec<f64> = pred.iter().zip(reference).map(|(p, r)| (p - r).abs()).collect();
    let rsq: Vec<f64> = reference.iter().map(|r| r * r).collect();
    let rab: Vec<f64> = reference.iter().map(|r| r.abs()).collect();
    let (den2, den1) = (pairwise_sum(&rsq), pairwise_sum(&rab));
    if den2 == 0.0 || den1 == 0.0 {
        return Err(Error::ZeroDenominator("reference field is zero on the region"));
    }
    let l2 = (pairwise_sum(&sq) / den2).sqrt();
    let mae = pairwise_sum(&ab) / den1;
    if !l2.is_finite() || !mae.is_finite() {
        return Err(Error::NonFinite("prediction error".into()));
    }
    Ok((l2, mae))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: EvalRegion,
    pub rel_l2: f64,
    pub rel_mae: f64,
    pub points: usize,
}

pub fn region_report(pred: &dyn FieldSampler, grid: &ReferenceGrid, region: EvalRegion) -> Result<RegionReport> {
    let pts = region_points(grid, region);
    let p = pred.sample(&pts)?;
    let (rel_l2, rel_mae) = relative_errors(&p, region_values(grid, region))?;
    Ok(RegionReport { region, rel_l2, rel_mae, points: pts.len() })
}

pub fn rel_l2(pred: &dyn FieldSampler, grid: &ReferenceGrid, region: EvalRegion) -> Result<f64> {
    region_report(pred, grid, region).map(|r| r.rel_l2)
}

pub fn rel_mae(pred: &dyn FieldSampler, grid: &ReferenceGrid, region: EvalRegion) -> Result<f64> {
    region_report(pred, grid, region).map(|r| r.rel_mae)
}

/// Train, validation and extrapolation reports.
pub fn standard_reports(pred: &dyn FieldSampler, grid: &ReferenceGrid) -> Result<Vec<RegionReport>> {
    EvalRegion::REPORTED.iter().map(|&r| region_report(pred, grid, r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlEffectReport {
    pub forgetting_l2_pct: f64,
    pub forgetting_mae_pct: f64,
    pub reduction_l2_pct: f64,
    pub reduction_mae_pct: f64,
    pub seen_before: (f64, f64),
    pub seen_after: (f64, f64),
    pub extrap_before: (f64, f64),
    pub extrap_after: (f64, f64),
}

fn pct_increase(before: f64, after: f64) -> f64 {
    100.0 * (after - before) / before
}

/// Forgetting on `[0, 0.8]` and error reduction on `(0.8, 1.0]`.
pub fn tl_effect(before: &dyn FieldSampler, after: &dyn FieldSampler, grid: &ReferenceGrid) -> Result<TlEffectReport> {
    let errs = |m: &dyn FieldSampler, r| region_report(m, grid, r).map(|x| (x.rel_l2, x.rel_mae));
    let (sb, sa) = (errs(before, EvalRegion::Seen)?, errs(after, EvalRegion::Seen)?);
    let (eb, ea) = (errs(before, EvalRegion::Extrapolation)?, errs(after, EvalRegion::Extrapolation)?);
    Ok(tl_effect_from_errors(sb, sa, eb, ea))
}

pub fn tl_effect_from_errors(sb: (f64, f64), sa: (f64, f64), eb: (f64, f64), ea: (f64, f64)) -> TlEffectReport {
    TlEffectReport {
        forgetting_l2_pct: pct_increase(sb.0, sa.0),
        forgetting_mae_pct: pct_increase(sb.1, sa.1),
        reduction_l2_pct: -pct_increase(eb.0, ea.0),
        reduction_mae_pct: -pct_increase(eb.1, ea.1),
        seen_before: sb,
        seen_after: sa,
        extrap_before: eb,
        extrap_after: ea,
    }
}

/// Gradient norms of the PDE loss for one layer (hidden layers first, the
/// output layer last). `log_sum` is `ln |dW| + ln |db|`, absent when either
/// norm vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGradNorm {
    pub layer: usize,
    pub weight_norm: f64,
    pub bias_norm: f64,
    pub log_sum: Option<f64>,
}

pub fn grad_norm_profile(model: &PinnModel, colloc: &CollocationSet, boundary_ts: Option<&[f64]>) -> Result<Vec<LayerGradNorm>> {
    let loss = PdeLoss::new(&model.problem, &model.arch, colloc, boundary_ts)?;
    let params = model.params.clone().with_mask(model.params.mask_all());
    let mut g = vec![0.0; params.len()];
    loss.evaluate(&params, Some(&mut g))?;
    let norm = |r: &Range<usize>| g[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(params
        .layout
        .layers
        .iter()
        .enumerate()
        .map(|(layer, slot)| {
            let (w, b) = (norm(&slot.weights), norm(&slot.bias));
            let log_sum = (w > 0.0 && b > 0.0 && w.is_finite() && b.is_finite()).then(|| w.ln() + b.ln());
            LayerGradNorm { layer, weight_norm: w, bias_norm: b, log_sum }
        })
        .collect())
}

/// Iteration of the first trace row whose loss is at or below `threshold`.
pub fn epochs_to_threshold(trace: &[TraceRow], threshold: f64) -> Option<usize> {
    trace.iter().find(|r| r.loss <= threshold).map(|r| r.iteration)
}

/// Iteration of the first validation check after which the validation error
/// rises for `patience` consecutive checks.
pub fn validation_upturn(trace: &[TraceRow], patience: usize) -> Option<usize> {
    let checks: Vec<(usize, f64)> = trace.iter().filter_map(|r| r.val_l2.map(|v| (r.iteration, v))).collect();
    let p = patience.max(1);
    (0..checks.len().saturating_sub(p)).find(|&i| (i..i + p).all(|j| checks[j + 1].1 > checks[j].1)).map(|i| checks[i].0)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{ActivationKind, Family};
    use crate::network::{init_xavier, Architecture};
    use crate::pde::{Equation, PdeProblem, Region};
    use crate::refsolver::{linspace, SolverMeta};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn synthetic_grid(equation: Equation, nx: usize, nt: usize) -> ReferenceGrid {
        let x = linspace(-1.0, 1.0, nx);
        let t = linspace(0.0, 1.0, nt);
        let u = t.iter().flat_map(|&t| x.iter().map(move |&x| (PI * x).cos() * (1.0 + t) + 0.3 * x)).collect();
        ReferenceGrid { equation, x, t, u, meta: SolverMeta { rtol: 0.0, atol: 0.0, scheme: "synthetic".into(), nx_internal: nx } }
    }

    #[test]
    fn region_grids_have_expected_sizes() {
        let ac = synthetic_grid(Equation::AllenCahn, 400, 201);
        assert_eq!(region_points(&ac, EvalRegion::Extrapolation).len(), 40 * 400);
        assert_eq!(region_rows(&ac, EvalRegion::Extrapolation).start, 161);
        assert!((ac.t[161] - 0.805).abs() < 1e-15);
        assert_eq!(region_rows(&ac, EvalRegion::Train), 0..101);
        assert_eq!(region_rows(&ac, EvalRegion::Validation).len(), 60);
        let b = synthetic_grid(Equation::Burgers, 600, 101);
        let ex = region_rows(&b, EvalRegion::Extrapolation);
        assert_eq!(ex.len(), 20);
        assert!((b.t[ex.start] - 0.81).abs() < 1e-15);
        assert_eq!(region_rows(&b, EvalRegion::Seen).len(), 81);
        let k = synthetic_grid(Equation::Kdv, 500, 201);
        assert_eq!(region_points(&k, EvalRegion::Extrapolation).len(), 40 * 500);
    }

    #[test]
    fn metric_edge_cases() {
        let g = synthetic_grid(Equation::AllenCahn, 400, 201);
        let reference = |t: f64, x: f64| (PI * x).cos() * (1.0 + t) + 0.3 * x;
        for r in EvalRegion::REPORTED {
            let same = region_report(&FnSampler(reference), &g, r).unwrap();
            assert!(same.rel_l2 < 1e-15 && same.rel_mae < 1e-15);
            let zero = region_report(&FnSampler(|_, _| 0.0), &g, r).unwrap();
            assert_eq!((zero.rel_l2, zero.rel_mae), (1.0, 1.0));
            let twice = region_report(&FnSampler(|t, x| 2.0 * reference(t, x)), &g, r).unwrap();
            assert!((twice.rel_mae - 1.0).abs() < 1e-14);
        }
        // constant shift against a direct double loop over the grid
        let shifted = rel_l2(&FnSampler(|t, x| reference(t, x) + 0.01), &g, EvalRegion::Extrapolation).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for ti in 161..201 {
            for xi in 0..400 {
                num += 0.01f64 * 0.01;
                den += g.at(ti, xi).powi(2);
            }
        }
        assert!((shifted - (num / den).sqrt()).abs() < 1e-12);

        let mut zero_grid = g.clone();
        zero_grid.u.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(rel_l2(&FnSampler(|_, _| 1.0), &zero_grid, EvalRegion::Train), Err(Error::ZeroDenominator(_))));
    }

    proptest! {
        #[test]
        fn metrics_are_scale_covariant(alpha in 0.01f64..100.0, shift in -0.5f64..0.5) {
            let r: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() + 0.2).collect();
            let p: Vec<f64> = r.iter().enumerate().map(|(i, v)| v + shift * (i as f64 * 0.11).cos()).collect();
            let (l2, mae) = relative_errors(&p, &r).unwrap();
            let ps: Vec<f64> = p.iter().map(|v| alpha * v).collect();
            let rs: Vec<f64> = r.iter().map(|v| alpha * v).collect();
            let (l2s, maes) = relative_errors(&ps, &rs).unwrap();
            prop_assert!((l2 - l2s).abs() <= 1e-12 * l2.max(1e-300) + 1e-15);
            prop_assert!((mae - maes).abs() <= 1e-12 * mae.max(1e-300) + 1e-15);
            prop_assert!(l2 >= 0.0 && mae >= 0.0);
        }
    }

    #[test]
    fn tl_effect_signs() {
        let g = synthetic_grid(Equation::AllenCahn, 400, 201);
        let f = |t: f64, x: f64| (PI * x).cos() * (1.0 + t) + 0.3 * x + 0.05 * t * t;
        let same = tl_effect(&FnSampler(f), &FnSampler(f), &g).unwrap();
        for v in [same.forgetting_l2_pct, same.forgetting_mae_pct, same.reduction_l2_pct, same.reduction_mae_pct] {
            assert_eq!(v, 0.0);
        }
        let r = tl_effect_from_errors((0.1, 0.05), (0.11, 0.06), (0.2, 0.1), (0.12, 0.08));
        assert!((r.forgetting_l2_pct - 10.0).abs() < 1e-9);
        assert!((r.forgetting_mae_pct - 20.0).abs() < 1e-9);
        assert!((r.reduction_l2_pct - 40.0).abs() < 1e-9);
        assert!((r.reduction_mae_pct - 20.0).abs() < 1e-9);
    }

    fn small_model(eq: Equation, seed: u64) -> PinnModel {
        let arch = Architecture::new(3, 6, ActivationKind::new(Family::LcTanh, 2)).unwrap();
        let params = init_xavier(&arch, seed).unwrap();
        PinnModel::new(PdeProblem::new(eq), arch, params).unwrap()
    }

    #[test]
    fn grad_norms_match_finite_differences() {
        let model = small_model(Equation::AllenCahn, 5);
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (0.025 * i as f64, -0.9 + 0.09 * i as f64)).collect();
        let colloc = CollocationSet { points: pts, region: Region::Train };
        let profile = grad_norm_profile(&model, &colloc, None).unwrap();
        assert_eq!(profile.len(), 4);
        let loss = PdeLoss::new(&model.problem, &model.arch, &colloc, None).unwrap();
        for (slot, entry) in model.params.layout.layers.iter().zip(&profile) {
            let fd_norm = |r: &Range<usize>| {
                r.clone()
                    .map(|i| {
                        let e = 1e-6;
                        let mut p = model.params.clone();
                        p.values[i] += e;
                        let up = loss.evaluate(&p, None).unwrap();
                        p.values[i] -= 2.0 * e;
                        let dn = loss.evaluate(&p, None).unwrap();
                        ((up - dn) / (2.0 * e)).powi(2)
                    })
                    .sum::<f64>()
                    .sqrt()
            };
            let (w, b) = (fd_norm(&slot.weights), fd_norm(&slot.bias));
            assert!((w - entry.weight_norm).abs() <= 1e-4 * w, "{w} vs {}", entry.weight_norm);
            assert!((b - entry.bias_norm).abs() <= 1e-4 * b, "{b} vs {}", entry.bias_norm);
            assert!((entry.log_sum.unwrap() - (w.ln() + b.ln())).abs() < 1e-3);
        }
    }

    #[test]
    fn disconnected_layer_is_flagged() {
        let mut model = small_model(Equation::Burgers, 2);
        for l in [0, 1] {
            model.params.weights_mut(l).iter_mut().for_each(|w| *w = 0.0);
        }
        let colloc = CollocationSet { points: vec![(0.2, 0.3), (0.4, -0.5)], region: Region::Train };
        let profile = grad_norm_profile(&model, &colloc, None).unwrap();
        assert!(profile[0].log_sum.is_none());
        assert!(profile[3].log_sum.is_some());
    }

    fn row(iteration: usize, loss: f64, val: Option<f64>) -> TraceRow {
        TraceRow { iteration, loss, grad_norm: 0.0, val_l2: val, note: None }
    }

    #[test]
    fn trace_diagnostics() {
        let trace: Vec<TraceRow> = (0..100).map(|i| row(i, 1.0 / (1.0 + i as f64), None)).collect();
        // 1 / (1 + 42) is the first value at or below 1/43
        assert_eq!(epochs_to_threshold(&trace, 1.0 / 43.0), Some(42));
        assert_eq!(epochs_to_threshold(&trace, 1e-9), None);

        let vals = [1.0, 0.8, 0.7, 0.72, 0.71, 0.73, 0.74, 0.75];
        let trace: Vec<TraceRow> = vals.iter().enumerate().map(|(i, v)| row(i * 10, 0.0, Some(*v))).collect();
        assert_eq!(validation_upturn(&trace, 3), Some(40));
        assert_eq!(validation_upturn(&trace, 1), Some(20));
        assert_eq!(validation_upturn(&trace, 10), None);
        assert_eq!(mean_std(&[1.0, 2.0, 3.0]), (2.0, 1.0));
    }
}
