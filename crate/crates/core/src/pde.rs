//! The three benchmark equations, their residuals in terms of the network
//! output `v`, the KdV periodicity penalty and the training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use crate::autodiff::{
    accumulate_point_loss, backward_block, eval_jets, eval_values, forward_block, order_free_sum, DerivBundle,
    DerivOrders, Jet, Objective, PointLoss,
};
use crate::error::{Error, Result};
use crate::network::{Ansatz, Architecture, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Equation {
    #[serde(rename = "ac", alias = "allen-cahn")]
    AllenCahn,
    #[serde(rename = "kdv")]
    Kdv,
    #[serde(rename = "burgers")]
    Burgers,
}

impl Equation {
    pub const ALL: [Equation; 3] = [Equation::AllenCahn, Equation::Kdv, Equation::Burgers];

    pub fn id(self) -> &'static str {
        match self {
            Equation::AllenCahn => "ac",
            Equation::Kdv => "kdv",
            Equation::Burgers => "burgers",
        }
    }

    pub fn from_id(s: &str) -> Option<Equation> {
        match s.to_ascii_lowercase().as_str() {
            "ac" | "allen-cahn" | "allencahn" => Some(Equation::AllenCahn),
            "kdv" => Some(Equation::Kdv),
            "burgers" => Some(Equation::Burgers),
            _ => None,
        }
    }

    /// Initial condition `u(0, x)`.
    pub fn initial(self, x: f64) -> f64 {
        match self {
            Equation::AllenCahn => x * x * (PI * x).cos(),
            Equation::Kdv => (PI * x).cos(),
            Equation::Burgers => -(PI * x).sin(),
        }
    }

    /// Dirichlet value at `x = +-1`, `None` for the periodic KdV problem.
    pub fn dirichlet(self) -> Option<f64> {
        match self {
            Equation::AllenCahn => Some(-1.0),
            Equation::Burgers => Some(0.0),
            Equation::Kdv => None,
        }
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Equation coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Coefficients {
    /// `u_t - diffusion u_xx + cubic u^3 - linear u = 0`
    AllenCahn { diffusion: f64, cubic: f64, linear: f64 },
    /// `u_t + u u_x + dispersion u_xxx = 0`
    Kdv { dispersion: f64 },
    /// `u_t + u u_x - viscosity u_xx = 0`
    Burgers { viscosity: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeProblem {
    pub equation: Equation,
    pub coefficients: Coefficients,
    pub x_range: (f64, f64),
    pub t_final: f64,
    pub ansatz: Ansatz,
}

impl PdeProblem {
    pub fn new(equation: Equation) -> Self {
        let coefficients = match equation {
            Equation::AllenCahn => Coefficients::AllenCahn { diffusion: 0.0001, cubic: 5.0, linear: 5.0 },
            Equation::Kdv => Coefficients::Kdv { dispersion: 0.0025 },
            Equation::Burgers => Coefficients::Burgers { viscosity: 0.01 / PI },
        };
        PdeProblem { equation, coefficients, x_range: (-1.0, 1.0), t_final: 1.0, ansatz: Ansatz::new(equation) }
    }

    pub fn needs_boundary_loss(&self) -> bool {
        self.equation == Equation::Kdv
    }

    /// Derivative orders of `v` the residual needs.
    pub fn orders(&self) -> DerivOrders {
        match self.equation {
            Equation::Kdv => DerivOrders { t: 1, x: 3 },
            _ => DerivOrders { t: 1, x: 2 },
        }
    }

    /// Residual of the transformed equation for `v` together with
    /// `d r / d(v, v_t, v_x, v_xx, v_xxx)`.
    pub fn residual_v(&self, t: f64, x: f64, v: &Jet) -> (f64, Jet) {
        let (s, c) = (PI * x).sin_cos();
        let q = 1.0 - x * x;
        match self.coefficients {
            Coefficients::AllenCahn { diffusion: eps, cubic, linear } => {
                let u = x * x * c + t * q * v.v;
                let uxx = 2.0 * c - 4.0 * PI * x * s - PI * PI * x * x * c
                    + t * (-2.0 * v.v - 4.0 * x * v.x + q * v.xx);
                let r = q * v.v + t * q * v.t - eps * uxx + cubic * u * u * u - linear * u;
                let du = 3.0 * cubic * u * u - linear;
                let adj = Jet {
                    v: q + 2.0 * eps * t + du * t * q,
                    t: t * q,
                    x: 4.0 * eps * x * t,
                    xx: -eps * t * q,
                    xxx: 0.0,
                };
                (r, adj)
            }
            Coefficients::Burgers { viscosity: nu } => {
                let u = -s + t * q * v.v;
                let ux = -PI * c - 2.0 * x * t * v.v + t * q * v.x;
                let uxx = PI * PI * s - 2.0 * t * v.v - 4.0 * x * t * v.x + t * q * v.xx;
                let r = q * v.v + t * q * v.t + u * ux - nu * uxx;
                let adj = Jet {
                    v: q + t * q * ux - 2.0 * x * t * u + 2.0 * nu * t,
                    t: t * q,
                    x: u * t * q + 4.0 * nu * x * t,
                    xx: -nu * t * q,
                    xxx: 0.0,
                };
                (r, adj)
            }
            Coefficients::Kdv { dispersion: d } => {
                let u = c + t * v.v;
                let ux = -PI * s + t * v.x;
                let r = v.v + t * v.t + u * ux + d * (PI * PI * PI * s + t * v.xxx);
                let adj = Jet { v: 1.0 + t * ux, t, x: u * t, xx: 0.0, xxx: d * t };
                (r, adj)
            }
        }
    }

    /// `u_t + N(u)` evaluated directly on a bundle of `u` and its partials.
    pub fn residual_u(&self, u: &DerivBundle) -> Result<f64> {
        let need = |o: Option<f64>, what: &str| o.ok_or_else(|| Error::Contract(format!("u bundle lacks {what}")));
        let ut = need(u.du_dt, "u_t")?;
        Ok(match self.coefficients {
            Coefficients::AllenCahn { diffusion, cubic, linear } => {
                ut - diffusion * need(u.d2u_dx2, "u_xx")? + cubic * u.u.powi(3) - linear * u.u
            }
            Coefficients::Kdv { dispersion } => {
                ut + u.u * need(u.du_dx, "u_x")? + dispersion * need(u.d3u_dx3, "u_xxx")?
            }
            Coefficients::Burgers { viscosity } => {
                ut + u.u * need(u.du_dx, "u_x")? - viscosity * need(u.d2u_dx2, "u_xx")?
            }
        })
    }

    /// Solution value `u(t, x)` for a network value `v`.
    pub fn u_value(&self, t: f64, x: f64, v: f64) -> f64 {
        self.ansatz.u_value(t, x, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Train,
    Validation,
    Mixed,
}

/// Space-time points where the residual is enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationSet {
    pub points: Vec<(f64, f64)>,
    pub region: Region,
}

impl CollocationSet {
    /// Checks domain membership and the region tag against the split times.
    pub fn new(points: Vec<(f64, f64)>, region: Region, t_train: f64, t_val: f64) -> Result<Self> {
        for &(t, x) in &points {
            let inside = (0.0..=1.0).contains(&t) && (-1.0..=1.0).contains(&x);
            let tagged = match region {
                Region::Train => t <= t_train,
                Region::Validation => t > t_train && t <= t_val,
                Region::Mixed => t <= t_val,
            };
            if !inside || !tagged {
                return Err(Error::Contract(format!("point ({t}, {x}) outside {region:?} region")));
            }
        }
        Ok(CollocationSet { points, region })
    }

    /// `n` points uniform in `[t_lo, t_hi] x [-1, 1]`.
    pub fn uniform<R: Rng>(rng: &mut R, n: usize, t_lo: f64, t_hi: f64, region: Region) -> Self {
        let points = (0..n)
            .map(|_| {
                let t = if t_lo == t_hi { t_lo } else { sample_in(rng, t_lo, t_hi, region == Region::Validation) };
                (t, rng.gen_range(-1.0..=1.0))
            })
            .collect();
        CollocationSet { points, region }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform sample in `[lo, hi]`, or `(lo, hi]` when `open_low`.
pub fn sample_in<R: Rng>(rng: &mut R, lo: f64, hi: f64, open_low: bool) -> f64 {
    loop {
        let t = rng.gen_range(lo..=hi);
        if !open_low || t > lo {
            return t;
        }
    }
}

/// Residual at one point.
pub fn residual(problem: &PdeProblem, arch: &Architecture, params: &ParamVector, t: f64, x: f64) -> Result<f64> {
    let tape = forward_block(arch, params, &[(t, x)], problem.orders())?;
    let r = problem.residual_v(t, x, tape.jet(0)).0;
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("residual at ({t}, {x}) from jet {:?}", tape.jet(0))));
    }
    Ok(r)
}

/// Residuals at many points, in point order.
pub fn residuals(problem: &PdeProblem, arch: &Architecture, params: &ParamVector, points: &[(f64, f64)]) -> Result<Vec<f64>> {
    let jets = eval_jets(arch, params, points, problem.orders())?;
    points
        .iter()
        .zip(&jets)
        .map(|(&(t, x), j)| {
            let r = problem.residual_v(t, x, j).0;
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFinite(format!("residual at ({t}, {x}) from jet {j:?}")))
            }
        })
        .collect()
}

/// `(v(t,-1) - v(t,1), v_x(t,-1) - v_x(t,1))`.
pub fn boundary_residual_kdv(arch: &Architecture, params: &ParamVector, t: f64) -> Result<(f64, f64)> {
    let tape = forward_block(arch, params, &[(t, -1.0), (t, 1.0)], DerivOrders { t: 0, x: 1 })?;
    let (l, r) = (tape.jet(0), tape.jet(1));
    Ok((l.v - r.v, l.x - r.x))
}

struct SquaredResidual<'a> {
    problem: &'a PdeProblem,
    scale: f64,
}

impl PointLoss for SquaredResidual<'_> {
    fn term(&self, _index: usize, (t, x): (f64, f64), jet: &Jet) -> Result<(f64, Jet)> {
        let (r, dr) = self.problem.residual_v(t, x, jet);
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("residual at ({t}, {x}) from jet {jet:?}")));
        }
        let k = 2.0 * r * self.scale;
        Ok((r * r, Jet { v: k * dr.v, t: k * dr.t, x: k * dr.x, xx: k * dr.xx, xxx: k * dr.xxx }))
    }
}

/// Mean squared periodicity mismatch over `ts`, gradient added to `grad`.
fn boundary_term(arch: &Architecture, params: &ParamVector, ts: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
    if ts.is_empty() {
        return Ok(0.0);
    }
    let m = ts.len();
    let mut pts: Vec<(f64, f64)> = ts.iter().map(|&t| (t, -1.0)).collect();
    pts.extend(ts.iter().map(|&t| (t, 1.0)));
    let tape = forward_block(arch, params, &pts, DerivOrders { t: 0, x: 1 })?;
    let mut terms = Vec::with_capacity(m);
    let mut adj = vec![Jet::default(); 2 * m];
    let scale = 2.0 / m as f64;
    for i in 0..m {
        let (l, r) = (tape.jet(i), tape.jet(m + i));
        let (d0, d1) = (l.v - r.v, l.x - r.x);
        terms.push(d0 * d0 + d1 * d1);
        adj[i] = Jet { v: scale * d0, x: scale * d1, ..Jet::default() };
        adj[m + i] = Jet { v: -scale * d0, x: -scale * d1, ..Jet::default() };
    }
    if let Some(g) = grad {
        if let Some(lowest) = params.lowest_trainable_layer() {
            backward_block(arch, params, &tape, &adj, lowest, g);
        }
    }
    Ok(order_free_sum(&terms) / m as f64)
}

/// Mean squared residual over the collocation points plus, for KdV, the
/// mean squared periodicity mismatch over `boundary_ts` (weight 1).
pub struct PdeLoss<'a> {
    pub problem: &'a PdeProblem,
    pub arch: &'a Architecture,
    pub points: &'a [(f64, f64)],
    pub boundary_ts: Option<&'a [f64]>,
}

impl<'a> PdeLoss<'a> {
    pub fn new(
        problem: &'a PdeProblem,
        arch: &'a Architecture,
        colloc: &'a CollocationSet,
        boundary_ts: Option<&'a [f64]>,
    ) -> Result<Self> {
        if colloc.is_empty() {
            return Err(Error::EmptyCollocation);
        }
        if problem.needs_boundary_loss() && boundary_ts.is_none() {
            return Err(Error::Contract("KdV loss needs boundary times".into()));
        }
        Ok(PdeLoss { problem, arch, points: &colloc.points, boundary_ts })
    }
}

impl Objective for PdeLoss<'_> {
    fn evaluate(&self, params: &ParamVector, mut grad: Option<&mut [f64]>) -> Result<f64> {
        if self.points.is_empty() {
            return Err(Error::EmptyCollocation);
        }
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let n = self.points.len() as f64;
        let sq = SquaredResidual { problem: self.problem, scale: 1.0 / n };
        let terms = accumulate_point_loss(
            self.arch,
            params,
            self.points,
            self.problem.orders(),
            &sq,
            grad.as_deref_mut(),
        )?;
        let mut loss = order_free_sum(&terms) / n;
        if self.problem.needs_boundary_loss() {
            if let Some(ts) = self.boundary_ts {
                loss += boundary_term(self.arch, params, ts, grad)?;
            }
        }
        Ok(loss)
    }
}

pub fn pde_loss(
    problem: &PdeProblem,
    arch: &Architecture,
    params: &ParamVector,
    colloc: &CollocationSet,
    boundary_ts: Option<&[f64]>,
) -> Result<f64> {
    PdeLoss::new(problem, arch, colloc, boundary_ts)?.evaluate(params, None)
}

/// A trained or untrained network together with the problem it solves.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnModel {
    pub problem: PdeProblem,
    pub arch: Architecture,
    pub params: ParamVector,
}

impl PinnModel {
    pub fn new(problem: PdeProblem, arch: Architecture, params: ParamVector) -> Result<Self> {
        if params.layout != arch.layout() {
            return Err(Error::Contract("parameter layout does not match the architecture".into()));
        }
        Ok(PinnModel { problem, arch, params })
    }

    /// Solution values `u(t, x)`.
    pub fn predict(&self, points: &[(f64, f64)]) -> Result<Vec<f64>> {
        let v = eval_values(&self.arch, &self.params, points)?;
        Ok(points.iter().zip(v).map(|(&(t, x), v)| self.problem.u_value(t, x, v)).collect())
    }

    pub fn residuals(&self, points: &[(f64, f64)]) -> Result<Vec<f64>> {
        residuals(&self.problem, &self.arch, &self.params, points)
    }
}
