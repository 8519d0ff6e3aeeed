//! Reference solutions by the method of lines: second-order finite
//! differences in space, an adaptive BDF(1-2) Newton integrator in time.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::pde::{Coefficients, Equation, PdeProblem};

/// Evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n)
            .map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Three-point second difference; boundary entries are zero unless periodic.
pub fn d2(u: &[f64], h: f64, periodic: bool) -> Vec<f64> {
    stencil(u, periodic, 1, |w| (w[2] - 2.0 * w[1] + w[0]) / (h * h))
}

/// Centered first difference.
pub fn d1(u: &[f64], h: f64, periodic: bool) -> Vec<f64> {
    stencil(u, periodic, 1, |w| (w[2] - w[0]) / (2.0 * h))
}

/// Five-point centered third difference.
pub fn d3(u: &[f64], h: f64, periodic: bool) -> Vec<f64> {
    stencil(u, periodic, 2, |w| (w[4] - 2.0 * w[3] + 2.0 * w[1] - w[0]) / (2.0 * h * h * h))
}

fn stencil(u: &[f64], periodic: bool, r: usize, op: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let n = u.len();
    let mut out = vec![0.0; n];
    let mut w = vec![0.0; 2 * r + 1];
    for i in 0..n {
        if !periodic && (i < r || i + r >= n) {
            continue;
        }
        for (k, wk) in w.iter_mut().enumerate() {
            *wk = u[(i + n + k - r) % n];
        }
        out[i] = op(&w);
    }
    out
}

/// A stiff system `y' = f(t, y)` with a banded Jacobian. `order()` maps band
/// positions to state indices so cyclic couplings become banded.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Calls `put(i, j, df_i/dy_j)` for every structurally nonzero entry.
    fn jacobian(&self, t: f64, y: &[f64], put: &mut dyn FnMut(usize, usize, f64));
    /// Lower and upper bandwidth in band ordering.
    fn bandwidth(&self) -> (usize, usize);
    fn order(&self) -> Vec<usize> {
        (0..self.dim()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Physics {
    AllenCahn { eps: f64, cubic: f64, linear: f64 },
    Burgers { nu: f64 },
    Kdv { d: f64 },
    Heat { kappa: f64 },
}

/// A PDE on `[-1, 1]` discretized on `n` uniform intervals. Dirichlet
/// problems keep all `n + 1` nodes with frozen boundary values; periodic
/// problems keep `n` nodes with `x = 1` identified with `x = -1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MolSystem {
    physics: Physics,
    pub intervals: usize,
    pub h: f64,
    pub periodic: bool,
}

impl MolSystem {
    pub fn new(equation: Equation, intervals: usize) -> Result<Self> {
        if intervals < 64 {
            return Err(Error::InvalidConfig(format!("need at least 64 intervals, got {intervals}")));
        }
        let physics = match PdeProblem::new(equation).coefficients {
            Coefficients::AllenCahn { diffusion, cubic, linear } => Physics::AllenCahn { eps: diffusion, cubic, linear },
            Coefficients::Burgers { viscosity } => Physics::Burgers { nu: viscosity },
            Coefficients::Kdv { dispersion } => Physics::Kdv { d: dispersion },
        };
        Ok(MolSystem { physics, intervals, h: 2.0 / intervals as f64, periodic: equation == Equation::Kdv })
    }

    /// `u_t = kappa u_xx` with homogeneous Dirichlet data.
    pub fn heat(intervals: usize, kappa: f64) -> Result<Self> {
        let mut s = MolSystem::new(Equation::AllenCahn, intervals)?;
        s.physics = Physics::Heat { kappa };
        Ok(s)
    }

    pub fn nodes(&self) -> Vec<f64> {
        let n = self.intervals;
        let count = if self.periodic { n } else { n + 1 };
        (0..count).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect()
    }

    /// Initial state with the boundary nodes set to the Dirichlet value.
    pub fn initial_state(&self, u0: impl Fn(f64) -> f64, boundary: Option<f64>) -> Vec<f64> {
        let mut y: Vec<f64> = self.nodes().into_iter().map(u0).collect();
        if let (false, Some(b)) = (self.periodic, boundary) {
            let last = y.len() - 1;
            y[0] = b;
            y[last] = b;
        }
        y
    }

    fn interior(&self, i: usize) -> bool {
        self.periodic || (i > 0 && i < self.intervals)
    }
}

impl OdeSystem for MolSystem {
    fn dim(&self) -> usize {
        if self.periodic { self.intervals } else { self.intervals + 1 }
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let h = self.h;
        let p = self.periodic;
        match self.physics {
            Physics::AllenCahn { eps, cubic, linear } => {
                let uxx = d2(y, h, p);
                for i in 0..y.len() {
                    dy[i] = eps * uxx[i] + linear * y[i] - cubic * y[i].powi(3);
                }
            }
            Physics::Burgers { nu } => {
                let ux = d1(y, h, p);
                let uxx = d2(y, h, p);
                for i in 0..y.len() {
                    dy[i] = -y[i] * ux[i] + nu * uxx[i];
                }
            }
            Physics::Kdv { d } => {
                let ux = d1(y, h, p);
                let uxxx = d3(y, h, p);
                for i in 0..y.len() {
                    dy[i] = -y[i] * ux[i] - d * uxxx[i];
                }
            }
            Physics::Heat { kappa } => {
                let uxx = d2(y, h, p);
                for i in 0..y.len() {
                    dy[i] = kappa * uxx[i];
                }
            }
        }
        for (i, v) in dy.iter_mut().enumerate() {
            if !self.interior(i) {
                *v = 0.0;
            }
        }
    }

    fn jacobian(&self, _t: f64, y: &[f64], put: &mut dyn FnMut(usize, usize, f64)) {
        let n = y.len();
        let h = self.h;
        let at = |i: usize, k: isize| ((i as isize + k).rem_euclid(n as isize)) as usize;
        for i in (0..n).filter(|&i| self.interior(i)) {
            let (l1, r1) = (at(i, -1), at(i, 1));
            match self.physics {
                Physics::AllenCahn { eps, cubic, linear } => {
                    put(i, i, -2.0 * eps / (h * h) + linear - 3.0 * cubic * y[i] * y[i]);
                    put(i, l1, eps / (h * h));
                    put(i, r1, eps / (h * h));
                }
                Physics::Heat { kappa } => {
                    put(i, i, -2.0 * kappa / (h * h));
                    put(i, l1, kappa / (h * h));
                    put(i, r1, kappa / (h * h));
                }
                Physics::Burgers { nu } => {
                    let ux = (y[r1] - y[l1]) / (2.0 * h);
                    put(i, i, -ux - 2.0 * nu / (h * h));
                    put(i, l1, y[i] / (2.0 * h) + nu / (h * h));
                    put(i, r1, -y[i] / (2.0 * h) + nu / (h * h));
                }
                Physics::Kdv { d } => {
                    let ux = (y[r1] - y[l1]) / (2.0 * h);
                    let h3 = h * h * h;
                    put(i, i, -ux);
                    put(i, l1, y[i] / (2.0 * h) - d / h3);
                    put(i, r1, -y[i] / (2.0 * h) + d / h3);
                    put(i, at(i, -2), d / (2.0 * h3));
                    put(i, at(i, 2), -d / (2.0 * h3));
                }
            }
        }
    }

    fn bandwidth(&self) -> (usize, usize) {
        if self.periodic {
            (4, 4)
        } else {
            (1, 1)
        }
    }

    /// Periodic systems interleave both ends, `0, n-1, 1, n-2, ...`, which
    /// turns the wraparound couplings into a band of half-width 4.
    fn order(&self) -> Vec<usize> {
        let n = self.dim();
        if !self.periodic {
            return (0..n).collect();
        }
        (0..n).map(|p| if p % 2 == 0 { p / 2 } else { n - 1 - p / 2 }).collect()
    }
}

/// Band matrix with room for partial-pivoting fill.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    w: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let w = 2 * kl + ku + 1;
        BandLu { n, kl, ku, w, a: vec![0.0; n * w], piv: vec![0; n] }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.w + j + self.kl - i
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && j <= i + self.ku
    }

    pub fn clear(&mut self) {
        self.a.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.a[k] += v;
    }

    /// In-place LU with row pivoting.
    pub fn factor(&mut self) -> Result<()> {
        let n = self.n;
        let reach = self.kl + self.ku;
        for k in 0..n {
            let last_row = (k + self.kl).min(n - 1);
            let mut p = k;
            let mut best = self.a[self.idx(k, k)].abs();
            for r in k + 1..=last_row {
                let v = self.a[self.idx(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Integrator { t: f64::NAN, detail: format!("singular Newton matrix at column {k}") });
            }
            self.piv[k] = p;
            let last_col = (k + reach).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (self.idx(k, j), self.idx(p, j));
                    self.a.swap(a, b);
                }
            }
            let pivot = self.a[self.idx(k, k)];
            for r in k + 1..=last_row {
                let ir = self.idx(r, k);
                let m = self.a[ir] / pivot;
                self.a[ir] = m;
                if m != 0.0 {
                    for j in k + 1..=last_col {
                        let kj = self.a[self.idx(k, j)];
                        let rj = self.idx(r, j);
                        self.a[rj] -= m * kj;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let reach = self.kl + self.ku;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let last_row = (k + self.kl).min(n - 1);
            for r in k + 1..=last_row {
                b[r] -= self.a[self.idx(r, k)] * b[k];
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + reach).min(n - 1);
            let mut s = b[k];
            for j in k + 1..=last_col {
                s -= self.a[self.idx(k, j)] * b[j];
            }
            b[k] = s / self.a[self.idx(k, k)];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_initial: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig { rtol: 1e-6, atol: 1e-8, h_initial: 1e-6, h_min: 1e-14, max_steps: 2_000_000 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub steps: usize,
    pub rejected: usize,
    pub newton_failures: usize,
    pub rhs_evals: usize,
}

const UNIT_STEP_CAP: f64 = 1e3;

fn wrms(d: &[f64], w: &[f64]) -> f64 {
    let s: f64 = d.iter().zip(w).map(|(a, b)| (a / b) * (a / b)).sum();
    (s / d.len() as f64).sqrt()
}

/// Lagrange interpolation through `(ts[k], ys[k])` at `t`.
fn lagrange(ts: &[f64], ys: &[&[f64]], t: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (k, yk) in ys.iter().enumerate() {
        let mut l = 1.0;
        for (j, tj) in ts.iter().enumerate() {
            if j != k {
                l *= (t - tj) / (ts[k] - tj);
            }
        }
        if l != 0.0 {
            for (o, v) in out.iter_mut().zip(yk.iter()) {
                *o += l * v;
            }
        }
    }
}

/// Integrates from `t_out[0]` to the last output time and returns the state
/// at every output time. Order 1 on the first two steps, variable-step BDF2
/// afterwards; output between steps by quadratic interpolation.
pub fn integrate(
    sys: &dyn OdeSystem,
    y0: &[f64],
    t_out: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(Vec<Vec<f64>>, IntegrationStats)> {
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::Contract(format!("state has {} entries, system has {n}", y0.len())));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    if t_out.is_empty() || t_out.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Contract("output times must be strictly increasing".into()));
    }
    let order = sys.order();
    let mut pos = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let (kl, ku) = sys.bandwidth();
    let mut lu = BandLu::zeros(n, kl, ku);

    let mut stats = IntegrationStats::default();
    let t0 = t_out[0];
    let t_end = *t_out.last().unwrap();
    let mut out = vec![y0.to_vec()];
    let mut next_out = 1;
    let mut hist: VecDeque<(f64, Vec<f64>)> = VecDeque::from([(t0, y0.to_vec())]);
    let mut h = cfg.h_initial.min(t_end - t0);
    let mut f_buf = vec![0.0; n];
    let mut yp = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut base = vec![0.0; n];
    let mut wts = vec![0.0; n];

    while next_out < t_out.len() {
        if stats.steps >= cfg.max_steps {
            return Err(Error::Integrator { t: hist.back().unwrap().0, detail: "step budget exhausted".into() });
        }
        let (tn, yn) = hist.back().map(|(t, y)| (*t, y.clone())).unwrap();
        if t_end - tn < 1e-3 * h {
            h = t_end - tn;
        } else {
            h = h.min(t_end - tn);
        }
        let t1 = tn + h;
        let k = if hist.len() >= 3 { 2 } else { 1 };

        // predictor and error constant
        let err_factor = match hist.len() {
            1 => {
                sys.rhs(tn, &yn, &mut f_buf);
                stats.rhs_evals += 1;
                for i in 0..n {
                    yp[i] = yn[i] + h * f_buf[i];
                }
                0.5
            }
            _ => {
                let m = hist.len().min(3);
                let pts: Vec<&(f64, Vec<f64>)> = hist.iter().skip(hist.len() - m).collect();
                let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let ys: Vec<&[f64]> = pts.iter().map(|p| p.1.as_slice()).collect();
                lagrange(&ts, &ys, t1, &mut yp);
                h / (t1 - ts[0])
            }
        };
        let (beta, a1, a2) = if k == 1 {
            (1.0, 1.0, 0.0)
        } else {
            let h_prev = tn - hist[hist.len() - 2].0;
            let w = h / h_prev;
            ((1.0 + w) / (1.0 + 2.0 * w), (1.0 + w).powi(2) / (1.0 + 2.0 * w), -w * w / (1.0 + 2.0 * w))
        };
        for i in 0..n {
            base[i] = a1 * yn[i];
        }
        if k == 2 {
            let ym1 = &hist[hist.len() - 2].1;
            for i in 0..n {
                base[i] += a2 * ym1[i];
            }
        }
        for i in 0..n {
            wts[i] = cfg.atol + cfg.rtol * yn[i].abs();
        }

        // Newton on y - base - beta h f(t1, y) = 0
        lu.clear();
        for p in 0..n {
            lu.add(p, p, 1.0);
        }
        let mut band_ok = true;
        sys.jacobian(t1, &yp, &mut |i, j, v| {
            let (pi, pj) = (pos[i], pos[j]);
            if lu.in_band(pi, pj) {
                lu.add(pi, pj, -beta * h * v);
            } else {
                band_ok = false;
            }
        });
        if !band_ok {
            return Err(Error::Contract("Jacobian entry outside the declared band".into()));
        }
        let mut converged = lu.factor().is_ok();
        if converged {
            y.copy_from_slice(&yp);
            converged = false;
            let mut prev_norm = f64::INFINITY;
            let newton_tol = 1e-3 / ((t_end - t0) / h).clamp(1.0, UNIT_STEP_CAP);
            for _ in 0..6 {
                sys.rhs(t1, &y, &mut f_buf);
                stats.rhs_evals += 1;
                let mut delta = vec![0.0; n];
                for i in 0..n {
                    g[i] = -(y[i] - base[i] - beta * h * f_buf[i]);
                }
                for (p, &i) in order.iter().enumerate() {
                    delta[p] = g[i];
                }
                lu.solve(&mut delta);
                let mut dnorm = 0.0;
                for (p, &i) in order.iter().enumerate() {
                    y[i] += delta[p];
                    dnorm += (delta[p] / wts[i]).powi(2);
                }
                let dnorm = (dnorm / n as f64).sqrt();
                if !dnorm.is_finite() || dnorm > 2.0 * prev_norm {
                    break;
                }
                // remaining error of a contracting iteration, rate / (1 - rate) * |delta|
                let rate = dnorm / prev_norm;
                let remaining = if rate < 1.0 { rate / (1.0 - rate) * dnorm } else { f64::INFINITY };
                if remaining < newton_tol || dnorm < 1e-15 / cfg.rtol {
                    converged = true;
                    break;
                }
                prev_norm = dnorm;
            }
        }
        if !converged {
            stats.newton_failures += 1;
            h *= 0.25;
            if h < cfg.h_min {
                return Err(Error::Integrator { t: tn, detail: "Newton iteration failed at the step-size floor".into() });
            }
            continue;
        }

        for i in 0..n {
            wts[i] = cfg.atol + cfg.rtol * yn[i].abs().max(y[i].abs());
            g[i] = y[i] - yp[i];
        }
        // error per unit step keeps the accumulated error near the tolerance;
        // the cap stops rounding noise from dominating on tiny starting steps
        let err = err_factor * wrms(&g, &wts) * ((t_end - t0) / h).min(UNIT_STEP_CAP);
        let fac = if err == 0.0 { 2.0 } else { (0.9 * err.powf(-1.0 / k as f64)).clamp(0.2, 2.0) };
        if !(err <= 1.0) {
            stats.rejected += 1;
            h *= fac.min(0.9);
            if h < cfg.h_min {
                return Err(Error::Integrator { t: tn, detail: "step size underflow".into() });
            }
            continue;
        }

        stats.steps += 1;
        hist.push_back((t1, y.clone()));
        if hist.len() > 3 {
            hist.pop_front();
        }
        while next_out < t_out.len() && t_out[next_out] <= t1 + 1e-14 * t1.abs().max(1.0) {
            let m = hist.len().min(3);
            let ts: Vec<f64> = hist.iter().skip(hist.len() - m).map(|p| p.0).collect();
            let ys: Vec<&[f64]> = hist.iter().skip(hist.len() - m).map(|p| p.1.as_slice()).collect();
            let mut yo = vec![0.0; n];
            lagrange(&ts, &ys, t_out[next_out].min(t1), &mut yo);
            out.push(yo);
            next_out += 1;
        }
        h *= fac;
    }
    Ok((out, stats))
}

/// Four-point Lagrange interpolation of node values onto `targets`.
pub fn downsample(nodes: &[f64], values: &[f64], periodic: bool, targets: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let h = nodes[1] - nodes[0];
    let span = if periodic { h * n as f64 } else { 0.0 };
    targets
        .iter()
        .map(|&x| {
            let s = (x - nodes[0]) / h;
            let mut i = s.floor() as isize;
            if !periodic {
                i = i.clamp(1, n as isize - 3);
            }
            let node = |k: isize| -> (f64, f64) {
                if periodic {
                    let wrapped = k.rem_euclid(n as isize) as usize;
                    let shift = (k - wrapped as isize) / n as isize;
                    (nodes[wrapped] + shift as f64 * span, values[wrapped])
                } else {
                    (nodes[k as usize], values[k as usize])
                }
            };
            let mut acc = 0.0;
            for a in -1..=2isize {
                let (xk, vk) = node(i + a);
                let mut l = 1.0;
                for b in -1..=2isize {
                    if b != a {
                        let xb = node(i + b).0;
                        l *= (x - xb) / (xk - xb);
                    }
                }
                acc += l * vk;
            }
            acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub rtol: f64,
    pub atol: f64,
    pub scheme: String,
    pub nx_internal: usize,
}

/// Reference solution sampled on a uniform space-time grid; `u` is
/// row-major with one row per output time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGrid {
    pub equation: Equation,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    pub meta: SolverMeta,
}

/// Evaluation grid and solver settings for one equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub nx: usize,
    pub nt: usize,
    pub nx_internal: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl GridSpec {
    pub fn standard(equation: Equation) -> Self {
        let (nx, nt) = match equation {
            Equation::AllenCahn => (400, 201),
            Equation::Kdv => (500, 201),
            Equation::Burgers => (600, 101),
        };
        GridSpec { nx, nt, nx_internal: 1024, rtol: 1e-6, atol: 1e-8 }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::standard(Equation::AllenCahn)
    }
}

pub const SCHEME: &str = "mol-fd2-bdf12";

impl ReferenceGrid {
    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn nt(&self) -> usize {
        self.t.len()
    }

    pub fn at(&self, ti: usize, xi: usize) -> f64 {
        self.u[ti * self.nx() + xi]
    }

    pub fn row(&self, ti: usize) -> &[f64] {
        &self.u[ti * self.nx()..(ti + 1) * self.nx()]
    }

    /// Index of the time row closest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let dt = (self.t[self.nt() - 1] - self.t[0]) / (self.nt() - 1) as f64;
        (((t - self.t[0]) / dt).round().max(0.0) as usize).min(self.nt() - 1)
    }

    /// `|M(t_end) - M(0)| / M_abs(0)` with `M = sum u dx` over one period
    /// (the duplicated `x = 1` column is dropped).
    pub fn mass_drift(&self) -> f64 {
        let m = self.nx() - 1;
        let first = &self.row(0)[..m];
        let last = &self.row(self.nt() - 1)[..m];
        let scale: f64 = first.iter().map(|v| v.abs()).sum();
        (last.iter().sum::<f64>() - first.iter().sum::<f64>()).abs() / scale
    }

    pub fn check(&self) -> Result<()> {
        if self.u.len() != self.nx() * self.nt() {
            return Err(Error::Format(format!("payload has {} values, expected {}", self.u.len(), self.nx() * self.nt())));
        }
        if let Some(i) = self.u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reference value at row {}, column {}", i / self.nx(), i % self.nx())));
        }
        if let Some(b) = self.equation.dirichlet() {
            for ti in 0..self.nt() {
                let row = self.row(ti);
                for v in [row[0], row[row.len() - 1]] {
                    if (v - b).abs() >= 1e-12 {
                        return Err(Error::Contract(format!("boundary value {v} at t = {}", self.t[ti])));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "PINNX-GRID v1")?;
        writeln!(w, "equation={}", self.equation.id())?;
        writeln!(w, "nx={}", self.nx())?;
        writeln!(w, "nt={}", self.nt())?;
        writeln!(w, "x_min={:?}", self.x[0])?;
        writeln!(w, "x_max={:?}", self.x[self.nx() - 1])?;
        writeln!(w, "t_min={:?}", self.t[0])?;
        writeln!(w, "t_max={:?}", self.t[self.nt() - 1])?;
        writeln!(w, "rtol={:?}", self.meta.rtol)?;
        writeln!(w, "atol={:?}", self.meta.atol)?;
        writeln!(w, "scheme={}", self.meta.scheme)?;
        writeln!(w, "nx_internal={}", self.meta.nx_internal)?;
        writeln!(w, "end_header")?;
        let mut buf = Vec::with_capacity(self.u.len() * 8);
        for v in &self.u {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = std::collections::HashMap::new();
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != "PINNX-GRID v1" {
            return Err(Error::Format("not a reference grid file".into()));
        }
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("header ended early".into()));
            }
            let l = line.trim_end();
            if l == "end_header" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Format(format!("bad header line {l:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Format(format!("header lacks {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
        let equation = Equation::from_id(get("equation")?).ok_or_else(|| Error::Format("unknown equation".into()))?;
        let (nx, nt) = (int("nx")?, int("nt")?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != nx * nt * 8 {
            return Err(Error::Format(format!("payload has {} bytes, expected {}", bytes.len(), nx * nt * 8)));
        }
        let u = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let grid = ReferenceGrid {
            equation,
            x: linspace(num("x_min")?, num("x_max")?, nx),
            t: linspace(num("t_min")?, num("t_max")?, nt),
            u,
            meta: SolverMeta { rtol: num("rtol")?, atol: num("atol")?, scheme: get("scheme")?.clone(), nx_internal: int("nx_internal")? },
        };
        grid.check()?;
        Ok(grid)
    }

    /// Long-format CSV `t,x,u`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,u")?;
        for (ti, t) in self.t.iter().enumerate() {
            for (xi, x) in self.x.iter().enumerate() {
                writeln!(w, "{t:?},{x:?},{:?}", self.at(ti, xi))?;
            }
        }
        Ok(())
    }
}

/// Solves on the internal grid and returns the state at each output time.
pub fn solve_internal(equation: Equation, nx_internal: usize, times: &[f64], cfg: &IntegratorConfig) -> Result<(MolSystem, Vec<Vec<f64>>)> {
    let sys = MolSystem::new(equation, nx_internal)?;
    let y0 = sys.initial_state(|x| equation.initial(x), equation.dirichlet());
    let (states, _) = integrate(&sys, &y0, times, cfg)?;
    Ok((sys, states))
}

pub fn generate_reference(equation: Equation, spec: &GridSpec) -> Result<ReferenceGrid> {
    let x = linspace(-1.0, 1.0, spec.nx);
    let t = linspace(0.0, 1.0, spec.nt);
    let cfg = IntegratorConfig { rtol: spec.rtol, atol: spec.atol, ..IntegratorConfig::default() };
    let (sys, states) = solve_internal(equation, spec.nx_internal, &t, &cfg)?;
    let nodes = sys.nodes();
    let mut u = Vec::with_capacity(spec.nx * spec.nt);
    u.extend(x.iter().map(|&xi| equation.initial(xi)));
    if let Some(b) = equation.dirichlet() {
        u[0] = b;
        u[spec.nx - 1] = b;
    }
    for state in &states[1..] {
        u.extend(downsample(&nodes, state, sys.periodic, &x));
    }
    let grid = ReferenceGrid {
        equation,
        x,
        t,
        u,
        meta: SolverMeta { rtol: spec.rtol, atol: spec.atol, scheme: SCHEME.into(), nx_internal: spec.nx_internal },
    };
    grid.check()?;
    Ok(grid)
}

/// Differences between final-time solutions at `n`, `2n` and `4n`
/// intervals, measured on the coarse nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub nx: usize,
    pub diff_coarse: f64,
    pub diff_fine: f64,
    pub ratio: f64,
}

pub fn convergence_study(equation: Equation, nx: usize, t_final: f64, cfg: &IntegratorConfig) -> Result<ConvergenceReport> {
    let times = [0.0, t_final];
    let finals: Vec<Vec<f64>> = [nx, 2 * nx, 4 * nx]
        .iter()
        .map(|&n| solve_internal(equation, n, &times, cfg).map(|(_, s)| s[1].clone()))
        .collect::<Result<_>>()?;
    let coarse_len = finals[0].len();
    let on_coarse = |v: &[f64], stride: usize| -> Vec<f64> { (0..coarse_len).map(|i| v[i * stride]).collect() };
    let (a, b, c) = (finals[0].clone(), on_coarse(&finals[1], 2), on_coarse(&finals[2], 4));
    let norm = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (diff_coarse, diff_fine) = (norm(&a, &b), norm(&b, &c));
    Ok(ConvergenceReport { nx, diff_coarse, diff_fine, ratio: diff_coarse / diff_fine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = -y[0];
        }
        fn jacobian(&self, _t: f64, _y: &[f64], put: &mut dyn FnMut(usize, usize, f64)) {
            put(0, 0, -1.0);
        }
        fn bandwidth(&self) -> (usize, usize) {
            (0, 0)
        }
    }

    #[test]
    fn stencils_on_polynomials_and_sines() {
        let n = 100;
        let h = 2.0 / n as f64;
        let x: Vec<f64> = (0..=n).map(|i| -1.0 + i as f64 * h).collect();
        let q: Vec<f64> = x.iter().map(|x| 3.0 * x * x - x + 2.0).collect();
        for v in &d2(&q, h, false)[1..n] {
            assert!((v - 6.0).abs() < 1e-9);
        }
        let errs: Vec<f64> = [256usize, 512]
            .iter()
            .map(|&m| {
                let h = 2.0 / m as f64;
                let x: Vec<f64> = (0..m).map(|i| -1.0 + i as f64 * h).collect();
                let u: Vec<f64> = x.iter().map(|x| (PI * x).sin()).collect();
                d3(&u, h, true).iter().zip(&x).map(|(d, x)| (d + PI.powi(3) * (PI * x).cos()).abs()).fold(0.0, f64::max)
            })
            .collect();
        let ratio = errs[0] / errs[1];
        assert!((3.8..4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn allen_cahn_rhs_on_constant_interior() {
        let sys = MolSystem::new(Equation::AllenCahn, 64).unwrap();
        let mut y = vec![1.0; sys.dim()];
        y[0] = -1.0;
        y[64] = -1.0;
        let mut dy = vec![0.0; y.len()];
        sys.rhs(0.0, &y, &mut dy);
        assert_eq!(dy[0], 0.0);
        assert_eq!(dy[64], 0.0);
        let eps = 1e-4;
        assert!((dy[1] - eps * (-2.0) / (sys.h * sys.h)).abs() < 1e-12);
        for v in &dy[2..63] {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn jacobians_match_differences_of_rhs() {
        for eq in Equation::ALL {
            let sys = MolSystem::new(eq, 64).unwrap();
            let n = sys.dim();
            let y: Vec<f64> = sys.nodes().iter().map(|x| 0.3 + (2.0 * x).sin() * 0.7).collect();
            let mut dense = vec![vec![0.0; n]; n];
            sys.jacobian(0.0, &y, &mut |i, j, v| dense[i][j] += v);
            let mut f0 = vec![0.0; n];
            let mut f1 = vec![0.0; n];
            for j in [0, 1, 5, n / 2, n - 2, n - 1] {
                let mut yp = y.clone();
                let mut ym = y.clone();
                let e = 1e-6;
                yp[j] += e;
                ym[j] -= e;
                sys.rhs(0.0, &yp, &mut f0);
                sys.rhs(0.0, &ym, &mut f1);
                for i in 0..n {
                    let fd = (f0[i] - f1[i]) / (2.0 * e);
                    assert!((fd - dense[i][j]).abs() < 1e-5 * (1.0 + fd.abs()), "{eq} ({i},{j}): {fd} vs {}", dense[i][j]);
                }
            }
            // every entry lies in the declared band under the ordering
            let order = sys.order();
            let mut pos = vec![0; n];
            for (p, &i) in order.iter().enumerate() {
                pos[i] = p;
            }
            let (kl, ku) = sys.bandwidth();
            for i in 0..n {
                for j in 0..n {
                    if dense[i][j] != 0.0 {
                        let (pi, pj) = (pos[i] as isize, pos[j] as isize);
                        assert!(pj - pi <= ku as isize && pi - pj <= kl as isize);
                    }
                }
            }
        }
    }

    #[test]
    fn band_lu_solves_against_dense() {
        let n = 12;
        let (kl, ku) = (2, 3);
        let mut band = BandLu::zeros(n, kl, ku);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if j + kl >= i && j <= i + ku {
                    // small diagonal forces pivoting
                    let v = if i == j { 0.01 } else { ((i * 7 + j * 3) % 11) as f64 - 5.0 };
                    band.add(i, j, v);
                    dense[i][j] = v;
                }
            }
        }
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 3.5).collect();
        let mut b: Vec<f64> = (0..n).map(|i| (0..n).map(|j| dense[i][j] * x[j]).sum()).collect();
        band.factor().unwrap();
        band.solve(&mut b);
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn scalar_decay() {
        let (ys, _) = integrate(&Decay, &[1.0], &[0.0, 0.5, 1.0], &IntegratorConfig::default()).unwrap();
        let e = (-1.0f64).exp();
        assert!(((ys[2][0] - e) / e).abs() < 1e-6, "{}", ys[2][0]);
        assert_eq!(ys[0][0], 1.0);
    }

    #[test]
    fn heat_equation_closed_form() {
        let sys = MolSystem::heat(400, 1.0).unwrap();
        let y0 = sys.initial_state(|x| (PI * x).sin(), Some(0.0));
        let times = linspace(0.0, 0.5, 11);
        let (ys, _) = integrate(&sys, &y0, &times, &IntegratorConfig::default()).unwrap();
        let nodes = sys.nodes();
        for (t, y) in times.iter().zip(&ys) {
            for (x, v) in nodes.iter().zip(y) {
                let exact = (-PI * PI * t).exp() * (PI * x).sin();
                assert!((v - exact).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn downsample_reproduces_cubics() {
        let nodes = linspace(-1.0, 1.0, 65);
        let vals: Vec<f64> = nodes.iter().map(|x| x * x * x - 2.0 * x + 0.5).collect();
        let targets = linspace(-1.0, 1.0, 400);
        for (x, v) in targets.iter().zip(downsample(&nodes, &vals, false, &targets)) {
            assert!((v - (x * x * x - 2.0 * x + 0.5)).abs() < 1e-12);
        }
        let pn: Vec<f64> = (0..64).map(|i| -1.0 + i as f64 / 32.0).collect();
        let pv: Vec<f64> = pn.iter().map(|x| (PI * x).cos()).collect();
        let out = downsample(&pn, &pv, true, &[1.0, -1.0, 0.999]);
        assert!((out[0] - out[1]).abs() < 1e-15);
        assert!((out[2] - (PI * 0.999).cos()).abs() < 1e-5);
    }

    #[test]
    fn grid_file_round_trip() {
        let grid = ReferenceGrid {
            equation: Equation::Burgers,
            x: linspace(-1.0, 1.0, 5),
            t: linspace(0.0, 1.0, 3),
            u: vec![0.0, 0.1, -0.3, 1.0 / 3.0, 0.0, 0.0, 2.0, 3.0, 4.0, 0.0, 0.0, 1e-300, 5.0, 6.0, 0.0],
            meta: SolverMeta { rtol: 1e-6, atol: 1e-8, scheme: SCHEME.into(), nx_internal: 1024 },
        };
        let mut buf = Vec::new();
        grid.write(&mut buf).unwrap();
        let back = ReferenceGrid::read(buf.as_slice()).unwrap();
        assert_eq!(back, grid);
        let mut bad = buf.clone();
        bad.truncate(bad.len() - 3);
        assert!(ReferenceGrid::read(bad.as_slice()).is_err());
        let mut csv = Vec::new();
        grid.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 16);
    }

    #[test]
    fn allen_cahn_reference_properties() {
        let spec = GridSpec::standard(Equation::AllenCahn);
        let grid = generate_reference(Equation::AllenCahn, &spec).unwrap();
        assert_eq!((grid.nx(), grid.nt()), (400, 201));
        for (xi, x) in grid.x.iter().enumerate() {
            assert_eq!(grid.at(0, xi), x * x * (PI * x).cos());
        }
        grid.check().unwrap();
        let again = generate_reference(Equation::AllenCahn, &spec).unwrap();
        assert!(grid.u.iter().zip(&again.u).all(|(a, b)| a.to_bits() == b.to_bits()));

        let tight = generate_reference(Equation::AllenCahn, &GridSpec { rtol: 5e-7, atol: 5e-9, ..spec }).unwrap();
        let (a, b) = (grid.row(200), tight.row(200));
        let num: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        let den: f64 = b.iter().map(|q| q * q).sum();
        assert!((num / den).sqrt() < 1e-5);
    }

    #[test]
    fn burgers_stays_odd() {
        let (sys, states) = solve_internal(Equation::Burgers, 1024, &[0.0, 0.5], &IntegratorConfig::default()).unwrap();
        let mid = sys.nodes().iter().position(|x| *x == 0.0).unwrap();
        assert!(states[1][mid].abs() < 0.05);
        assert_eq!(states[1][0], 0.0);
        assert_eq!(states[1][1024], 0.0);
    }

    #[test]
    fn interleaved_order_is_a_permutation() {
        let sys = MolSystem::new(Equation::Kdv, 64).unwrap();
        let mut o = sys.order();
        o.sort();
        assert_eq!(o, (0..64).collect::<Vec<_>>());
    }
}
