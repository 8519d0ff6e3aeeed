//! Exact input derivatives and parameter gradients for the surrogate network.
//!
//! Forward propagation carries a truncated Taylor jet in the inputs
//! (`v, v_t, v_x, v_xx, v_xxx`) through every layer; activations use the
//! univariate chain rule (Faa di Bruno up to third order). The backward pass
//! is the hand-derived adjoint of that jet computation, so the gradient of any
//! loss built from jets is exact, including the derivative terms inside PDE
//! residuals.
//!
//! Points are processed in blocks stored as `(components * points) x width`
//! matrices so each affine layer becomes a single GEMM.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{Derivs, Resolved};
use crate::error::{Error, Result};
use crate::network::{Architecture, ParamVector, INPUT_DIM};

/// Points per block. The block partition is fixed, so reductions do not
/// depend on the number of worker threads.
pub const BLOCK: usize = 256;

/// Requested derivative orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivOrders {
    pub t: usize,
    pub x: usize,
}

impl DerivOrders {
    pub const VALUE: DerivOrders = DerivOrders { t: 0, x: 0 };

    pub fn new(t: usize, x: usize) -> Result<Self> {
        if t > 1 || x > 3 {
            return Err(Error::Contract(format!("derivative orders t={t}, x={x} out of range")));
        }
        Ok(DerivOrders { t, x })
    }

    fn components(self) -> usize {
        1 + self.t + self.x
    }

    fn max_order(self) -> usize {
        self.x.max(self.t)
    }
}

/// Value and partial derivatives of a scalar field at one point. Only the
/// requested orders are present.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DerivBundle {
    pub u: f64,
    pub du_dt: Option<f64>,
    pub du_dx: Option<f64>,
    pub d2u_dx2: Option<f64>,
    pub d3u_dx3: Option<f64>,
}

impl DerivBundle {
    fn from_jet(j: &Jet, orders: DerivOrders) -> Self {
        DerivBundle {
            u: j.v,
            du_dt: (orders.t >= 1).then_some(j.t),
            du_dx: (orders.x >= 1).then_some(j.x),
            d2u_dx2: (orders.x >= 2).then_some(j.xx),
            d3u_dx3: (orders.x >= 3).then_some(j.xxx),
        }
    }

    pub fn is_finite(&self) -> bool {
        [Some(self.u), self.du_dt, self.du_dx, self.d2u_dx2, self.d3u_dx3]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Jet of a scalar field at one point; absent orders are zero. Also used for
/// adjoints (sensitivity of a loss to each jet component).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub t: f64,
    pub x: f64,
    pub xx: f64,
    pub xxx: f64,
}

/// Row offsets of each jet component inside a stacked block.
#[derive(Debug, Clone, Copy)]
struct CompIndex {
    t: Option<usize>,
    x: Option<usize>,
    xx: Option<usize>,
    xxx: Option<usize>,
}

impl CompIndex {
    fn new(orders: DerivOrders) -> Self {
        let xbase = 1 + orders.t;
        CompIndex {
            t: (orders.t >= 1).then_some(1),
            x: (orders.x >= 1).then_some(xbase),
            xx: (orders.x >= 2).then_some(xbase + 1),
            xxx: (orders.x >= 3).then_some(xbase + 2),
        }
    }
}

struct LayerTape {
    /// Pre-activation jets `z`.
    z: Array2<f64>,
    /// Post-activation jets `h` (input of the next layer).
    h: Array2<f64>,
    /// Activation derivatives at each value entry of `z`.
    derivs: Vec<Derivs>,
}

/// Forward results for one block of points, with enough stored state to run
/// the backward pass.
pub struct BlockTape {
    points: usize,
    orders: DerivOrders,
    input: Array2<f64>,
    hidden: Vec<LayerTape>,
    out: Vec<Jet>,
}

impl BlockTape {
    pub fn len(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    pub fn jet(&self, p: usize) -> &Jet {
        &self.out[p]
    }

    pub fn jets(&self) -> &[Jet] {
        &self.out
    }
}

fn weight_view<'a>(params: &'a ParamVector, layer: usize) -> ArrayView2<'a, f64> {
    let slot = &params.layout.layers[layer];
    ArrayView2::from_shape((slot.fan_out, slot.fan_in), params.weights(layer))
        .expect("layout shape")
}

fn check_params(arch: &Architecture, params: &ParamVector) -> Result<()> {
    if params.layout != arch.layout() {
        return Err(Error::Contract("parameter layout does not match architecture".into()));
    }
    for (l, slot) in params.layout.layers.iter().enumerate() {
        let bad = params.values[slot.weights.clone()]
            .iter()
            .chain(&params.values[slot.bias.clone()])
            .chain(params.layout.activations.get(l).map_or(&[][..], |r| &params.values[r.clone()]))
            .any(|v| !v.is_finite());
        if bad {
            return Err(Error::NonFiniteLayer { layer: l, detail: "parameter".into() });
        }
    }
    Ok(())
}

/// Pushes a stacked pre-activation block through an activation. Returns the
/// activated block and the activation derivatives at each pre-activation
/// value (through one order above what the forward pass needs, for reuse by
/// the backward pass).
fn activate(z: &Array2<f64>, act: &Resolved, points: usize, orders: DerivOrders) -> (Array2<f64>, Vec<Derivs>) {
    let ci = CompIndex::new(orders);
    let kmax = orders.max_order();
    let width = z.ncols();
    let mut h = Array2::<f64>::zeros(z.raw_dim());
    let mut cache = Vec::with_capacity(points * width);
    let zs = z.as_slice().expect("standard layout");
    let hs = h.as_slice_mut().expect("standard layout");
    let stride = points * width;
    for e in 0..stride {
        let d = act.derivs(zs[e], kmax + 1);
        hs[e] = d[0];
        if let Some(r) = ci.t {
            hs[r * stride + e] = d[1] * zs[r * stride + e];
        }
        if let Some(r) = ci.x {
            let zx = zs[r * stride + e];
            hs[r * stride + e] = d[1] * zx;
            if let Some(r2) = ci.xx {
                let zxx = zs[r2 * stride + e];
                hs[r2 * stride + e] = d[2] * zx * zx + d[1] * zxx;
                if let Some(r3) = ci.xxx {
                    let zxxx = zs[r3 * stride + e];
                    hs[r3 * stride + e] = d[3] * zx * zx * zx + 3.0 * d[2] * zx * zxx + d[1] * zxxx;
                }
            }
        }
        cache.push(d);
    }
    (h, cache)
}

/// Runs the network on a block of points, keeping the tape.
pub fn forward_block(
    arch: &Architecture,
    params: &ParamVector,
    points: &[(f64, f64)],
    orders: DerivOrders,
) -> Result<BlockTape> {
    check_params(arch, params)?;
    forward_block_unchecked(arch, params, points, orders)
}

fn forward_block_unchecked(
    arch: &Architecture,
    params: &ParamVector,
    points: &[(f64, f64)],
    orders: DerivOrders,
) -> Result<BlockTape> {
    let np = points.len();
    let nc = orders.components();
    let ci = CompIndex::new(orders);
    let mut input = Array2::<f64>::zeros((nc * np, INPUT_DIM));
    for (p, &(t, x)) in points.iter().enumerate() {
        if !t.is_finite() || !x.is_finite() {
            return Err(Error::NonFiniteLayer { layer: 0, detail: format!("input ({t}, {x})") });
        }
        input[[p, 0]] = t;
        input[[p, 1]] = x;
        if let Some(r) = ci.t {
            input[[r * np + p, 0]] = 1.0;
        }
        if let Some(r) = ci.x {
            input[[r * np + p, 1]] = 1.0;
        }
    }

    let mut hidden: Vec<LayerTape> = Vec::with_capacity(arch.hidden_layers());
    for (l, kind) in arch.hidden.iter().enumerate() {
        let prev = hidden.last().map_or(&input, |t| &t.h);
        let mut z = prev.dot(&weight_view(params, l).t());
        {
            let bias = params.bias(l);
            let mut vblock = z.slice_mut(s![..np, ..]);
            for mut row in vblock.rows_mut() {
                for (zj, bj) in row.iter_mut().zip(bias) {
                    *zj += bj;
                }
            }
        }
        let act = kind.resolve(params.activation_coeffs(l));
        let (h, derivs) = activate(&z, &act, np, orders);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLayer { layer: l, detail: "activation output".into() });
        }
        hidden.push(LayerTape { z, h, derivs });
    }

    let out_layer = params.layout.output_layer();
    let last = hidden.last().map_or(&input, |t| &t.h);
    let w_out = weight_view(params, out_layer);
    let b_out = params.bias(out_layer)[0];
    let y = last.dot(&w_out.t());
    let mut out = vec![Jet::default(); np];
    for (p, jet) in out.iter_mut().enumerate() {
        jet.v = y[[p, 0]] + b_out;
        if let Some(r) = ci.t {
            jet.t = y[[r * np + p, 0]];
        }
        if let Some(r) = ci.x {
            jet.x = y[[r * np + p, 0]];
        }
        if let Some(r) = ci.xx {
            jet.xx = y[[r * np + p, 0]];
        }
        if let Some(r) = ci.xxx {
            jet.xxx = y[[r * np + p, 0]];
        }
    }
    if out.iter().any(|j| ![j.v, j.t, j.x, j.xx, j.xxx].iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteLayer { layer: out_layer, detail: "network output".into() });
    }
    Ok(BlockTape { points: np, orders, input, hidden, out })
}

/// Backward pass through a tape. `adjoint[p]` is the sensitivity of the loss
/// to the output jet at point `p`. Gradient contributions are added to `grad`
/// (full parameter length). Layers below `lowest_layer` are skipped.
pub fn backward_block(
    arch: &Architecture,
    params: &ParamVector,
    tape: &BlockTape,
    adjoint: &[Jet],
    lowest_layer: usize,
    grad: &mut [f64],
) {
    let np = tape.points;
    let orders = tape.orders;
    let nc = orders.components();
    let ci = CompIndex::new(orders);
    let kmax = orders.max_order();
    assert_eq!(adjoint.len(), np);
    assert_eq!(grad.len(), params.len());

    let out_layer = params.layout.output_layer();
    let width_last = params.layout.layers[out_layer].fan_in;
    let mut ybar_col = Array2::<f64>::zeros((nc * np, 1));
    for (p, a) in adjoint.iter().enumerate() {
        ybar_col[[p, 0]] = a.v;
        if let Some(r) = ci.t {
            ybar_col[[r * np + p, 0]] = a.t;
        }
        if let Some(r) = ci.x {
            ybar_col[[r * np + p, 0]] = a.x;
        }
        if let Some(r) = ci.xx {
            ybar_col[[r * np + p, 0]] = a.xx;
        }
        if let Some(r) = ci.xxx {
            ybar_col[[r * np + p, 0]] = a.xxx;
        }
    }
    let last_h = tape.hidden.last().map_or(&tape.input, |t| &t.h);
    {
        let slot = &params.layout.layers[out_layer];
        let gw = ybar_col.t().dot(last_h);
        for (g, v) in grad[slot.weights.clone()].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        grad[slot.bias.start] += adjoint.iter().map(|a| a.v).sum::<f64>();
    }
    if lowest_layer >= out_layer {
        return;
    }
    let w_out = weight_view(params, out_layer);
    let mut hbar = ybar_col.dot(&w_out);
    debug_assert_eq!(hbar.ncols(), width_last);

    for l in (lowest_layer..arch.hidden_layers()).rev() {
        let lt = &tape.hidden[l];
        let z = &lt.z;
        let width = z.ncols();
        let act = arch.hidden[l].resolve(params.activation_coeffs(l));
        let with_coeffs = act.has_coeffs();
        let mut raw = vec![0.0; if with_coeffs { act.raw_len() } else { 0 }];
        let mut zbar = Array2::<f64>::zeros(z.raw_dim());
        let stride = np * width;
        let zs = z.as_slice().expect("standard layout");
        let hb = hbar.as_slice().expect("standard layout");
        let zb = zbar.as_slice_mut().expect("standard layout");
        for e in 0..stride {
            let z0 = zs[e];
            let d = &lt.derivs[e];
            let yb0 = hb[e];
            let mut fbar = [yb0, 0.0, 0.0, 0.0];
            let mut zb0 = yb0 * d[1];
            if let Some(r) = ci.t {
                let (zt, ytb) = (zs[r * stride + e], hb[r * stride + e]);
                zb[r * stride + e] = ytb * d[1];
                zb0 += ytb * d[2] * zt;
                fbar[1] += ytb * zt;
            }
            if let Some(r) = ci.x {
                let zx = zs[r * stride + e];
                let yxb = hb[r * stride + e];
                let mut zxb = yxb * d[1];
                zb0 += yxb * d[2] * zx;
                fbar[1] += yxb * zx;
                if let Some(r2) = ci.xx {
                    let zxx = zs[r2 * stride + e];
                    let yxxb = hb[r2 * stride + e];
                    zxb += 2.0 * yxxb * d[2] * zx;
                    let mut zxxb = yxxb * d[1];
                    zb0 += yxxb * (d[3] * zx * zx + d[2] * zxx);
                    fbar[1] += yxxb * zxx;
                    fbar[2] += yxxb * zx * zx;
                    if let Some(r3) = ci.xxx {
                        let zxxx = zs[r3 * stride + e];
                        let yb3 = hb[r3 * stride + e];
                        zxb += yb3 * 3.0 * (d[3] * zx * zx + d[2] * zxx);
                        zxxb += 3.0 * yb3 * d[2] * zx;
                        zb[r3 * stride + e] = yb3 * d[1];
                        zb0 += yb3 * (d[4] * zx * zx * zx + 3.0 * d[3] * zx * zxx + d[2] * zxxx);
                        fbar[1] += yb3 * zxxx;
                        fbar[2] += 3.0 * yb3 * zx * zxx;
                        fbar[3] += yb3 * zx * zx * zx;
                    }
                    zb[r2 * stride + e] = zxxb;
                }
                zb[r * stride + e] = zxb;
            }
            zb[e] = zb0;
            if with_coeffs {
                act.accumulate_raw(z0, &fbar, kmax, &mut raw);
            }
        }
        if with_coeffs {
            let seg = params.layout.activations[l].clone();
            act.finalize_raw(&raw, &mut grad[seg]);
        }
        let prev_h = if l == 0 { &tape.input } else { &tape.hidden[l - 1].h };
        let slot = &params.layout.layers[l];
        let gw = zbar.t().dot(prev_h);
        for (g, v) in grad[slot.weights.clone()].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        let gb = zbar.slice(s![..np, ..]).sum_axis(Axis(0));
        for (g, v) in grad[slot.bias.clone()].iter_mut().zip(gb.iter()) {
            *g += v;
        }
        if l > lowest_layer {
            hbar = zbar.dot(&weight_view(params, l));
        }
    }
}

/// Network output and its requested exact partials at one point.
pub fn eval_with_derivatives(
    arch: &Architecture,
    params: &ParamVector,
    point: (f64, f64),
    orders: DerivOrders,
) -> Result<DerivBundle> {
    let orders = DerivOrders::new(orders.t, orders.x)?;
    let tape = forward_block(arch, params, &[point], orders)?;
    Ok(DerivBundle::from_jet(tape.jet(0), orders))
}

/// Network jets for many points, evaluated block by block.
pub fn eval_jets(
    arch: &Architecture,
    params: &ParamVector,
    points: &[(f64, f64)],
    orders: DerivOrders,
) -> Result<Vec<Jet>> {
    check_params(arch, params)?;
    let blocks: Vec<Result<Vec<Jet>>> = points
        .par_chunks(BLOCK)
        .map(|chunk| forward_block_unchecked(arch, params, chunk, orders).map(|t| t.out))
        .collect();
    let mut out = Vec::with_capacity(points.len());
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

/// Plain network values `v(t, x)` for many points.
pub fn eval_values(arch: &Architecture, params: &ParamVector, points: &[(f64, f64)]) -> Result<Vec<f64>> {
    Ok(eval_jets(arch, params, points, DerivOrders::VALUE)?.into_iter().map(|j| j.v).collect())
}

/// Per-point loss terms: for each point, returns its loss contribution and
/// the adjoint of that contribution with respect to the output jet.
pub trait PointLoss: Sync {
    fn term(&self, index: usize, point: (f64, f64), jet: &Jet) -> Result<(f64, Jet)>;
}

/// Sum over points of `PointLoss::term`, with the gradient accumulated into
/// `grad` when requested. Returns every per-point term (in point order) so
/// callers can reduce them deterministically.
pub fn accumulate_point_loss(
    arch: &Architecture,
    params: &ParamVector,
    points: &[(f64, f64)],
    orders: DerivOrders,
    loss: &dyn PointLoss,
    grad: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    check_params(arch, params)?;
    let lowest = params.lowest_trainable_layer();
    let want_grad = grad.is_some() && lowest.is_some();
    let lowest = lowest.unwrap_or(0);
    let blocks: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = points
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(b, chunk)| {
            let tape = forward_block_unchecked(arch, params, chunk, orders)?;
            let mut terms = Vec::with_capacity(chunk.len());
            let mut adj = Vec::with_capacity(chunk.len());
            for (i, (&pt, jet)) in chunk.iter().zip(tape.jets()).enumerate() {
                let (val, a) = loss.term(b * BLOCK + i, pt, jet)?;
                terms.push(val);
                adj.push(a);
            }
            let g = want_grad.then(|| {
                let mut g = vec![0.0; params.len()];
                backward_block(arch, params, &tape, &adj, lowest, &mut g);
                g
            });
            Ok((terms, g))
        })
        .collect();
    let mut terms = Vec::with_capacity(points.len());
    let mut grads = Vec::new();
    for b in blocks {
        let (t, g) = b?;
        terms.extend(t);
        if let Some(g) = g {
            grads.push(g);
        }
    }
    if let Some(out) = grad {
        if let Some(total) = pairwise_vec_sum(grads) {
            for (o, v) in out.iter_mut().zip(total) {
                *o += v;
            }
        }
    }
    Ok(terms)
}

/// Pairwise (tree) summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Pairwise sum of the values after sorting them, so the result is
/// independent of the order in which terms were produced.
pub fn order_free_sum(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    pairwise_sum(&sorted)
}

fn pairwise_vec_sum(mut parts: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// A scalar loss over the full parameter vector with an exact gradient.
pub trait Objective: Sync {
    /// Loss value; when `grad` is given, `dL/dtheta` is written into it
    /// (full length, entries outside the mask may be left at zero).
    fn evaluate(&self, params: &ParamVector, grad: Option<&mut [f64]>) -> Result<f64>;
}

/// Adapter for closed-form losses `theta -> (L, dL/dtheta)`.
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn evaluate(&self, params: &ParamVector, grad: Option<&mut [f64]>) -> Result<f64> {
        let (v, g) = (self.0)(&params.values);
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        Ok(v)
    }
}

/// `a * L1 + b * L2`.
pub struct Combination<'a> {
    pub terms: Vec<(f64, &'a dyn Objective)>,
}

impl Objective for Combination<'_> {
    fn evaluate(&self, params: &ParamVector, grad: Option<&mut [f64]>) -> Result<f64> {
        let mut total = 0.0;
        match grad {
            Some(out) => {
                out.iter_mut().for_each(|g| *g = 0.0);
                let mut tmp = vec![0.0; out.len()];
                for (w, obj) in &self.terms {
                    tmp.iter_mut().for_each(|g| *g = 0.0);
                    total += w * obj.evaluate(params, Some(&mut tmp))?;
                    for (o, g) in out.iter_mut().zip(&tmp) {
                        *o += w * g;
                    }
                }
            }
            None => {
                for (w, obj) in &self.terms {
                    total += w * obj.evaluate(params, None)?;
                }
            }
        }
        Ok(total)
    }
}

/// Gradient restricted to the trainable entries, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Loss value and its gradient with respect to the trainable parameters.
pub fn value_and_gradient(loss: &dyn Objective, params: &ParamVector) -> Result<(f64, GradientVector)> {
    let mut full = vec![0.0; params.len()];
    let value = loss.evaluate(params, Some(&mut full))?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss value {value}")));
    }
    let values: Vec<f64> = full.iter().zip(&params.mask).filter(|(_, m)| **m).map(|(g, _)| *g).collect();
    if let Some(i) = values.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} of loss {value}")));
    }
    Ok((value, GradientVector { values }))
}

pub fn loss_gradient(loss: &dyn Objective, params: &ParamVector) -> Result<GradientVector> {
    value_and_gradient(loss, params).map(|(_, g)| g)
}
