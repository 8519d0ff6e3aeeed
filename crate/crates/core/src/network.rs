//! Fully connected surrogate `v(t, x)`, its flat parameter store, Xavier
//! initialization and the hard-constraint ansatz `u = A + B v`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::Range;

use crate::activations::{init_coeffs, ActivationKind, ActivationSpec};
use crate::autodiff::{DerivBundle, DerivOrders, Jet};
use crate::error::{Error, Result};
use crate::pde::Equation;

pub const INPUT_DIM: usize = 2;
pub const DEFAULT_HIDDEN_LAYERS: usize = 6;
pub const DEFAULT_WIDTH: usize = 32;

/// Layer sizes and per-hidden-layer activations. The output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub width: usize,
    pub hidden: Vec<ActivationKind>,
}

impl Architecture {
    /// `hidden_layers` tanh layers of `width` neurons, the last one carrying
    /// `final_act`.
    pub fn new(hidden_layers: usize, width: usize, final_act: ActivationKind) -> Result<Self> {
        if hidden_layers == 0 || width == 0 {
            return Err(Error::InvalidConfig("network needs at least one hidden neuron".into()));
        }
        final_act.validate()?;
        let mut hidden = vec![ActivationKind::tanh(); hidden_layers - 1];
        hidden.push(final_act);
        Ok(Architecture { width, hidden })
    }

    pub fn standard(final_act: ActivationKind) -> Result<Self> {
        Self::new(DEFAULT_HIDDEN_LAYERS, DEFAULT_WIDTH, final_act)
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn final_activation(&self) -> &ActivationKind {
        self.hidden.last().expect("at least one hidden layer")
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of one affine layer inside the flat parameter vector. Weights are
/// row-major `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Hidden layers followed by the output layer.
    pub layers: Vec<LayerSlot>,
    /// Activation coefficient segment for each hidden layer (often empty).
    pub activations: Vec<Range<usize>>,
    pub total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut offset = 0;
        let mut layers = Vec::new();
        let mut fan_in = INPUT_DIM;
        let mut sizes: Vec<usize> = vec![arch.width; arch.hidden.len()];
        sizes.push(1);
        for fan_out in sizes {
            let weights = offset..offset + fan_in * fan_out;
            offset = weights.end;
            let bias = offset..offset + fan_out;
            offset = bias.end;
            layers.push(LayerSlot { fan_in, fan_out, weights, bias });
            fan_in = fan_out;
        }
        let mut activations = Vec::new();
        for kind in &arch.hidden {
            let seg = offset..offset + kind.coeff_count();
            offset = seg.end;
            activations.push(seg);
        }
        Layout { layers, activations, total: offset }
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Which layer (hidden index or the output layer) owns parameter `i`.
    /// Activation coefficients belong to the hidden layer they shape.
    pub fn owner(&self, i: usize) -> usize {
        for (l, slot) in self.layers.iter().enumerate() {
            if slot.weights.contains(&i) || slot.bias.contains(&i) {
                return l;
            }
        }
        for (l, seg) in self.activations.iter().enumerate() {
            if seg.contains(&i) {
                return l;
            }
        }
        panic!("parameter index {i} outside layout of {}", self.total)
    }
}

/// Flat trainable parameter store with a trainable mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
    pub mask: Vec<bool>,
}

impl ParamVector {
    pub fn zeros(arch: &Architecture) -> Self {
        let layout = arch.layout();
        ParamVector { values: vec![0.0; layout.total], mask: vec![true; layout.total], layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn trainable_values(&self) -> Vec<f64> {
        self.values.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect()
    }

    pub fn set_trainable_values(&mut self, subset: &[f64]) {
        let mut it = subset.iter();
        for (v, m) in self.values.iter_mut().zip(&self.mask) {
            if *m {
                *v = *it.next().expect("subset shorter than trainable count");
            }
        }
        debug_assert!(it.next().is_none());
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.values.len());
        self.mask = mask;
        self
    }

    pub fn mask_all(&self) -> Vec<bool> {
        vec![true; self.len()]
    }

    /// Output layer weights and bias plus the final hidden layer's activation
    /// coefficients.
    pub fn mask_final_layer(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        let out = &self.layout.layers[self.layout.output_layer()];
        for i in out.weights.clone().chain(out.bias.clone()) {
            mask[i] = true;
        }
        if let Some(seg) = self.layout.activations.last() {
            for i in seg.clone() {
                mask[i] = true;
            }
        }
        mask
    }

    /// Smallest layer index that owns a trainable entry; backpropagation can
    /// stop there.
    pub fn lowest_trainable_layer(&self) -> Option<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).map(|i| self.layout.owner(i)).min()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].weights.clone()]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.layers[layer].weights.clone();
        &mut self.values[r]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].bias.clone()]
    }

    pub fn activation_coeffs(&self, hidden_layer: usize) -> &[f64] {
        &self.values[self.layout.activations[hidden_layer].clone()]
    }

    /// Coefficients of the final hidden layer activation as a standalone spec.
    pub fn final_activation(&self, arch: &Architecture) -> ActivationSpec {
        let l = arch.hidden_layers() - 1;
        ActivationSpec {
            kind: arch.hidden[l].clone(),
            coeffs: self.activation_coeffs(l).to_vec(),
        }
    }
}

/// Xavier-uniform weights, zero biases, activation coefficients from their
/// family initializer. Deterministic in `seed`.
pub fn init_xavier(arch: &Architecture, seed: u64) -> Result<ParamVector> {
    let mut params = ParamVector::zeros(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..params.layout.layers.len() {
        let slot = params.layout.layers[l].clone();
        let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
        for w in params.weights_mut(l) {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    for (l, kind) in arch.hidden.iter().enumerate() {
        let coeffs = init_coeffs(kind, seed.wrapping_mul(31).wrapping_add(l as u64))?;
        let seg = params.layout.activations[l].clone();
        params.values[seg].copy_from_slice(&coeffs);
    }
    Ok(params)
}

/// Value and partials of a closed-form factor of the ansatz.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Partials {
    pub v: f64,
    pub t: f64,
    pub x: f64,
    pub xx: f64,
    pub xxx: f64,
}

/// `u(t, x) = A(t, x) + B(t, x) v(t, x)` with closed-form `A`, `B` per
/// equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ansatz {
    pub equation: Equation,
}

impl Ansatz {
    pub fn new(equation: Equation) -> Self {
        Ansatz { equation }
    }

    pub fn offset(&self, t: f64, x: f64) -> Partials {
        let _ = t;
        let (s, c) = (PI * x).sin_cos();
        let (p, p2, p3) = (PI, PI * PI, PI * PI * PI);
        match self.equation {
            Equation::AllenCahn => Partials {
                v: x * x * c,
                t: 0.0,
                x: 2.0 * x * c - p * x * x * s,
                xx: 2.0 * c - 4.0 * p * x * s - p2 * x * x * c,
                xxx: -6.0 * p * s - 6.0 * p2 * x * c + p3 * x * x * s,
            },
            Equation::Burgers => Partials { v: -s, t: 0.0, x: -p * c, xx: p2 * s, xxx: p3 * c },
            Equation::Kdv => Partials { v: c, t: 0.0, x: -p * s, xx: -p2 * c, xxx: p3 * s },
        }
    }

    pub fn scale(&self, t: f64, x: f64) -> Partials {
        match self.equation {
            Equation::AllenCahn | Equation::Burgers => Partials {
                v: t * (1.0 - x * x),
                t: 1.0 - x * x,
                x: -2.0 * x * t,
                xx: -2.0 * t,
                xxx: 0.0,
            },
            Equation::Kdv => Partials { v: t, t: 1.0, x: 0.0, xx: 0.0, xxx: 0.0 },
        }
    }

    /// Plain value `u` from a network value `v`.
    pub fn u_value(&self, t: f64, x: f64, v: f64) -> f64 {
        self.offset(t, x).v + self.scale(t, x).v * v
    }

    /// Product and chain rule on `A + B v`, for the orders present in `v`.
    pub fn apply(&self, v: &DerivBundle, t: f64, x: f64, needed: DerivOrders) -> Result<DerivBundle> {
        let missing = |what: &str| Error::Contract(format!("v bundle lacks {what}"));
        let a = self.offset(t, x);
        let b = self.scale(t, x);
        let mut u = DerivBundle { u: a.v + b.v * v.u, ..DerivBundle::default() };
        if needed.t >= 1 {
            let vt = v.du_dt.ok_or_else(|| missing("v_t"))?;
            u.du_dt = Some(a.t + b.t * v.u + b.v * vt);
        }
        if needed.x >= 1 {
            let vx = v.du_dx.ok_or_else(|| missing("v_x"))?;
            u.du_dx = Some(a.x + b.x * v.u + b.v * vx);
            if needed.x >= 2 {
                let vxx = v.d2u_dx2.ok_or_else(|| missing("v_xx"))?;
                u.d2u_dx2 = Some(a.xx + b.xx * v.u + 2.0 * b.x * vx + b.v * vxx);
                if needed.x >= 3 {
                    let vxxx = v.d3u_dx3.ok_or_else(|| missing("v_xxx"))?;
                    u.d3u_dx3 = Some(
                        a.xxx + b.xxx * v.u + 3.0 * b.xx * vx + 3.0 * b.x * vxx + b.v * vxxx,
                    );
                }
            }
        }
        Ok(u)
    }

    /// Same as [`Ansatz::apply`] on a raw jet; orders not carried are zero.
    pub fn apply_jet(&self, v: &Jet, t: f64, x: f64) -> Jet {
        let a = self.offset(t, x);
        let b = self.scale(t, x);
        Jet {
            v: a.v + b.v * v.v,
            t: a.t + b.t * v.v + b.v * v.t,
            x: a.x + b.x * v.v + b.v * v.x,
            xx: a.xx + b.xx * v.v + 2.0 * b.x * v.x + b.v * v.xx,
            xxx: a.xxx + b.xxx * v.v + 3.0 * b.xx * v.x + 3.0 * b.x * v.xx + b.v * v.xxx,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Family;
    use crate::autodiff::eval_with_derivatives;

    fn lctanh_arch() -> Architecture {
        Architecture::standard(ActivationKind::new(Family::LcTanh, 3)).unwrap()
    }

    #[test]
    fn layout_covers_vector_once() {
        let arch = lctanh_arch();
        let layout = arch.layout();
        let mut seen = vec![0u8; layout.total];
        for slot in &layout.layers {
            for i in slot.weights.clone().chain(slot.bias.clone()) {
                seen[i] += 1;
            }
        }
        for seg in &layout.activations {
            for i in seg.clone() {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<(usize, usize)> = layout.layers.iter().map(|s| (s.fan_in, s.fan_out)).collect();
        assert_eq!(sizes, vec![(2, 32), (32, 32), (32, 32), (32, 32), (32, 32), (32, 32), (32, 1)]);
        // 2*32+32 + 5*(32*32+32) + 32+1 + 9 coefficients
        assert_eq!(layout.total, 96 + 5 * 1056 + 33 + 9);
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let arch = lctanh_arch();
        let a = init_xavier(&arch, 42).unwrap();
        let b = init_xavier(&arch, 42).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 34.0).sqrt();
        assert!(a.weights(0).iter().all(|w| w.abs() <= bound));
        assert!(a.bias(3).iter().all(|b| *b == 0.0));
        assert_ne!(a, init_xavier(&arch, 43).unwrap());
    }

    #[test]
    fn xavier_variance_matches_uniform_moment() {
        let arch = Architecture::standard(ActivationKind::tanh()).unwrap();
        let bound2 = 6.0 / 34.0;
        let mut samples = Vec::new();
        let mut seed = 0;
        while samples.len() < 10_000 {
            samples.extend_from_slice(init_xavier(&arch, seed).unwrap().weights(0));
            seed += 1;
        }
        samples.truncate(10_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        assert!((var / (bound2 / 3.0) - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn final_layer_mask_selects_head_and_activation() {
        let arch = lctanh_arch();
        let p = init_xavier(&arch, 0).unwrap();
        let mask = p.mask_final_layer();
        assert_eq!(mask.iter().filter(|m| **m).count(), 33 + 9);
        let q = p.clone().with_mask(mask);
        assert_eq!(q.lowest_trainable_layer(), Some(5));
        let tanh_arch = Architecture::standard(ActivationKind::tanh()).unwrap();
        let r = init_xavier(&tanh_arch, 0).unwrap();
        let r = r.clone().with_mask(r.mask_final_layer());
        assert_eq!(r.lowest_trainable_layer(), Some(6));
    }

    #[test]
    fn ac_ansatz_hard_constraints() {
        let ans = Ansatz::new(Equation::AllenCahn);
        for &x in &[-0.9, -0.2, 0.0, 0.45, 1.0] {
            let x2c = x * x * (PI * x).cos();
            assert_eq!(ans.u_value(0.0, x, 123.4), x2c);
        }
        for &t in &[0.1, 0.5, 0.99] {
            assert_eq!(ans.u_value(t, 1.0, -7.0), -1.0);
            assert_eq!(ans.u_value(t, -1.0, 3.0), -1.0);
        }
    }

    #[test]
    fn ac_ansatz_uxx_for_constant_v() {
        // v = 1: u = x^2 cos(pi x) + t (1 - x^2); check u_xx against nested FD
        let ans = Ansatz::new(Equation::AllenCahn);
        let (t, x) = (0.5, 0.3);
        let v = DerivBundle { u: 1.0, du_dt: Some(0.0), du_dx: Some(0.0), d2u_dx2: Some(0.0), d3u_dx3: None };
        let u = ans.apply(&v, t, x, DerivOrders { t: 1, x: 2 }).unwrap();
        let f = |x: f64| x * x * (PI * x).cos() + t * (1.0 - x * x);
        let h = 1e-4;
        let fd = (-f(x + 2.0 * h) + 16.0 * f(x + h) - 30.0 * f(x) + 16.0 * f(x - h) - f(x - 2.0 * h))
            / (12.0 * h * h);
        assert!((u.d2u_dx2.unwrap() - fd).abs() < 1e-6);
        let missing = DerivBundle { u: 1.0, ..DerivBundle::default() };
        assert!(ans.apply(&missing, t, x, DerivOrders { t: 1, x: 2 }).is_err());
    }

    #[test]
    fn ansatz_derivatives_match_fd_of_composed_u() {
        let arch = Architecture::standard(ActivationKind::new(Family::LcXSinSq, 2)).unwrap();
        let params = init_xavier(&arch, 9).unwrap();
        let (t, x) = (0.35, -0.27);
        for eq in [Equation::AllenCahn, Equation::Burgers, Equation::Kdv] {
            let ans = Ansatz::new(eq);
            let orders = DerivOrders { t: 1, x: 3 };
            let vb = eval_with_derivatives(&arch, &params, (t, x), orders).unwrap();
            let ub = ans.apply(&vb, t, x, orders).unwrap();
            let u_at = |t: f64, x: f64| {
                let v = eval_with_derivatives(&arch, &params, (t, x), DerivOrders { t: 0, x: 0 }).unwrap();
                ans.u_value(t, x, v.u)
            };
            let ux_at = |x: f64| {
                let v = eval_with_derivatives(&arch, &params, (t, x), DerivOrders { t: 0, x: 2 }).unwrap();
                ans.apply(&v, t, x, DerivOrders { t: 0, x: 2 }).unwrap()
            };
            let h = 1e-4;
            let fd_t = (u_at(t + h, x) - u_at(t - h, x)) / (2.0 * h);
            let fd_x = (u_at(t, x + h) - u_at(t, x - h)) / (2.0 * h);
            let fd_xxx = (ux_at(x + h).d2u_dx2.unwrap() - ux_at(x - h).d2u_dx2.unwrap()) / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-2);
            assert!(rel(ub.du_dt.unwrap(), fd_t) < 1e-6, "{eq:?} u_t");
            assert!(rel(ub.du_dx.unwrap(), fd_x) < 1e-6, "{eq:?} u_x");
            assert!(rel(ub.d3u_dx3.unwrap(), fd_xxx) < 1e-4, "{eq:?} u_xxx");
        }
    }
}
