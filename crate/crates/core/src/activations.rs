//! Activation families for the final hidden layer.
//!
//! Every family is written in the common form
//!
//! ```text
//! f(z) = lin * z + sum_i w_i * phi_i(a_i * z + b_i)
//! ```
//!
//! where `phi_i` is a smooth base function with closed-form derivatives up to
//! order four. Order four is needed because the backward pass through an
//! order-three spatial jet differentiates `f'''` once more with respect to `z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;

use crate::error::{Error, Result};

/// Highest derivative order of `f` with respect to its input that the
/// evaluator returns.
pub const MAX_ORDER: usize = 4;

/// Derivatives `f, f', f'', f''', f''''` at one input.
pub type Derivs = [f64; MAX_ORDER + 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Tanh,
    #[serde(rename = "xsin2", alias = "xplussinsq")]
    XPlusSinSq,
    Abu,
    #[serde(rename = "lctanh")]
    LcTanh,
    #[serde(rename = "lcsin")]
    LcSin,
    #[serde(rename = "lcxsin2", alias = "lcxsinsq")]
    LcXSinSq,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Tanh,
        Family::XPlusSinSq,
        Family::Abu,
        Family::LcTanh,
        Family::LcSin,
        Family::LcXSinSq,
    ];

    /// Number of learnable coefficients for `n` terms.
    pub fn coeff_count(self, n: usize) -> usize {
        match self {
            Family::Tanh | Family::XPlusSinSq => 0,
            Family::Abu => 2 * n,
            Family::LcTanh | Family::LcSin => 3 * n,
            Family::LcXSinSq => 4 * n,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Tanh => "tanh",
            Family::XPlusSinSq => "xsin2",
            Family::Abu => "abu",
            Family::LcTanh => "lctanh",
            Family::LcSin => "lcsin",
            Family::LcXSinSq => "lcxsin2",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        match name.to_ascii_lowercase().as_str() {
            "tanh" => Some(Family::Tanh),
            "xsin2" | "xplussinsq" => Some(Family::XPlusSinSq),
            "abu" => Some(Family::Abu),
            "lctanh" => Some(Family::LcTanh),
            "lcsin" => Some(Family::LcSin),
            "lcxsin2" | "lcxsinsq" => Some(Family::LcXSinSq),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Candidate functions available to the adaptive blending unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Candidate {
    Gelu,
    Elu,
    Sigmoid,
    Tanh,
    Sin,
    Exp,
    Softplus,
    Swish,
}

impl Candidate {
    pub fn name(self) -> &'static str {
        match self {
            Candidate::Gelu => "gelu",
            Candidate::Elu => "elu",
            Candidate::Sigmoid => "sigmoid",
            Candidate::Tanh => "tanh",
            Candidate::Sin => "sin",
            Candidate::Exp => "exp",
            Candidate::Softplus => "softplus",
            Candidate::Swish => "swish",
        }
    }

    pub fn from_name(name: &str) -> Option<Candidate> {
        match name.to_ascii_lowercase().as_str() {
            "gelu" => Some(Candidate::Gelu),
            "elu" => Some(Candidate::Elu),
            "sigmoid" => Some(Candidate::Sigmoid),
            "tanh" => Some(Candidate::Tanh),
            "sin" => Some(Candidate::Sin),
            "exp" => Some(Candidate::Exp),
            "softplus" => Some(Candidate::Softplus),
            "swish" => Some(Candidate::Swish),
            _ => None,
        }
    }

    fn base(self) -> Base {
        match self {
            Candidate::Gelu => Base::Gelu,
            Candidate::Elu => Base::Elu,
            Candidate::Sigmoid => Base::Sigmoid,
            Candidate::Tanh => Base::Tanh,
            Candidate::Sin => Base::Sin,
            Candidate::Exp => Base::Exp,
            Candidate::Softplus => Base::Softplus,
            Candidate::Swish => Base::Swish,
        }
    }
}

/// Scalar base functions with closed-form derivatives through order four.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Base {
    Tanh,
    Sin,
    SinSq,
    Gelu,
    Elu,
    Sigmoid,
    Exp,
    Softplus,
    Swish,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// sigma and its first four derivatives.
fn sigmoid_derivs(z: f64) -> Derivs {
    let s = sigmoid(z);
    let q = s * (1.0 - s);
    [
        s,
        q,
        q * (1.0 - 2.0 * s),
        q * (1.0 - 6.0 * s + 6.0 * s * s),
        q * (1.0 - 2.0 * s) * (1.0 - 12.0 * s + 12.0 * s * s),
    ]
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Base {
    /// Returns `phi(s), phi'(s), ..., phi^(4)(s)`; entries above `k_max` are
    /// left at zero.
    pub(crate) fn derivs(self, s: f64, k_max: usize) -> Derivs {
        let mut d = [0.0; MAX_ORDER + 1];
        match self {
            Base::Tanh => {
                let t = s.tanh();
                let q = 1.0 - t * t;
                d[0] = t;
                if k_max >= 1 {
                    d[1] = q;
                    d[2] = -2.0 * t * q;
                    d[3] = q * (6.0 * t * t - 2.0);
                    d[4] = t * q * (16.0 - 24.0 * t * t);
                }
            }
            Base::Sin => {
                let (sn, cs) = s.sin_cos();
                d = [sn, cs, -sn, -cs, sn];
            }
            Base::SinSq => {
                let sn = s.sin();
                let (s2, c2) = (2.0 * s).sin_cos();
                d = [sn * sn, s2, 2.0 * c2, -4.0 * s2, -8.0 * c2];
            }
            Base::Gelu => {
                let cdf = 0.5 * libm::erfc(-s * FRAC_1_SQRT_2);
                let pdf = (-0.5 * s * s).exp() / (2.0 * PI).sqrt();
                let s2 = s * s;
                d = [
                    s * cdf,
                    cdf + s * pdf,
                    (2.0 - s2) * pdf,
                    (s2 * s - 4.0 * s) * pdf,
                    (-s2 * s2 + 7.0 * s2 - 4.0) * pdf,
                ];
            }
            Base::Elu => {
                if s > 0.0 {
                    d[0] = s;
                    d[1] = 1.0;
                } else {
                    let e = s.exp();
                    d = [e - 1.0, e, e, e, e];
                }
            }
            Base::Sigmoid => d = sigmoid_derivs(s),
            Base::Exp => {
                let e = s.exp();
                d = [e; MAX_ORDER + 1];
            }
            Base::Softplus => {
                let sg = sigmoid_derivs(s);
                d = [softplus(s), sg[0], sg[1], sg[2], sg[3]];
            }
            Base::Swish => {
                let sg = sigmoid_derivs(s);
                d[0] = s * sg[0];
                for k in 1..=MAX_ORDER {
                    d[k] = s * sg[k] + k as f64 * sg[k - 1];
                }
            }
        }
        if k_max < MAX_ORDER {
            for v in d.iter_mut().skip(k_max + 1) {
                *v = 0.0;
            }
        }
        d
    }
}

/// Numerically stable softmax gate.
pub fn gate_weights(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::InvalidActivation("gate needs at least one weight".into()));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("gate input {alpha:?}")));
    }
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = alpha.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Structural description of an activation: family, term count and (for ABU)
/// the ordered candidate list. Learnable coefficients live elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationKind {
    pub family: Family,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
}

impl ActivationKind {
    pub fn tanh() -> Self {
        ActivationKind { family: Family::Tanh, n: 1, candidates: Vec::new() }
    }

    pub fn new(family: Family, n: usize) -> Self {
        ActivationKind { family, n, candidates: Vec::new() }
    }

    pub fn abu(candidates: Vec<Candidate>) -> Self {
        ActivationKind { family: Family::Abu, n: candidates.len(), candidates }
    }

    pub fn coeff_count(&self) -> usize {
        self.family.coeff_count(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidActivation("term count must be at least 1".into()));
        }
        match self.family {
            Family::Tanh | Family::XPlusSinSq if self.n != 1 => Err(Error::InvalidActivation(
                format!("{} has a single term, got n = {}", self.family, self.n),
            )),
            Family::Abu => {
                if !(3..=6).contains(&self.n) {
                    return Err(Error::InvalidActivation(format!(
                        "ABU blends 3 to 6 candidates, got {}",
                        self.n
                    )));
                }
                if self.candidates.len() != self.n {
                    return Err(Error::InvalidActivation(format!(
                        "ABU lists {} candidates for n = {}",
                        self.candidates.len(),
                        self.n
                    )));
                }
                for (i, c) in self.candidates.iter().enumerate() {
                    if self.candidates[..i].contains(c) {
                        return Err(Error::InvalidActivation(format!(
                            "duplicate ABU candidate {}",
                            c.name()
                        )));
                    }
                }
                Ok(())
            }
            _ if !self.candidates.is_empty() => Err(Error::InvalidActivation(
                "candidates are only meaningful for ABU".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Short label such as `lctanh3` or `abu[tanh,gelu,sigmoid]`.
    pub fn label(&self) -> String {
        match self.family {
            Family::Tanh | Family::XPlusSinSq => self.family.name().to_string(),
            Family::Abu => {
                let names: Vec<&str> = self.candidates.iter().map(|c| c.name()).collect();
                format!("abu[{}]", names.join(","))
            }
            _ => format!("{}{}", self.family.name(), self.n),
        }
    }

    /// Resolves coefficients into the common `lin*z + sum w phi(a z + b)` form.
    pub(crate) fn resolve(&self, coeffs: &[f64]) -> Resolved {
        debug_assert_eq!(coeffs.len(), self.coeff_count());
        let n = self.n;
        let mut terms = Vec::with_capacity(n);
        let mut lin = 0.0;
        match self.family {
            Family::Tanh => terms.push(Term { w: 1.0, a: 1.0, b: 0.0, base: Base::Tanh }),
            Family::XPlusSinSq => {
                lin = 1.0;
                terms.push(Term { w: 1.0, a: 1.0, b: 0.0, base: Base::SinSq });
            }
            Family::Abu => {
                // Non-finite coefficients are caught by the engine; keep the
                // gate total here so resolution itself never fails.
                let gates = gate_weights(&coeffs[..n])
                    .unwrap_or_else(|_| vec![f64::NAN; n]);
                for i in 0..n {
                    terms.push(Term {
                        w: gates[i],
                        a: coeffs[n + i],
                        b: 0.0,
                        base: self.candidates[i].base(),
                    });
                }
            }
            Family::LcTanh | Family::LcSin => {
                let base = if self.family == Family::LcTanh { Base::Tanh } else { Base::Sin };
                for i in 0..n {
                    terms.push(Term { w: coeffs[i], a: coeffs[n + i], b: coeffs[2 * n + i], base });
                }
            }
            Family::LcXSinSq => {
                lin = coeffs[..n].iter().sum();
                for i in 0..n {
                    terms.push(Term {
                        w: coeffs[n + i],
                        a: coeffs[2 * n + i],
                        b: coeffs[3 * n + i],
                        base: Base::SinSq,
                    });
                }
            }
        }
        Resolved { family: self.family, n, lin, terms }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Term {
    w: f64,
    a: f64,
    b: f64,
    base: Base,
}

/// Activation with coefficients folded into explicit terms, ready for
/// per-element evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Resolved {
    family: Family,
    n: usize,
    lin: f64,
    terms: Vec<Term>,
}

impl Resolved {
    pub(crate) fn has_coeffs(&self) -> bool {
        self.family.coeff_count(self.n) > 0
    }

    /// `f^(k)(z)` for `k = 0..=k_max`.
    #[inline]
    pub(crate) fn derivs(&self, z: f64, k_max: usize) -> Derivs {
        let mut out = [0.0; MAX_ORDER + 1];
        if self.family == Family::Tanh {
            return Base::Tanh.derivs(z, k_max);
        }
        for term in &self.terms {
            let d = term.base.derivs(term.a * z + term.b, k_max);
            let mut scale = term.w;
            for k in 0..=k_max {
                out[k] += scale * d[k];
                scale *= term.a;
            }
        }
        out[0] += self.lin * z;
        if k_max >= 1 {
            out[1] += self.lin;
        }
        out
    }

    /// Length of the raw gradient buffer used by [`Resolved::accumulate_raw`].
    pub(crate) fn raw_len(&self) -> usize {
        3 * self.terms.len() + 1
    }

    /// Accumulates `sum_k fbar[k] * d f^(k) / d(w_i, a_i, b_i, lin)` into `raw`
    /// for `k = 0..=k_max` (`k_max <= 3`).
    #[inline]
    pub(crate) fn accumulate_raw(&self, z: f64, fbar: &[f64; 4], k_max: usize, raw: &mut [f64]) {
        for (i, term) in self.terms.iter().enumerate() {
            let d = term.base.derivs(term.a * z + term.b, k_max + 1);
            let (mut gw, mut ga, mut gb) = (0.0, 0.0, 0.0);
            // a^k and k a^(k-1)
            let mut pow = 1.0;
            let mut dpow = 0.0;
            for k in 0..=k_max {
                let fb = fbar[k];
                if fb != 0.0 {
                    gw += fb * pow * d[k];
                    ga += fb * term.w * (dpow * d[k] + pow * z * d[k + 1]);
                    gb += fb * term.w * pow * d[k + 1];
                }
                dpow = dpow * term.a + pow;
                pow *= term.a;
            }
            raw[3 * i] += gw;
            raw[3 * i + 1] += ga;
            raw[3 * i + 2] += gb;
        }
        let last = 3 * self.terms.len();
        raw[last] += fbar[0] * z + if k_max >= 1 { fbar[1] } else { 0.0 };
    }

    /// Maps the raw term gradient onto the family's coefficient layout.
    pub(crate) fn finalize_raw(&self, raw: &[f64], out: &mut [f64]) {
        let n = self.n;
        match self.family {
            Family::Tanh | Family::XPlusSinSq => {}
            Family::Abu => {
                let gates: Vec<f64> = self.terms.iter().map(|t| t.w).collect();
                let mean: f64 = (0..n).map(|i| gates[i] * raw[3 * i]).sum();
                for i in 0..n {
                    out[i] += gates[i] * (raw[3 * i] - mean);
                    out[n + i] += raw[3 * i + 1];
                }
            }
            Family::LcTanh | Family::LcSin => {
                for i in 0..n {
                    out[i] += raw[3 * i];
                    out[n + i] += raw[3 * i + 1];
                    out[2 * n + i] += raw[3 * i + 2];
                }
            }
            Family::LcXSinSq => {
                let lin_bar = raw[3 * n];
                for i in 0..n {
                    out[i] += lin_bar;
                    out[n + i] += raw[3 * i];
                    out[2 * n + i] += raw[3 * i + 1];
                    out[3 * n + i] += raw[3 * i + 2];
                }
            }
        }
    }
}

/// An activation together with its learnable coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub coeffs: Vec<f64>,
}

impl ActivationSpec {
    pub fn new(kind: ActivationKind, coeffs: Vec<f64>) -> Result<Self> {
        kind.validate()?;
        if coeffs.len() != kind.coeff_count() {
            return Err(Error::InvalidActivation(format!(
                "{} expects {} coefficients, got {}",
                kind.label(),
                kind.coeff_count(),
                coeffs.len()
            )));
        }
        Ok(ActivationSpec { kind, coeffs })
    }

    pub fn tanh() -> Self {
        ActivationSpec { kind: ActivationKind::tanh(), coeffs: Vec::new() }
    }

    pub fn apply(&self, z: f64) -> f64 {
        self.kind.resolve(&self.coeffs).derivs(z, 0)[0]
    }

    /// `[f(z), f'(z), ..., f^(order)(z)]`.
    pub fn apply_derivs(&self, z: f64, order: usize) -> Result<Vec<f64>> {
        if order > 3 {
            return Err(Error::Contract(format!("activation derivative order {order} > 3")));
        }
        let d = self.kind.resolve(&self.coeffs).derivs(z, order);
        Ok(d[..=order].to_vec())
    }

    /// Gate weights of an ABU activation; `None` for the other families.
    pub fn gates(&self) -> Option<Vec<f64>> {
        (self.kind.family == Family::Abu)
            .then(|| gate_weights(&self.coeffs[..self.kind.n]).ok())
            .flatten()
    }
}

/// Initial coefficients chosen so that the activation starts close to its
/// single-term parent.
pub fn init_coeffs(kind: &ActivationKind, seed: u64) -> Result<Vec<f64>> {
    kind.validate()?;
    let n = kind.n;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shift = || rng.gen_range(-0.1..=0.1);
    let coeffs = match kind.family {
        Family::Tanh | Family::XPlusSinSq => Vec::new(),
        Family::Abu => {
            let mut c = vec![0.0; n];
            c.extend(std::iter::repeat(1.0).take(n));
            c
        }
        Family::LcTanh | Family::LcSin => {
            let mut c = vec![1.0 / nf; n];
            c.extend(std::iter::repeat(1.0).take(n));
            c.extend((0..n).map(|_| shift()));
            c
        }
        Family::LcXSinSq => {
            let mut c = vec![1.0 / nf; 2 * n];
            c.extend(std::iter::repeat(1.0).take(n));
            c.extend((0..n).map(|_| shift()));
            c
        }
    };
    Ok(coeffs)
}

pub fn init_activation(kind: &ActivationKind, seed: u64) -> Result<ActivationSpec> {
    let coeffs = init_coeffs(kind, seed)?;
    ActivationSpec::new(kind.clone(), coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_fd(f: impl Fn(f64) -> f64, z: f64, h: f64) -> f64 {
        (-f(z + 2.0 * h) + 8.0 * f(z + h) - 8.0 * f(z - h) + f(z - 2.0 * h)) / (12.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-3)
    }

    fn lcsin2() -> ActivationSpec {
        ActivationSpec::new(
            ActivationKind::new(Family::LcSin, 2),
            vec![0.7, -0.4, 1.3, 0.8, 0.2, -0.5],
        )
        .unwrap()
    }

    #[test]
    fn gate_uniform_and_closed_form() {
        let g = gate_weights(&[0.0, 0.0, 0.0]).unwrap();
        for v in &g {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let g = gate_weights(&[2f64.ln(), 0.0]).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gate_large_inputs_match_log_domain_oracle() {
        let alpha = [1000.0, 0.0, 0.0];
        let g = gate_weights(&alpha).unwrap();
        // log p_i = alpha_i - logsumexp(alpha), with the sum done as
        // 1000 + ln(1 + 2 e^-1000).
        let lse = 1000.0 + (2.0 * (-1000f64).exp()).ln_1p();
        for (gi, a) in g.iter().zip(alpha) {
            assert!(gi.is_finite());
            assert!((gi - (a - lse).exp()).abs() < 1e-300 + 1e-15);
        }
        assert!((g[0] - 1.0).abs() < 1e-15);
        assert!(gate_weights(&[f64::NAN]).is_err());
        assert!(gate_weights(&[]).is_err());
    }

    #[test]
    fn apply_reduces_to_parents() {
        let lc = ActivationSpec::new(ActivationKind::new(Family::LcTanh, 1), vec![1.0, 1.0, 0.0])
            .unwrap();
        assert_eq!(lc.apply(0.7), 0.7f64.tanh());
        let xs = ActivationSpec::new(ActivationKind::new(Family::XPlusSinSq, 1), vec![]).unwrap();
        assert_eq!(xs.apply(0.0), 0.0);
        let d = xs.apply_derivs(PI / 2.0, 1).unwrap();
        assert!((d[1] - 1.0).abs() < 1e-15);
        let t = ActivationSpec::tanh();
        assert_eq!(t.apply_derivs(0.0, 1).unwrap()[1], 1.0);
    }

    #[test]
    fn abu_uniform_blend_is_the_average() {
        let kind = ActivationKind::abu(vec![Candidate::Tanh, Candidate::Gelu, Candidate::Sigmoid]);
        let spec = ActivationSpec::new(kind, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let z: f64 = 0.5;
        let gelu = z * 0.5 * (1.0 + libm::erf(z / 2f64.sqrt()));
        let sig = 1.0 / (1.0 + (-z).exp());
        let expected = (z.tanh() + gelu + sig) / 3.0;
        assert!((spec.apply(z) - expected).abs() < 1e-15);
    }

    #[test]
    fn lctanh_identity_matches_tanh_on_grid() {
        let lc = ActivationSpec::new(ActivationKind::new(Family::LcTanh, 1), vec![1.0, 1.0, 0.0])
            .unwrap();
        let t = ActivationSpec::tanh();
        for i in 0..=1000 {
            let z = -5.0 + 10.0 * i as f64 / 1000.0;
            assert!((lc.apply(z) - t.apply(z)).abs() < 1e-15);
        }
    }

    #[test]
    fn lcsin_derivatives_match_fd() {
        let spec = lcsin2();
        let z = 0.3;
        let d = spec.apply_derivs(z, 3).unwrap();
        let f = |z: f64| spec.apply(z);
        let d1 = |z: f64| spec.apply_derivs(z, 1).unwrap()[1];
        let d2 = |z: f64| spec.apply_derivs(z, 2).unwrap()[2];
        assert!(rel_err(d[1], central_fd(f, z, 1e-3)) < 1e-6);
        assert!(rel_err(d[2], central_fd(d1, z, 1e-3)) < 1e-6);
        assert!(rel_err(d[3], central_fd(d2, z, 1e-3)) < 1e-4);
    }

    #[test]
    fn every_base_matches_fd_through_order_four() {
        let bases = [
            Base::Tanh,
            Base::Sin,
            Base::SinSq,
            Base::Gelu,
            Base::Sigmoid,
            Base::Exp,
            Base::Softplus,
            Base::Swish,
        ];
        for base in bases {
            for &z in &[-1.7, -0.4, 0.25, 1.1, 2.3] {
                let d = base.derivs(z, 4);
                for k in 0..4 {
                    let fd = central_fd(|s| base.derivs(s, 4)[k], z, 1e-3);
                    assert!(rel_err(d[k + 1], fd) < 1e-6, "{base:?} order {} at {z}", k + 1);
                }
            }
        }
        // ELU away from its kink
        for &z in &[-1.3, -0.2, 0.4] {
            let d = Base::Elu.derivs(z, 4);
            let fd = central_fd(|s| Base::Elu.derivs(s, 4)[0], z, 1e-4);
            assert!(rel_err(d[1], fd) < 1e-6);
        }
    }

    #[test]
    fn softplus_guards_overflow() {
        let d = Base::Softplus.derivs(800.0, 1);
        assert_eq!(d[0], 800.0);
        assert_eq!(d[1], 1.0);
        assert!(Base::Softplus.derivs(-800.0, 1)[0] >= 0.0);
    }

    #[test]
    fn init_is_close_to_parent() {
        let lc = init_activation(&ActivationKind::new(Family::LcSin, 3), 7).unwrap();
        for i in 0..=200 {
            let z = -1.0 + 2.0 * i as f64 / 200.0;
            assert!((lc.apply(z) - z.sin()).abs() < 0.05, "z = {z}");
        }
        let abu = init_activation(
            &ActivationKind::abu(vec![Candidate::Tanh, Candidate::Gelu, Candidate::Sin]),
            3,
        )
        .unwrap();
        for g in abu.gates().unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut lct = init_activation(&ActivationKind::new(Family::LcTanh, 1), 11).unwrap();
        lct.coeffs[2] = 0.0;
        for &z in &[-3.0, -0.5, 0.0, 0.9, 4.0] {
            assert_eq!(lct.apply(z), z.tanh());
        }
    }

    #[test]
    fn invalid_kinds_are_rejected() {
        assert!(ActivationKind::new(Family::Tanh, 2).validate().is_err());
        assert!(ActivationKind::new(Family::LcTanh, 0).validate().is_err());
        assert!(ActivationKind::abu(vec![Candidate::Tanh, Candidate::Sin]).validate().is_err());
        assert!(ActivationKind::abu(vec![Candidate::Tanh, Candidate::Sin, Candidate::Tanh])
            .validate()
            .is_err());
        assert!(ActivationSpec::new(ActivationKind::new(Family::LcSin, 2), vec![1.0; 5]).is_err());
    }

    #[test]
    fn coefficient_gradients_match_fd() {
        let kinds = [
            ActivationKind::new(Family::LcTanh, 2),
            ActivationKind::new(Family::LcSin, 3),
            ActivationKind::new(Family::LcXSinSq, 2),
            ActivationKind::abu(vec![Candidate::Tanh, Candidate::Gelu, Candidate::Sigmoid, Candidate::Sin]),
        ];
        let fbar = [0.3, -1.1, 0.7, 0.45];
        let z = 0.37;
        for kind in kinds {
            let mut coeffs = init_coeffs(&kind, 5).unwrap();
            for (i, c) in coeffs.iter_mut().enumerate() {
                *c += 0.13 * ((i as f64) * 1.7).sin();
            }
            let objective = |c: &[f64]| {
                let d = kind.resolve(c).derivs(z, 3);
                (0..4).map(|k| fbar[k] * d[k]).sum::<f64>()
            };
            let res = kind.resolve(&coeffs);
            let mut raw = vec![0.0; res.raw_len()];
            res.accumulate_raw(z, &fbar, 3, &mut raw);
            let mut grad = vec![0.0; coeffs.len()];
            res.finalize_raw(&raw, &mut grad);
            for i in 0..coeffs.len() {
                let h = 1e-5;
                let mut p = coeffs.clone();
                p[i] += h;
                let up = objective(&p);
                p[i] -= 2.0 * h;
                let dn = objective(&p);
                let fd = (up - dn) / (2.0 * h);
                assert!((grad[i] - fd).abs() < 1e-7 * (1.0 + fd.abs()), "{} coeff {i}", kind.label());
            }
        }
    }

    proptest! {
        #[test]
        fn gate_is_in_open_simplex_and_permutation_equivariant(
            alpha in proptest::collection::vec(-15.0f64..15.0, 1..7),
            rot in 0usize..7,
        ) {
            let g = gate_weights(&alpha).unwrap();
            let sum: f64 = g.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(g.iter().all(|&v| v > 0.0 && v < 1.0 || alpha.len() == 1));
            let k = rot % alpha.len();
            let mut rotated = alpha.clone();
            rotated.rotate_left(k);
            let mut g_rot = g.clone();
            g_rot.rotate_left(k);
            let g2 = gate_weights(&rotated).unwrap();
            for (a, b) in g2.iter().zip(&g_rot) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn order_zero_equals_apply(z in -4.0f64..4.0, fam in 0usize..6, seed in 0u64..50) {
            let family = Family::ALL[fam];
            let kind = match family {
                Family::Abu => ActivationKind::abu(vec![Candidate::Elu, Candidate::Swish, Candidate::Softplus]),
                Family::Tanh | Family::XPlusSinSq => ActivationKind::new(family, 1),
                _ => ActivationKind::new(family, 2),
            };
            let spec = init_activation(&kind, seed).unwrap();
            prop_assert_eq!(spec.apply_derivs(z, 3).unwrap()[0], spec.apply(z));
        }
    }
}
