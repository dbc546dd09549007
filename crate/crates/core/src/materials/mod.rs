//! Isotropic hyperelastic strain-energy families in plane strain.
//!
//! All energies are functions of the 2D invariants `I1 = tr C`, `I3 = det C`
//! of `C = FᵀF`. The 3D quantities used by the classical forms come from the
//! plane-strain closure (out-of-plane stretch 1):
//! `I1³ᴰ = I1 + 1`, `I2³ᴰ = I3 + I1`, `J = √I3`.

mod jet;
mod normalize;
mod sampling;

use std::collections::BTreeMap;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
pub use jet::Jet;
pub use normalize::{
    basis_stress_deviations, normalize_polynomial_coefficients, random_deformation_gradients,
    tangent_stiffness, BASIS_SAMPLES,
};
pub use sampling::{sample_material, sample_material_seeded, SubsetRule};

/// Reference invariants of the undeformed state.
pub const I0: [f64; 2] = [2.0, 1.0];

/// In-plane block of the deformation gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformationGradient2D(pub Matrix2<f64>);

impl DeformationGradient2D {
    pub fn identity() -> Self {
        Self(Matrix2::identity())
    }

    pub fn new(f11: f64, f12: f64, f21: f64, f22: f64) -> Self {
        Self(Matrix2::new(f11, f12, f21, f22))
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    pub fn right_cauchy_green(&self) -> Matrix2<f64> {
        self.0.transpose() * self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invariants2D {
    pub i1: f64,
    pub i3: f64,
}

impl Invariants2D {
    pub fn new(i1: f64, i3: f64) -> Self {
        Self { i1, i3 }
    }

    pub fn reference() -> Self {
        Self { i1: I0[0], i3: I0[1] }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.i1, self.i3]
    }
}

/// `I1 = tr(FᵀF)`, `I3 = det(FᵀF)`.
pub fn invariants_from_f(f: &DeformationGradient2D) -> Result<Invariants2D> {
    let det = f.det();
    if !(det > 0.0) {
        return Err(IcmError::NonPositiveJacobian(det));
    }
    let m = &f.0;
    let i1 = m[(0, 0)].powi(2) + m[(0, 1)].powi(2) + m[(1, 0)].powi(2) + m[(1, 1)].powi(2);
    Ok(Invariants2D { i1, i3: det * det })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Polynomial,
    Ogden,
    PucciSaccomandi,
    ExpLn,
    VanDerWaals,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Polynomial,
        Family::Ogden,
        Family::PucciSaccomandi,
        Family::ExpLn,
        Family::VanDerWaals,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Polynomial => "Polynomial",
            Family::Ogden => "Ogden",
            Family::PucciSaccomandi => "PucciSaccomandi",
            Family::ExpLn => "ExpLn",
            Family::VanDerWaals => "VanDerWaals",
        }
    }

    pub fn from_name(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| IcmError::Format(format!("unknown material family `{s}`")))
    }
}

/// `(i, j)` exponents of the polynomial basis `(Ī1-3)^i (Ī2-3)^j`, ordered by
/// total order then descending `i`: C10, C01, C20, C11, C02, C30, ...
pub const POLY_TERMS: [(u8, u8); 27] = {
    let mut out = [(0u8, 0u8); 27];
    let mut n = 0;
    let mut k = 1;
    while k <= 6 {
        let mut i = k as i32;
        while i >= 0 {
            out[n] = (i as u8, (k as i32 - i) as u8);
            n += 1;
            i -= 1;
        }
        k += 1;
    }
    out
};

/// Number of polynomial `C_ij` with `i + j <= 3`.
pub const POLY_LOW_ORDER: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    /// Coefficients in [`POLY_TERMS`] order (MPa).
    pub c: [f64; 27],
    /// Volumetric coefficients `D1..D4` (MPa).
    pub d: [f64; 4],
}

impl Polynomial {
    pub fn zero() -> Self {
        Self { c: [0.0; 27], d: [0.0; 4] }
    }

    pub fn coefficient_index(i: u8, j: u8) -> Option<usize> {
        POLY_TERMS.iter().position(|&t| t == (i, j))
    }

    pub fn set(&mut self, i: u8, j: u8, value: f64) {
        let k = Self::coefficient_index(i, j).expect("polynomial term out of range");
        self.c[k] = value;
    }

    pub fn get(&self, i: u8, j: u8) -> f64 {
        Self::coefficient_index(i, j).map_or(0.0, |k| self.c[k])
    }

    /// All 31 coefficients, `C` terms first then `D1..D4`.
    pub fn coefficients(&self) -> [f64; 31] {
        let mut out = [0.0; 31];
        out[..27].copy_from_slice(&self.c);
        out[27..].copy_from_slice(&self.d);
        out
    }

    pub fn from_coefficients(all: &[f64; 31]) -> Self {
        let mut p = Self::zero();
        p.c.copy_from_slice(&all[..27]);
        p.d.copy_from_slice(&all[27..]);
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaterialModel {
    Polynomial(Polynomial),
    Ogden { mu: [f64; 6], alpha: [f64; 6], d: [f64; 4] },
    PucciSaccomandi { mu: f64, jm: f64, c2: f64, d: f64 },
    ExpLn { mu: f64, a: f64, b: f64, d: f64 },
    VanDerWaals { mu: f64, lambda_m: f64, a: f64, beta: f64, d: f64 },
}

/// Isochoric/volumetric building blocks as jets of `(I1, I3)`.
struct Kinematics {
    i1bar: Jet,
    i2bar: Jet,
    j: Jet,
    i3: Jet,
}

impl Kinematics {
    fn new(inv: Invariants2D) -> Self {
        let i1 = Jet::var(inv.i1, 0);
        let i3 = Jet::var(inv.i3, 1);
        let i1bar = (i1 + 1.0) * i3.powf(-1.0 / 3.0);
        let i2bar = (i3 + i1) * i3.powf(-2.0 / 3.0);
        Kinematics { i1bar, i2bar, j: i3.sqrt(), i3 }
    }

    /// `(J² - 1)/2 - ln J`.
    fn log_volumetric(&self) -> Jet {
        (self.i3 - 1.0) * 0.5 - self.i3.ln() * 0.5
    }

    fn polynomial_volumetric(&self, d: &[f64; 4]) -> Jet {
        let jm1 = self.j - 1.0;
        let mut out = Jet::constant(0.0);
        for (m, &dm) in d.iter().enumerate() {
            if dm != 0.0 {
                out = out + jm1.powi(2 * (m as i32 + 1)) * dm;
            }
        }
        out
    }
}

/// `cosh(p·acosh x)` with first and second derivatives in `x`, stable at the
/// equal-stretch point `x = 1`. Below 1 (not reachable from a real `F`, but hit by
/// finite differences in the invariants) it continues analytically as `cos(p·acos x)`.
fn cosh_power(x: f64, p: f64) -> (f64, f64, f64) {
    let t2 = if x >= 1.0 { x.acosh().powi(2) } else { -x.min(1.0).acos().powi(2) };
    let p2 = p * p;
    if t2.abs() < 1e-8 {
        let a = (p2 - 1.0) / 6.0;
        let b = (p2 - 1.0) * (3.0 * p2 - 7.0) / 360.0;
        let f = 1.0 + p2 * t2 / 2.0 + p2 * p2 * t2 * t2 / 24.0;
        (f, p2 * (1.0 + a * t2 + b * t2 * t2), p2 * (2.0 * a + (4.0 * b - a / 3.0) * t2))
    } else if x > 1.0 {
        let t = t2.sqrt();
        let (st, ct) = (t.sinh(), t.cosh());
        let (spt, cpt) = ((p * t).sinh(), (p * t).cosh());
        (cpt, p * spt / st, p * (p * cpt * st - spt * ct) / (st * st * st))
    } else {
        let s = (-t2).sqrt();
        let (ss, cs) = (s.sin(), s.cos());
        let (sps, cps) = ((p * s).sin(), (p * s).cos());
        (cps, p * sps / ss, -p * (p * cps * ss - sps * cs) / (ss * ss * ss))
    }
}

impl MaterialModel {
    pub fn family(&self) -> Family {
        match self {
            MaterialModel::Polynomial(_) => Family::Polynomial,
            MaterialModel::Ogden { .. } => Family::Ogden,
            MaterialModel::PucciSaccomandi { .. } => Family::PucciSaccomandi,
            MaterialModel::ExpLn { .. } => Family::ExpLn,
            MaterialModel::VanDerWaals { .. } => Family::VanDerWaals,
        }
    }

    /// Energy density with exact first and second invariant derivatives.
    pub fn energy_jet(&self, inv: Invariants2D) -> Result<Jet> {
        if !(inv.i3 > 0.0) || !inv.i1.is_finite() || !inv.i3.is_finite() {
            return Err(IcmError::DomainViolation(format!(
                "invariants ({}, {}) are not admissible",
                inv.i1, inv.i3
            )));
        }
        let k = Kinematics::new(inv);
        let psi = match self {
            MaterialModel::Polynomial(p) => {
                let x = k.i1bar - 3.0;
                let y = k.i2bar - 3.0;
                let mut psi = Jet::constant(0.0);
                for (&(i, j), &c) in POLY_TERMS.iter().zip(p.c.iter()) {
                    if c != 0.0 {
                        psi = psi + x.powi(i as i32) * y.powi(j as i32) * c;
                    }
                }
                psi + k.polynomial_volumetric(&p.d)
            }
            MaterialModel::Ogden { mu, alpha, d } => {
                let i1 = Jet::var(inv.i1, 0);
                let x = i1 * 0.5 / k.j;
                let mut psi = Jet::constant(0.0);
                for (&m, &a) in mu.iter().zip(alpha.iter()) {
                    if m == 0.0 || a == 0.0 {
                        continue;
                    }
                    let (f, df, d2f) = cosh_power(x.v, 0.5 * a);
                    let planar = k.i3.powf(a / 12.0) * x.chain(f, df, d2f) * 2.0;
                    let stretches = planar + k.i3.powf(-a / 6.0) - 3.0;
                    psi = psi + stretches * (2.0 * m / (a * a));
                }
                psi + k.polynomial_volumetric(d)
            }
            MaterialModel::PucciSaccomandi { mu, jm, c2, d } => {
                let arg = -(k.i1bar - 3.0) * (1.0 / jm) + 1.0;
                if !(arg.v > 0.0) {
                    return Err(IcmError::DomainViolation(format!(
                        "Pucci-Saccomandi log argument {} <= 0",
                        arg.v
                    )));
                }
                arg.ln() * (-mu * jm / 2.0)
                    + (k.i2bar * (1.0 / 3.0)).ln() * *c2
                    + k.log_volumetric() * *d
            }
            MaterialModel::ExpLn { mu, a, b, d } => {
                let c = 1.0 / a + b;
                let y = k.i1bar - 2.0;
                if !(y.v > 0.0) {
                    return Err(IcmError::DomainViolation(format!("Exp-ln requires Ī1 > 2, got {}", k.i1bar.v)));
                }
                let expo = ((k.i1bar - 3.0) * *a).exp() * (1.0 / a);
                let logt = y * (-y.ln() + 1.0) * *b;
                (expo + logt - c) * (mu / 2.0) + k.log_volumetric() * *d
            }
            MaterialModel::VanDerWaals { mu, lambda_m, a, beta, d } => {
                let lm2 = lambda_m * lambda_m - 3.0;
                let itilde = k.i1bar * (1.0 - beta) + k.i2bar * *beta;
                let x = itilde - 3.0;
                let xv = if x.v < 0.0 && x.v > -1e-12 { 0.0 } else { x.v };
                if xv < 0.0 {
                    return Err(IcmError::DomainViolation(format!("van der Waals Ĩ - 3 = {xv} < 0")));
                }
                let eta = (xv / lm2).sqrt();
                if !(eta < 1.0) {
                    return Err(IcmError::DomainViolation(format!("van der Waals η = {eta} >= 1")));
                }
                // -(λm²-3)(ln(1-η)+η) and -(2a/3)((Ĩ-3)/2)^(3/2) as functions of x = Ĩ-3.
                let (lock, dlock, d2lock) = if xv > 0.0 {
                    (
                        -lm2 * ((1.0 - eta).ln() + eta),
                        0.5 / (1.0 - eta),
                        0.25 / ((1.0 - eta).powi(2) * eta * lm2),
                    )
                } else {
                    (0.0, 0.5, 0.0)
                };
                let (soft, dsoft, d2soft) = if xv > 0.0 {
                    let h = (0.5 * xv).sqrt();
                    (-(2.0 * a / 3.0) * h.powi(3), -0.5 * a * h, -0.125 * a / h)
                } else {
                    (0.0, 0.0, 0.0)
                };
                let body = x.chain(lock + soft, dlock + dsoft, d2lock + d2soft);
                body * *mu + k.log_volumetric() * *d
            }
        };
        if !psi.v.is_finite() || psi.d.iter().any(|v| !v.is_finite()) {
            return Err(IcmError::DomainViolation(format!(
                "non-finite energy at ({}, {})",
                inv.i1, inv.i3
            )));
        }
        Ok(psi)
    }

    pub fn energy(&self, inv: Invariants2D) -> Result<f64> {
        Ok(self.energy_jet(inv)?.v)
    }

    /// `(∂ψ/∂I1, ∂ψ/∂I3)`.
    pub fn grad_energy(&self, inv: Invariants2D) -> Result<[f64; 2]> {
        Ok(self.energy_jet(inv)?.d)
    }

    pub fn hessian_energy(&self, inv: Invariants2D) -> Result<[[f64; 2]; 2]> {
        Ok(self.energy_jet(inv)?.hessian())
    }

    /// Multiply every stress-like parameter by `c`.
    pub fn scaled(&self, c: f64) -> MaterialModel {
        match self.clone() {
            MaterialModel::Polynomial(mut p) => {
                p.c.iter_mut().chain(p.d.iter_mut()).for_each(|v| *v *= c);
                MaterialModel::Polynomial(p)
            }
            MaterialModel::Ogden { mut mu, alpha, mut d } => {
                mu.iter_mut().chain(d.iter_mut()).for_each(|v| *v *= c);
                MaterialModel::Ogden { mu, alpha, d }
            }
            MaterialModel::PucciSaccomandi { mu, jm, c2, d } => {
                MaterialModel::PucciSaccomandi { mu: mu * c, jm, c2: c2 * c, d: d * c }
            }
            MaterialModel::ExpLn { mu, a, b, d } => MaterialModel::ExpLn { mu: mu * c, a, b, d: d * c },
            MaterialModel::VanDerWaals { mu, lambda_m, a, beta, d } => {
                MaterialModel::VanDerWaals { mu: mu * c, lambda_m, a, beta, d: d * c }
            }
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        match self {
            MaterialModel::Polynomial(p) => {
                for (&(i, j), &c) in POLY_TERMS.iter().zip(p.c.iter()) {
                    out.insert(format!("C{i}{j}"), c);
                }
                for (m, &d) in p.d.iter().enumerate() {
                    out.insert(format!("D{}", m + 1), d);
                }
            }
            MaterialModel::Ogden { mu, alpha, d } => {
                for k in 0..6 {
                    out.insert(format!("mu{}", k + 1), mu[k]);
                    out.insert(format!("alpha{}", k + 1), alpha[k]);
                }
                for (m, &v) in d.iter().enumerate() {
                    out.insert(format!("D{}", m + 1), v);
                }
            }
            MaterialModel::PucciSaccomandi { mu, jm, c2, d } => {
                out.insert("mu".into(), *mu);
                out.insert("Jm".into(), *jm);
                out.insert("C2".into(), *c2);
                out.insert("D".into(), *d);
            }
            MaterialModel::ExpLn { mu, a, b, d } => {
                out.insert("mu".into(), *mu);
                out.insert("a".into(), *a);
                out.insert("b".into(), *b);
                out.insert("D".into(), *d);
            }
            MaterialModel::VanDerWaals { mu, lambda_m, a, beta, d } => {
                out.insert("mu".into(), *mu);
                out.insert("lambda_m".into(), *lambda_m);
                out.insert("a".into(), *a);
                out.insert("beta".into(), *beta);
                out.insert("D".into(), *d);
            }
        }
        out
    }

    pub fn from_params(family: Family, params: &BTreeMap<String, f64>) -> Result<MaterialModel> {
        let known: Vec<String> = match family {
            Family::Polynomial => MaterialModel::Polynomial(Polynomial::zero()).params().into_keys().collect(),
            Family::Ogden => MaterialModel::Ogden { mu: [0.0; 6], alpha: [0.0; 6], d: [0.0; 4] }
                .params()
                .into_keys()
                .collect(),
            Family::PucciSaccomandi => vec!["mu".into(), "Jm".into(), "C2".into(), "D".into()],
            Family::ExpLn => vec!["mu".into(), "a".into(), "b".into(), "D".into()],
            Family::VanDerWaals => {
                vec!["mu".into(), "lambda_m".into(), "a".into(), "beta".into(), "D".into()]
            }
        };
        if let Some(bad) = params.keys().find(|k| !known.contains(k)) {
            return Err(IcmError::Format(format!("unknown {} parameter `{bad}`", family.name())));
        }
        let get = |k: &str| params.get(k).copied().unwrap_or(0.0);
        let required = |k: &str| {
            params
                .get(k)
                .copied()
                .ok_or_else(|| IcmError::Format(format!("missing {} parameter `{k}`", family.name())))
        };
        Ok(match family {
            Family::Polynomial => {
                let mut p = Polynomial::zero();
                for (n, &(i, j)) in POLY_TERMS.iter().enumerate() {
                    p.c[n] = get(&format!("C{i}{j}"));
                }
                for m in 0..4 {
                    p.d[m] = get(&format!("D{}", m + 1));
                }
                MaterialModel::Polynomial(p)
            }
            Family::Ogden => {
                let mut mu = [0.0; 6];
                let mut alpha = [0.0; 6];
                let mut d = [0.0; 4];
                for k in 0..6 {
                    mu[k] = get(&format!("mu{}", k + 1));
                    alpha[k] = get(&format!("alpha{}", k + 1));
                }
                for m in 0..4 {
                    d[m] = get(&format!("D{}", m + 1));
                }
                MaterialModel::Ogden { mu, alpha, d }
            }
            Family::PucciSaccomandi => MaterialModel::PucciSaccomandi {
                mu: required("mu")?,
                jm: required("Jm")?,
                c2: get("C2"),
                d: required("D")?,
            },
            Family::ExpLn => MaterialModel::ExpLn {
                mu: required("mu")?,
                a: required("a")?,
                b: get("b"),
                d: required("D")?,
            },
            Family::VanDerWaals => MaterialModel::VanDerWaals {
                mu: required("mu")?,
                lambda_m: required("lambda_m")?,
                a: get("a"),
                beta: get("beta"),
                d: required("D")?,
            },
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MaterialRecord {
    family: String,
    params: BTreeMap<String, f64>,
}

impl Serialize for MaterialModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaterialRecord { family: self.family().name().to_string(), params: self.params() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaterialModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = MaterialRecord::deserialize(d)?;
        let family = Family::from_name(&rec.family).map_err(serde::de::Error::custom)?;
        MaterialModel::from_params(family, &rec.params).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StressKind {
    SecondPiolaKirchhoff,
    FirstPiolaKirchhoff,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StressTensor2D {
    pub kind: StressKind,
    pub value: Matrix2<f64>,
}

impl StressTensor2D {
    pub fn components(&self) -> [f64; 4] {
        let m = &self.value;
        [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
    }
}

/// `S = 2(∂ψ/∂I1·I + ∂ψ/∂I3·I3·C⁻¹)` for a given invariant gradient.
pub fn stress_from_gradient(f: &DeformationGradient2D, grad: [f64; 2]) -> Result<StressTensor2D> {
    invariants_from_f(f)?;
    let c = f.right_cauchy_green();
    // I3·C⁻¹ = adj(C) for 2×2
    let adj = Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]);
    let s = (Matrix2::identity() * grad[0] + adj * grad[1]) * 2.0;
    let s = (s + s.transpose()) * 0.5;
    Ok(StressTensor2D { kind: StressKind::SecondPiolaKirchhoff, value: s })
}

/// `P = F·S`.
pub fn first_pk_from_gradient(f: &DeformationGradient2D, grad: [f64; 2]) -> Result<StressTensor2D> {
    let s = stress_from_gradient(f, grad)?;
    Ok(StressTensor2D { kind: StressKind::FirstPiolaKirchhoff, value: f.0 * s.value })
}

/// Any source of `∇ψ(I)`: a closed-form material, a scaled wrapper, or a
/// learned model. Batched so that network-backed providers evaluate all
/// queries in one pass.
pub trait GradientProvider {
    fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>>;

    /// Invariant Hessians; central differences of [`gradients`](Self::gradients) unless overridden.
    /// Not symmetrized: a learned gradient field need not be conservative.
    fn hessians(&self, invariants: &[Invariants2D]) -> Result<Vec<[[f64; 2]; 2]>> {
        let mut out = vec![[[0.0; 2]; 2]; invariants.len()];
        for k in 0..2 {
            let steps: Vec<f64> =
                invariants.iter().map(|inv| 1e-6 * inv.as_array()[k].abs().max(1.0)).collect();
            let shift = |sign: f64| -> Vec<Invariants2D> {
                invariants
                    .iter()
                    .zip(&steps)
                    .map(|(inv, h)| {
                        let mut a = inv.as_array();
                        a[k] += sign * h;
                        Invariants2D::new(a[0], a[1])
                    })
                    .collect()
            };
            let plus = self.gradients(&shift(1.0))?;
            let minus = self.gradients(&shift(-1.0))?;
            for (n, h) in steps.iter().enumerate() {
                for r in 0..2 {
                    out[n][r][k] = (plus[n][r] - minus[n][r]) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }
}

impl GradientProvider for MaterialModel {
    fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>> {
        invariants.iter().map(|&inv| self.grad_energy(inv)).collect()
    }

    fn hessians(&self, invariants: &[Invariants2D]) -> Result<Vec<[[f64; 2]; 2]>> {
        invariants.iter().map(|&inv| self.hessian_energy(inv)).collect()
    }
}

impl<T: GradientProvider + ?Sized> GradientProvider for &T {
    fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>> {
        (**self).gradients(invariants)
    }

    fn hessians(&self, invariants: &[Invariants2D]) -> Result<Vec<[[f64; 2]; 2]>> {
        (**self).hessians(invariants)
    }
}

/// `factor · ∇ψ` of an inner provider.
pub struct Scaled<P> {
    pub inner: P,
    pub factor: f64,
}

impl<P: GradientProvider> GradientProvider for Scaled<P> {
    fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>> {
        let mut g = self.inner.gradients(invariants)?;
        g.iter_mut().for_each(|v| {
            v[0] *= self.factor;
            v[1] *= self.factor;
        });
        Ok(g)
    }

    fn hessians(&self, invariants: &[Invariants2D]) -> Result<Vec<[[f64; 2]; 2]>> {
        let mut h = self.inner.hessians(invariants)?;
        h.iter_mut().flatten().flatten().for_each(|v| *v *= self.factor);
        Ok(h)
    }
}

/// Second Piola–Kirchhoff stress of any gradient provider at `F`.
pub fn second_pk_stress<P: GradientProvider + ?Sized>(
    provider: &P,
    f: &DeformationGradient2D,
) -> Result<StressTensor2D> {
    let inv = invariants_from_f(f)?;
    let g = provider.gradients(&[inv])?[0];
    stress_from_gradient(f, g)
}

pub fn first_pk_stress<P: GradientProvider + ?Sized>(
    provider: &P,
    f: &DeformationGradient2D,
) -> Result<StressTensor2D> {
    let inv = invariants_from_f(f)?;
    let g = provider.gradients(&[inv])?[0];
    first_pk_from_gradient(f, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::Rng;

    use crate::rng::stream_rng;

    fn random_f(rng: &mut impl Rng, amp: f64) -> DeformationGradient2D {
        loop {
            let f = DeformationGradient2D::new(
                1.0 + rng.gen_range(-amp..amp),
                rng.gen_range(-amp..amp),
                rng.gen_range(-amp..amp),
                1.0 + rng.gen_range(-amp..amp),
            );
            if f.det() > 0.3 {
                return f;
            }
        }
    }

    fn sample_models() -> Vec<MaterialModel> {
        let rules = [
            SubsetRule::PolynomialA,
            SubsetRule::PolynomialC,
            SubsetRule::OgdenLow,
            SubsetRule::OgdenHigh,
            SubsetRule::PucciSaccomandi,
            SubsetRule::ExpLn,
            SubsetRule::VanDerWaals,
        ];
        rules.iter().enumerate().map(|(k, &r)| sample_material_seeded(r, 7, k as u64).unwrap()).collect()
    }

    #[test]
    fn cosh_power_smooth_across_equal_stretch() {
        for p in [0.6, 1.5, 4.0, 9.0] {
            for x in [1.0 - 1e-3, 1.0 - 1e-9, 1.0, 1.0 + 1e-9, 1.0 + 1e-3, 0.7, 1.6] {
                let (f, df, d2f) = cosh_power(x, p);
                let h = 1e-6;
                let (fp, dfp, _) = cosh_power(x + h, p);
                let (fm, dfm, _) = cosh_power(x - h, p);
                assert!(((fp - fm) / (2.0 * h) - df).abs() < 1e-6 * df.abs().max(1.0), "p {p} x {x}");
                assert!(((dfp - dfm) / (2.0 * h) - d2f).abs() < 1e-5 * d2f.abs().max(1.0), "p {p} x {x}");
                assert!(f.is_finite());
            }
        }
    }

    #[test]
    fn invariants_examples() {
        let i = invariants_from_f(&DeformationGradient2D::identity()).unwrap();
        assert_eq!((i.i1, i.i3), (2.0, 1.0));
        let i = invariants_from_f(&DeformationGradient2D::new(2.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!((i.i1, i.i3), (5.0, 4.0));
        let i = invariants_from_f(&DeformationGradient2D::new(1.0, 0.3, 0.0, 1.0)).unwrap();
        assert!((i.i1 - 2.09).abs() < 1e-15 && (i.i3 - 1.0).abs() < 1e-15);
        assert!(matches!(
            invariants_from_f(&DeformationGradient2D::new(0.0, 1.0, 1.0, 0.0)),
            Err(IcmError::NonPositiveJacobian(_))
        ));
    }

    #[test]
    fn reference_energies_vanish() {
        let mut p = Polynomial::zero();
        for (k, v) in p.c.iter_mut().enumerate() {
            *v = 1.0 + k as f64;
        }
        p.d = [3.0, 1.0, 2.0, 5.0];
        let e = MaterialModel::Polynomial(p).energy(Invariants2D::reference()).unwrap();
        assert!(e.abs() < 1e-12);
        let m = MaterialModel::ExpLn { mu: 2.0, a: 1.0, b: 0.5, d: 10.0 };
        assert!(m.energy(Invariants2D::reference()).unwrap().abs() < 1e-14);
    }

    #[test]
    fn volumetric_only_polynomial_has_no_i1_gradient() {
        let mut p = Polynomial::zero();
        p.d[0] = 4.0;
        let m = MaterialModel::Polynomial(p);
        assert_eq!(m.grad_energy(Invariants2D::reference()).unwrap()[0], 0.0);
        assert_eq!(m.grad_energy(Invariants2D::new(2.3, 1.2)).unwrap()[0], 0.0);
    }

    /// Ogden energy from eigen-stretches of C, independent of the cosh form.
    fn ogden_direct(mu: &[f64; 6], alpha: &[f64; 6], d: &[f64; 4], f: &DeformationGradient2D) -> f64 {
        let c = f.right_cauchy_green();
        let eig = SymmetricEigen::new(c);
        let l1 = eig.eigenvalues[0].sqrt();
        let l2 = eig.eigenvalues[1].sqrt();
        let j = l1 * l2;
        let mut psi = 0.0;
        for k in 0..6 {
            if mu[k] == 0.0 {
                continue;
            }
            let a = alpha[k];
            let lb = |l: f64| (j.powf(-1.0 / 3.0) * l).powf(a);
            psi += 2.0 * mu[k] / (a * a) * (lb(l1) + lb(l2) + lb(1.0) - 3.0);
        }
        for m in 0..4 {
            psi += d[m] * (j - 1.0).powi(2 * (m as i32 + 1));
        }
        psi
    }

    #[test]
    fn ogden_matches_eigen_decomposition() {
        let mut rng = stream_rng(11, 0);
        let mu = [12.0, 30.0, 0.0, 0.0, 0.0, 0.0];
        let alpha = [2.7, 1.4, 1.0, 1.0, 1.0, 1.0];
        let d = [20.0, 5.0, 0.0, 1.0];
        let m = MaterialModel::Ogden { mu, alpha, d };
        for _ in 0..200 {
            let f = random_f(&mut rng, 0.4);
            let inv = invariants_from_f(&f).unwrap();
            let a = m.energy(inv).unwrap();
            let b = ogden_direct(&mu, &alpha, &d, &f);
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
        // near the equal-stretch point
        for s in [0.0, 1e-9, 1e-7, 1e-5, 1e-3] {
            let f = DeformationGradient2D::new(1.1 + s, 0.0, 0.0, 1.1);
            let inv = invariants_from_f(&f).unwrap();
            let a = m.energy(inv).unwrap();
            let b = ogden_direct(&mu, &alpha, &d, &f);
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            assert!(m.grad_energy(inv).unwrap().iter().all(|g| g.is_finite()));
        }
    }

    fn fd_gradient(m: &MaterialModel, inv: Invariants2D) -> [f64; 2] {
        let mut out = [0.0; 2];
        for k in 0..2 {
            let mut a = inv.as_array();
            let h = 1e-6 * a[k].abs().max(1.0);
            a[k] += h;
            let p = m.energy(Invariants2D::new(a[0], a[1])).unwrap();
            a[k] -= 2.0 * h;
            let q = m.energy(Invariants2D::new(a[0], a[1])).unwrap();
            out[k] = (p - q) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences_all_families() {
        let mut rng = stream_rng(3, 1);
        for m in sample_models() {
            let mut checked = 0;
            while checked < 100 {
                let f = random_f(&mut rng, 0.3);
                let inv = invariants_from_f(&f).unwrap();
                let (Ok(g), Ok(_)) = (m.grad_energy(inv), m.energy(inv)) else { continue };
                let fd = fd_gradient(&m, inv);
                let scale = g[0].abs().max(g[1].abs());
                for k in 0..2 {
                    assert!(
                        (g[k] - fd[k]).abs() <= 1e-6 * scale,
                        "{:?} at {:?}: {:?} vs {:?}",
                        m.family(),
                        inv,
                        g,
                        fd
                    );
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let mut rng = stream_rng(5, 2);
        for m in sample_models() {
            for _ in 0..20 {
                let f = random_f(&mut rng, 0.3);
                let inv = invariants_from_f(&f).unwrap();
                let h = m.hessian_energy(inv).unwrap();
                let scale = h.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
                for k in 0..2 {
                    let mut a = inv.as_array();
                    let step = 1e-6 * a[k].abs().max(1.0);
                    a[k] += step;
                    let gp = m.grad_energy(Invariants2D::new(a[0], a[1])).unwrap();
                    a[k] -= 2.0 * step;
                    let gm = m.grad_energy(Invariants2D::new(a[0], a[1])).unwrap();
                    for r in 0..2 {
                        let fd = (gp[r] - gm[r]) / (2.0 * step);
                        assert!((h[r][k] - fd).abs() <= 1e-5 * scale, "{:?}", m.family());
                    }
                }
            }
        }
    }

    #[test]
    fn pucci_saccomandi_gradient_grows_toward_locking() {
        let m = MaterialModel::PucciSaccomandi { mu: 10.0, jm: 4.0, c2: 1.0, d: 50.0 };
        // equibiaxial-in-plane isochoric-ish ray: Ī1 increases with s
        let mut last = 0.0;
        let mut reached_limit = false;
        for k in 0..400 {
            let s = 1.0 + 0.005 * k as f64;
            let inv = Invariants2D::new(s * s + 1.0 / (s * s), 1.0);
            match m.grad_energy(inv) {
                Ok(g) => {
                    let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
                    assert!(n > last);
                    last = n;
                }
                Err(IcmError::DomainViolation(_)) => {
                    reached_limit = true;
                    break;
                }
                Err(e) => panic!("{e}"),
            }
        }
        assert!(reached_limit);
    }

    #[test]
    fn domain_guards() {
        let ps = MaterialModel::PucciSaccomandi { mu: 1.0, jm: 1.0, c2: 0.0, d: 1.0 };
        assert!(matches!(ps.energy(Invariants2D::new(6.0, 1.0)), Err(IcmError::DomainViolation(_))));
        let vdw = MaterialModel::VanDerWaals { mu: 1.0, lambda_m: 2.0, a: 0.1, beta: 0.5, d: 1.0 };
        assert!(matches!(vdw.energy(Invariants2D::new(9.0, 1.0)), Err(IcmError::DomainViolation(_))));
    }

    fn fd_stress_from_c(m: &MaterialModel, f: &DeformationGradient2D) -> Matrix2<f64> {
        // ψ as a function of symmetric C; S_lr = 2 ∂ψ/∂C_lr with symmetric perturbations.
        let c = f.right_cauchy_green();
        let psi = |c: Matrix2<f64>| {
            let inv = Invariants2D::new(c[(0, 0)] + c[(1, 1)], c.determinant());
            m.energy(inv).unwrap()
        };
        let h = 1e-5;
        let mut s = Matrix2::zeros();
        for (l, r) in [(0, 0), (1, 1), (0, 1)] {
            let mut e = Matrix2::zeros();
            e[(l, r)] = 1.0;
            e[(r, l)] = 1.0;
            let d = (psi(c + e * h) - psi(c - e * h)) / (2.0 * h);
            // symmetric perturbation of an off-diagonal pair moves both entries
            let d = if l == r { d } else { d / 2.0 };
            s[(l, r)] = 2.0 * d;
            s[(r, l)] = 2.0 * d;
        }
        s
    }

    #[test]
    fn second_pk_matches_finite_differences_in_c() {
        let mut rng = stream_rng(17, 3);
        for m in sample_models() {
            for _ in 0..30 {
                let f = random_f(&mut rng, 0.25);
                let Ok(s) = second_pk_stress(&m, &f) else { continue };
                let fd = fd_stress_from_c(&m, &f);
                let scale = s.value.norm().max(1e-12);
                assert!((s.value - fd).norm() <= 1e-7 * scale.max(fd.norm()), "{:?}", m.family());
            }
        }
    }

    #[test]
    fn identity_stress_with_c10_d1_only() {
        let mut p = Polynomial::zero();
        p.set(1, 0, 0.7);
        p.d[0] = 2.0;
        let m = MaterialModel::Polynomial(p);
        let f = DeformationGradient2D::identity();
        let s = second_pk_stress(&m, &f).unwrap();
        let fd = fd_stress_from_c(&m, &f);
        assert!((s.value - fd).norm() <= 1e-8);
        assert!(s.value.norm() < 1e-12);
    }

    #[test]
    fn stress_symmetric_and_first_pk_consistent() {
        let mut rng = stream_rng(19, 4);
        let models = sample_models();
        for k in 0..1000 {
            let m = &models[k % models.len()];
            let f = random_f(&mut rng, 0.3);
            let Ok(s) = second_pk_stress(m, &f) else { continue };
            let v = s.value;
            assert!((v[(0, 1)] - v[(1, 0)]).abs() <= 1e-12 * v.norm().max(1e-300));
            let p = first_pk_stress(m, &f).unwrap();
            assert!((p.value - f.0 * v).norm() <= 1e-12 * p.value.norm().max(1e-300));
        }
    }

    #[test]
    fn isotropy_under_rotations() {
        let mut rng = stream_rng(23, 5);
        let rot = |t: f64| Matrix2::new(t.cos(), -t.sin(), t.sin(), t.cos());
        for m in sample_models() {
            for _ in 0..20 {
                let f = random_f(&mut rng, 0.25);
                let Ok(a) = m.energy(invariants_from_f(&f).unwrap()) else { continue };
                let g = DeformationGradient2D(rot(rng.gen_range(0.0..6.3)) * f.0 * rot(rng.gen_range(0.0..6.3)));
                let b = m.energy(invariants_from_f(&g).unwrap()).unwrap();
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-8));
            }
        }
    }

    #[test]
    fn affine_homogeneity_of_stress_parameters() {
        let mut rng = stream_rng(29, 6);
        for m in sample_models() {
            let c = 3.7;
            let mc = m.scaled(c);
            for _ in 0..20 {
                let f = random_f(&mut rng, 0.25);
                let inv = invariants_from_f(&f).unwrap();
                let Ok(e) = m.energy(inv) else { continue };
                let ec = mc.energy(inv).unwrap();
                assert!((ec - c * e).abs() <= 1e-12 * (c * e).abs().max(1e-12));
                let g = m.grad_energy(inv).unwrap();
                let gc = mc.grad_energy(inv).unwrap();
                for k in 0..2 {
                    assert!((gc[k] - c * g[k]).abs() <= 1e-12 * (c * g[k]).abs().max(1e-12));
                }
                let s = second_pk_stress(&m, &f).unwrap().value * c;
                let sc = second_pk_stress(&mc, &f).unwrap().value;
                assert!((s - sc).norm() <= 1e-12 * s.norm().max(1e-12));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(rule in 0usize..8, seed in 0u64..1000) {
            let rule = SubsetRule::ALL[rule];
            let m = sample_material_seeded(rule, seed, 0).unwrap();
            let s = serde_json::to_string(&m).unwrap();
            let back: MaterialModel = serde_json::from_str(&s).unwrap();
            proptest::prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn json_shape() {
        let m = MaterialModel::ExpLn { mu: 2.0, a: 1.0, b: 0.5, d: 10.0 };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["family"], "ExpLn");
        assert_eq!(v["params"]["mu"], 2.0);
        let bad = r#"{"family":"ExpLn","params":{"mu":1,"a":1,"D":1,"zeta":2}}"#;
        assert!(serde_json::from_str::<MaterialModel>(bad).is_err());
    }
}
