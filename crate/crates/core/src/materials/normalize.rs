//! Two-step scaling of polynomial coefficients: per-basis stress deviation,
//! then small-strain tangent stiffness.

use rand::Rng;

use super::{first_pk_stress, DeformationGradient2D, MaterialModel, Polynomial};
use crate::error::{IcmError, Result};
use crate::rng::stream_rng;

pub const BASIS_SAMPLES: usize = 1000;

/// `F = I + U[-0.5, 0.5]^{2×2}`, resampled until `det F > 0.2`.
pub fn random_deformation_gradients(seed: u64, n: usize) -> Vec<DeformationGradient2D> {
    let mut rng = stream_rng(seed, 0x6e6f726d);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut u = || rng.gen_range(-0.5..0.5);
        let f = DeformationGradient2D::new(1.0 + u(), u(), u(), 1.0 + u());
        if f.det() > 0.2 {
            out.push(f);
        }
    }
    out
}

/// Standard deviation of the pooled first Piola–Kirchhoff components produced by
/// each unit basis function (27 `C_ij` then `D1..D4`).
pub fn basis_stress_deviations(seed: u64) -> Result<[f64; 31]> {
    let fs = random_deformation_gradients(seed, BASIS_SAMPLES);
    let mut out = [0.0; 31];
    for (k, sd) in out.iter_mut().enumerate() {
        let mut coeffs = [0.0; 31];
        coeffs[k] = 1.0;
        let m = MaterialModel::Polynomial(Polynomial::from_coefficients(&coeffs));
        let mut vals = Vec::with_capacity(4 * fs.len());
        for f in &fs {
            vals.extend(first_pk_stress(&m, f)?.components());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        *sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(out)
}

/// `(P11(diag(1.1, 1)) - P11(diag(0.9, 1))) / 0.2`.
pub fn tangent_stiffness(m: &MaterialModel) -> Result<f64> {
    let hi = first_pk_stress(m, &DeformationGradient2D::new(1.1, 0.0, 0.0, 1.0))?.value[(0, 0)];
    let lo = first_pk_stress(m, &DeformationGradient2D::new(0.9, 0.0, 0.0, 1.0))?.value[(0, 0)];
    Ok((hi - lo) / 0.2)
}

pub fn normalize_polynomial_coefficients(m: &MaterialModel, seed: u64) -> Result<MaterialModel> {
    let MaterialModel::Polynomial(p) = m else {
        return Err(IcmError::InvalidConfig(format!(
            "coefficient normalization applies to Polynomial, got {}",
            m.family().name()
        )));
    };
    let sd = basis_stress_deviations(seed)?;
    let mut c = p.coefficients();
    for (k, v) in c.iter_mut().enumerate() {
        if sd[k] < 1e-12 {
            if *v != 0.0 {
                log::warn!("{}", IcmError::DegenerateBasis(format!("basis {k} deviation {:e}; coefficient zeroed", sd[k])));
            }
            *v = 0.0;
        } else {
            *v /= sd[k];
        }
    }
    let step1 = MaterialModel::Polynomial(Polynomial::from_coefficients(&c));
    let k = tangent_stiffness(&step1)?;
    if !(k.is_finite() && k > 1e-300) {
        return Err(IcmError::DegenerateBasis(format!("tangent stiffness {k:e}")));
    }
    Ok(step1.scaled(1.0 / k))
}
