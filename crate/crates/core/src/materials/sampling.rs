//! Random material parameters for the training and test distributions.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Family, MaterialModel, Polynomial, POLY_LOW_ORDER};
use crate::error::{IcmError, Result};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsetRule {
    /// Two low-order `C_ij` and two `D_m`.
    PolynomialA,
    /// Four `C_ij` of any order and two `D_m`.
    PolynomialB,
    /// Every coefficient.
    PolynomialC,
    /// Two Ogden terms.
    OgdenLow,
    /// Six Ogden terms with wider exponents.
    OgdenHigh,
    PucciSaccomandi,
    ExpLn,
    VanDerWaals,
}

impl SubsetRule {
    pub const ALL: [SubsetRule; 8] = [
        SubsetRule::PolynomialA,
        SubsetRule::PolynomialB,
        SubsetRule::PolynomialC,
        SubsetRule::OgdenLow,
        SubsetRule::OgdenHigh,
        SubsetRule::PucciSaccomandi,
        SubsetRule::ExpLn,
        SubsetRule::VanDerWaals,
    ];

    pub fn family(&self) -> Family {
        match self {
            SubsetRule::PolynomialA | SubsetRule::PolynomialB | SubsetRule::PolynomialC => Family::Polynomial,
            SubsetRule::OgdenLow | SubsetRule::OgdenHigh => Family::Ogden,
            SubsetRule::PucciSaccomandi => Family::PucciSaccomandi,
            SubsetRule::ExpLn => Family::ExpLn,
            SubsetRule::VanDerWaals => Family::VanDerWaals,
        }
    }

    pub fn from_name(s: &str) -> Result<SubsetRule> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        SubsetRule::ALL
            .into_iter()
            .find(|r| format!("{r:?}").to_lowercase() == key)
            .ok_or_else(|| IcmError::UnknownSubsetRule(s.to_string()))
    }
}

fn two_volumetric(rng: &mut impl Rng) -> [f64; 4] {
    let mut d = [0.0; 4];
    for k in sample_indices(rng, 4, 2) {
        d[k] = rng.gen_range(0.0..100.0);
    }
    d
}

fn ogden_exponent(rng: &mut impl Rng, factor: f64) -> f64 {
    let x: f64 = StandardNormal.sample(rng);
    (factor * x.abs() + 1.0).clamp(1.2, 20.0)
}

/// Draw one material of `family` under `rule`.
pub fn sample_material(family: Family, rng: &mut impl Rng, rule: SubsetRule) -> Result<MaterialModel> {
    if rule.family() != family {
        return Err(IcmError::UnknownSubsetRule(format!("{rule:?} is not a {} rule", family.name())));
    }
    Ok(match rule {
        SubsetRule::PolynomialA | SubsetRule::PolynomialB | SubsetRule::PolynomialC => {
            let mut p = Polynomial::zero();
            match rule {
                SubsetRule::PolynomialA => {
                    for k in sample_indices(rng, POLY_LOW_ORDER, 2) {
                        p.c[k] = rng.gen_range(0.0..100.0);
                    }
                    p.d = two_volumetric(rng);
                }
                SubsetRule::PolynomialB => {
                    for k in sample_indices(rng, p.c.len(), 4) {
                        p.c[k] = rng.gen_range(0.0..100.0);
                    }
                    p.d = two_volumetric(rng);
                }
                _ => {
                    p.c.iter_mut().chain(p.d.iter_mut()).for_each(|v| *v = rng.gen_range(0.0..100.0));
                }
            }
            p.c[0] += 1.0;
            p.d[0] += 1.0;
            MaterialModel::Polynomial(p)
        }
        SubsetRule::OgdenLow | SubsetRule::OgdenHigh => {
            let (terms, factor) = if rule == SubsetRule::OgdenLow { (2, 2.0) } else { (6, 10.0) };
            let mut mu = [0.0; 6];
            let mut alpha = [1.0; 6];
            for k in 0..terms {
                mu[k] = rng.gen_range(1.0..101.0);
                alpha[k] = ogden_exponent(rng, factor);
            }
            let mut d = [0.0; 4];
            d.iter_mut().for_each(|v| *v = rng.gen_range(0.0..100.0));
            d[0] += 1.0;
            MaterialModel::Ogden { mu, alpha, d }
        }
        SubsetRule::PucciSaccomandi => {
            let mu = rng.gen_range(1.0..101.0);
            let sj: f64 = rng.gen_range(4.0..6.0);
            let c2 = rng.gen_range(0.0..100.0);
            let d = rng.gen_range(1.0..501.0);
            MaterialModel::PucciSaccomandi { mu, jm: sj * sj, c2, d }
        }
        SubsetRule::ExpLn => {
            let mu = rng.gen_range(1.0..101.0);
            let a = rng.gen_range(0.1..3.1);
            let b = rng.gen_range(0.0..1.0);
            let d = rng.gen_range(1.0..501.0);
            MaterialModel::ExpLn { mu, a, b, d }
        }
        SubsetRule::VanDerWaals => {
            let mu = rng.gen_range(1.0..101.0);
            let lambda_m = rng.gen_range(4.0..6.0);
            let a = rng.gen_range(0.0..0.5);
            let beta = rng.gen_range(0.0..1.0);
            let d = rng.gen_range(1.0..501.0);
            MaterialModel::VanDerWaals { mu, lambda_m, a, beta, d }
        }
    })
}

/// Material `index` of a dataset seeded by `seed`; each index has its own stream.
pub fn sample_material_seeded(rule: SubsetRule, seed: u64, index: u64) -> Result<MaterialModel> {
    let mut rng = stream_rng(seed, index);
    sample_material(rule.family(), &mut rng, rule)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_ranges() {
        for i in 0..300 {
            match sample_material_seeded(SubsetRule::PucciSaccomandi, 1, i).unwrap() {
                MaterialModel::PucciSaccomandi { mu, jm, c2, d } => {
                    assert!((1.0..=101.0).contains(&mu));
                    assert!((4.0..=6.0).contains(&jm.sqrt()));
                    assert!((0.0..=100.0).contains(&c2));
                    assert!((1.0..=501.0).contains(&d));
                }
                _ => unreachable!(),
            }
            match sample_material_seeded(SubsetRule::ExpLn, 2, i).unwrap() {
                MaterialModel::ExpLn { a, b, mu, d } => {
                    assert!((0.1..=3.1).contains(&a));
                    assert!((0.0..=1.0).contains(&b));
                    assert!((1.0..=101.0).contains(&mu));
                    assert!((1.0..=501.0).contains(&d));
                }
                _ => unreachable!(),
            }
            match sample_material_seeded(SubsetRule::VanDerWaals, 3, i).unwrap() {
                MaterialModel::VanDerWaals { mu, lambda_m, a, beta, d } => {
                    assert!((1.0..=101.0).contains(&mu));
                    assert!((4.0..=6.0).contains(&lambda_m));
                    assert!((0.0..=0.5).contains(&a));
                    assert!((0.0..=1.0).contains(&beta));
                    assert!((1.0..=501.0).contains(&d));
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn polynomial_subset_a_structure() {
        for i in 0..200 {
            let MaterialModel::Polynomial(p) = sample_material_seeded(SubsetRule::PolynomialA, 4, i).unwrap() else {
                unreachable!()
            };
            let mut unshifted = p.clone();
            unshifted.c[0] -= 1.0;
            unshifted.d[0] -= 1.0;
            let nz_c = unshifted.c.iter().filter(|v| v.abs() > 1e-12).count();
            let nz_d = unshifted.d.iter().filter(|v| v.abs() > 1e-12).count();
            assert_eq!(nz_c, 2);
            assert_eq!(nz_d, 2);
            assert!(unshifted.c[POLY_LOW_ORDER..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ogden_rules() {
        for i in 0..200 {
            let MaterialModel::Ogden { mu, alpha, d } = sample_material_seeded(SubsetRule::OgdenLow, 5, i).unwrap() else {
                unreachable!()
            };
            assert!(mu[2..].iter().all(|&m| m == 0.0));
            assert!(mu[..2].iter().all(|m| (1.0..=101.0).contains(m)));
            assert!(alpha[..2].iter().all(|a| (1.2..=20.0).contains(a)));
            assert!(d[0] >= 1.0);
            let MaterialModel::Ogden { mu, alpha, .. } = sample_material_seeded(SubsetRule::OgdenHigh, 5, i).unwrap() else {
                unreachable!()
            };
            assert!(mu.iter().all(|m| (1.0..=101.0).contains(m)));
            assert!(alpha.iter().all(|a| (1.2..=20.0).contains(a)));
        }
    }

    #[test]
    fn mismatch_and_determinism() {
        let mut rng = stream_rng(0, 0);
        assert!(matches!(
            sample_material(Family::Ogden, &mut rng, SubsetRule::ExpLn),
            Err(IcmError::UnknownSubsetRule(_))
        ));
        assert!(SubsetRule::from_name("nonsense").is_err());
        assert_eq!(SubsetRule::from_name("polynomial-a").unwrap(), SubsetRule::PolynomialA);
        let a = sample_material_seeded(SubsetRule::PolynomialC, 9, 3).unwrap();
        let b = sample_material_seeded(SubsetRule::PolynomialC, 9, 3).unwrap();
        let c = sample_material_seeded(SubsetRule::PolynomialC, 9, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
