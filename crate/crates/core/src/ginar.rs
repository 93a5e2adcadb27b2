//! Scalar integer-valued autoregressions of order `p` viewed as `p`-type
//! branching processes on the state `[Z_k, ..., Z_{k-p+1}]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kronalg::Matrix;
use crate::model::{regime_of, BranchingModel, Regime, ScalarLaw, VectorLaw};
use crate::simulate::{simulate_path, Init, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct GinarSpec {
    pub order: usize,
    /// Law of the number of offspring counted `i` steps back, `i = 1..=order`.
    pub offspring: Vec<ScalarLaw>,
    pub immigration: ScalarLaw,
}

#[derive(Deserialize)]
struct RawSpec {
    order: usize,
    offspring: Vec<ScalarLaw>,
    immigration: ScalarLaw,
}

impl TryFrom<RawSpec> for GinarSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        GinarSpec::new(raw.offspring, raw.immigration).and_then(|s| {
            if s.order == raw.order {
                Ok(s)
            } else {
                Err(Error::InvalidModel(format!(
                    "order {} but {} offspring laws",
                    raw.order, s.order
                )))
            }
        })
    }
}

impl GinarSpec {
    pub fn new(offspring: Vec<ScalarLaw>, immigration: ScalarLaw) -> Result<Self> {
        if offspring.is_empty() {
            return Err(Error::InvalidModel("order must be at least 1".into()));
        }
        offspring.iter().try_for_each(ScalarLaw::validate)?;
        immigration.validate()?;
        Ok(Self {
            order: offspring.len(),
            offspring,
            immigration,
        })
    }

    /// Bernoulli offspring with the given means and Poisson immigration.
    pub fn from_means(means: &[f64], immigration_mean: f64) -> Result<Self> {
        let offspring = means
            .iter()
            .map(|&q| {
                if (0.0..=1.0).contains(&q) {
                    Ok(ScalarLaw::Bernoulli { q })
                } else {
                    Err(Error::InvalidModel(format!(
                        "mean {q} has no bernoulli default; give a full spec"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            offspring,
            ScalarLaw::Poisson {
                lambda: immigration_mean,
            },
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn offspring_means(&self) -> Vec<f64> {
        self.offspring.iter().map(ScalarLaw::mean).collect()
    }
}

/// Offspring of type `i` carry `ξ^(i,1)` in coordinate 1 and a single
/// deterministic individual of type `i + 1`.
pub fn embed(spec: &GinarSpec) -> BranchingModel {
    let p = spec.order;
    let offspring = spec
        .offspring
        .iter()
        .enumerate()
        .map(|(i, law)| {
            let mut marginals = vec![ScalarLaw::Point { c: 0 }; p];
            marginals[0] = law.clone();
            if i + 1 < p {
                marginals[i + 1] = ScalarLaw::Point { c: 1 };
            }
            VectorLaw::Independent { marginals }
        })
        .collect();
    let mut imm = vec![ScalarLaw::Point { c: 0 }; p];
    imm[0] = spec.immigration.clone();
    BranchingModel::new(p, offspring, VectorLaw::Independent { marginals: imm })
        .expect("embedding of a valid spec is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicPolynomial {
    /// `[1, -Eξ^(1,1), ..., -Eξ^(p,1)]`, highest degree first.
    pub coefficients: Vec<f64>,
    pub rho: f64,
    pub regime: Regime,
    /// `Eξ^(p,1) > 0`; otherwise the embedded mean matrix is not irreducible.
    pub top_coefficient_positive: bool,
}

/// `λ^p − Σ_i Eξ^(i,1) λ^{p−i}`; `ρ` is its unique nonnegative root and the
/// regime follows from `Σ_i Eξ^(i,1)` against 1.
pub fn characteristic_polynomial(spec: &GinarSpec) -> CharacteristicPolynomial {
    let a = spec.offspring_means();
    let mut coefficients = vec![1.0];
    coefficients.extend(a.iter().map(|x| -x));
    let sum: f64 = a.iter().sum();
    CharacteristicPolynomial {
        coefficients,
        rho: positive_root(&a),
        regime: regime_of(sum),
        top_coefficient_positive: a.last().is_some_and(|&x| x > 0.0),
    }
}

/// Root of `g(λ) = 1 − Σ a_i λ^{−i}`, which increases on `λ > 0`.
fn positive_root(a: &[f64]) -> f64 {
    if a.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let g = |lam: f64| {
        1.0 - a
            .iter()
            .enumerate()
            .map(|(i, &c)| c * lam.powi(-(i as i32 + 1)))
            .sum::<f64>()
    };
    let mut lo = 0.0f64;
    let mut hi = a.iter().sum::<f64>().max(1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn require_subcritical(spec: &GinarSpec) -> Result<f64> {
    let sum: f64 = spec.offspring_means().iter().sum();
    if regime_of(sum) != Regime::Subcritical {
        return Err(Error::NotSubcritical {
            rho: positive_root(&spec.offspring_means()),
        });
    }
    Ok(sum)
}

/// `V` of the embedded chain from the companion structure: only the
/// `(1, 1)` entry is nonzero, equal to `μ Σ_i var ξ^(i,1) + var ε` where
/// every coordinate of the stationary mean is `μ = Eε / (1 − Σ_i Eξ^(i,1))`.
pub fn v_ginar(spec: &GinarSpec) -> Result<Matrix> {
    let sum = require_subcritical(spec)?;
    let mu = spec.immigration.mean() / (1.0 - sum);
    let total = mu * spec.offspring.iter().map(ScalarLaw::variance).sum::<f64>()
        + spec.immigration.variance();
    let mut v = Matrix::zeros(spec.order, spec.order);
    v[(0, 0)] = total;
    Ok(v)
}

/// `c` such that the scaled aggregate of an order-1 chain tends to `c·W`.
pub fn scalar_limit_std(spec: &GinarSpec) -> Result<f64> {
    if spec.order != 1 {
        return Err(Error::InvalidModel(format!(
            "scalar limit needs order 1, got {}",
            spec.order
        )));
    }
    require_subcritical(spec)?;
    let xi = &spec.offspring[0];
    let (m, s2) = (xi.mean(), xi.variance());
    let (e, v) = (spec.immigration.mean(), spec.immigration.variance());
    Ok(((e * s2 + (1.0 - m) * v) / (1.0 - m)).sqrt() / (1.0 - m))
}

/// `Z_0, ..., Z_n`: coordinate 1 of the embedded chain.
pub fn simulate_ginar(
    spec: &GinarSpec,
    n: usize,
    rng: &mut SimRng,
    init: Init,
) -> Result<Vec<u64>> {
    let path = simulate_path(&embed(spec), n, rng, init)?;
    Ok(path.coordinate(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinarReport {
    pub order: usize,
    pub polynomial: CharacteristicPolynomial,
    pub mean_matrix: Matrix,
    pub primitive: bool,
    #[serde(rename = "V")]
    pub v: Option<Matrix>,
    pub sigma: Option<Matrix>,
    pub scalar_limit_std: Option<f64>,
}

pub fn ginar_report(spec: &GinarSpec) -> Result<GinarReport> {
    let model = embed(spec);
    let polynomial = characteristic_polynomial(spec);
    let subcritical = polynomial.regime == Regime::Subcritical;
    let (v, sigma) = if subcritical {
        let v = v_ginar(spec)?;
        let sigma = crate::moments::sigma_from_variance(
            &model.mean_matrix(),
            &crate::moments::stationary_variance(&model)?,
        )?;
        (Some(v), Some(sigma))
    } else {
        (None, None)
    };
    Ok(GinarReport {
        order: spec.order,
        mean_matrix: model.mean_matrix(),
        primitive: model.validate().primitive,
        scalar_limit_std: if subcritical && spec.order == 1 {
            Some(scalar_limit_std(spec)?)
        } else {
            None
        },
        polynomial,
        v,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kronalg::spectral_radius;
    use crate::moments::{limit_covariance, noise_matrix_v};
    use crate::simulate::stream_rng;
    use proptest::prelude::*;

    fn bern(q: f64) -> ScalarLaw {
        ScalarLaw::Bernoulli { q }
    }

    fn scalar_spec() -> GinarSpec {
        GinarSpec::new(vec![bern(0.5)], ScalarLaw::Poisson { lambda: 1.0 }).unwrap()
    }

    fn order2() -> GinarSpec {
        GinarSpec::new(
            vec![bern(0.5), bern(0.3)],
            ScalarLaw::Poisson { lambda: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn embed_order1_is_identity_wrapping() {
        let m = embed(&scalar_spec());
        assert_eq!(m, crate::testing::scalar_model());
    }

    #[test]
    fn embed_companion_matrix() {
        let m = embed(&order2()).mean_matrix();
        assert_eq!(m, Matrix::from_rows(&[&[0.5, 0.3], &[1.0, 0.0]]));
    }

    #[test]
    fn polynomial_order2() {
        let cp = characteristic_polynomial(&order2());
        assert_eq!(cp.coefficients, vec![1.0, -0.5, -0.3]);
        assert_eq!(cp.regime, Regime::Subcritical);
        let exact = (0.5 + 1.45f64.sqrt()) / 2.0;
        assert!((cp.rho - exact).abs() < 1e-12);
        assert!((cp.rho - 0.8521).abs() < 1e-4);
        let eig = spectral_radius(&embed(&order2()).mean_matrix()).unwrap();
        assert!((cp.rho - eig).abs() < 1e-9);
    }

    #[test]
    fn polynomial_critical_and_degenerate() {
        let crit = GinarSpec::new(
            vec![ScalarLaw::Point { c: 1 }],
            ScalarLaw::Poisson { lambda: 1.0 },
        )
        .unwrap();
        let cp = characteristic_polynomial(&crit);
        assert_eq!(cp.regime, Regime::Critical);
        assert!((cp.rho - 1.0).abs() < 1e-12);
        assert!(matches!(v_ginar(&crit), Err(Error::NotSubcritical { .. })));

        let zero_top = GinarSpec::new(
            vec![bern(0.5), bern(0.0)],
            ScalarLaw::Poisson { lambda: 1.0 },
        )
        .unwrap();
        let cp = characteristic_polynomial(&zero_top);
        assert!(!cp.top_coefficient_positive);
        assert!((cp.rho - 0.5).abs() < 1e-12);
        assert!(!embed(&zero_top).validate().primitive);
        assert!(embed(&order2()).validate().primitive);
    }

    #[test]
    fn v_examples() {
        assert!((v_ginar(&scalar_spec()).unwrap()[(0, 0)] - 1.5).abs() < 1e-12);
        let det = GinarSpec::new(
            vec![ScalarLaw::Point { c: 0 }, ScalarLaw::Point { c: 0 }],
            ScalarLaw::Point { c: 3 },
        )
        .unwrap();
        assert_eq!(v_ginar(&det).unwrap(), Matrix::zeros(2, 2));
        let v = v_ginar(&order2()).unwrap();
        assert!(v[(0, 0)] > 0.0);
        assert_eq!((v[(0, 1)], v[(1, 0)], v[(1, 1)]), (0.0, 0.0, 0.0));
        let general = noise_matrix_v(&embed(&order2())).unwrap();
        assert!(general.max_abs_diff(&v) <= 1e-12);
    }

    #[test]
    fn scalar_limit_examples() {
        let c = scalar_limit_std(&scalar_spec()).unwrap();
        assert!((c - 2.0 * 1.5f64.sqrt()).abs() < 1e-12);
        assert!((c * c - 6.0).abs() < 1e-12);
        let det =
            GinarSpec::new(vec![ScalarLaw::Point { c: 0 }], ScalarLaw::Point { c: 2 }).unwrap();
        assert_eq!(scalar_limit_std(&det).unwrap(), 0.0);
        let iid = GinarSpec::new(
            vec![ScalarLaw::Point { c: 0 }],
            ScalarLaw::Poisson { lambda: 1.0 },
        )
        .unwrap();
        assert!((scalar_limit_std(&iid).unwrap() - 1.0).abs() < 1e-12);
        assert!(scalar_limit_std(&order2()).is_err());
    }

    #[test]
    fn simulated_marginal_is_coordinate_one() {
        let spec = order2();
        let mut a = stream_rng(11, 0);
        let mut b = stream_rng(11, 0);
        let z = simulate_ginar(&spec, 500, &mut a, Init::auto()).unwrap();
        let path = simulate_path(&embed(&spec), 500, &mut b, Init::auto()).unwrap();
        assert_eq!(z, path.coordinate(0));
        // the lagged coordinate is the shifted series
        let lag = path.coordinate(1);
        assert_eq!(&lag[1..], &z[..500]);
    }

    #[test]
    fn json_roundtrip_and_errors() {
        let text = r#"{"order":2,"offspring":[{"dist":"bernoulli","q":0.5},{"dist":"bernoulli","q":0.3}],"immigration":{"dist":"poisson","lambda":1.0}}"#;
        let spec = GinarSpec::from_json(text).unwrap();
        assert_eq!(spec, order2());
        let bad = r#"{"order":3,"offspring":[{"dist":"bernoulli","q":0.5}],"immigration":{"dist":"poisson","lambda":1.0}}"#;
        assert!(GinarSpec::from_json(bad).is_err());
        assert!(GinarSpec::from_means(&[0.5, 1.5], 1.0).is_err());
        assert_eq!(GinarSpec::from_means(&[0.5, 0.3], 1.0).unwrap(), order2());
    }

    fn arb_law() -> impl Strategy<Value = ScalarLaw> {
        prop_oneof![
            (0.0..0.6f64).prop_map(|lambda| ScalarLaw::Poisson { lambda }),
            (0.0..0.6f64).prop_map(|q| ScalarLaw::Bernoulli { q }),
            (1u64..3, 0.0..0.3f64).prop_map(|(n, q)| ScalarLaw::Binomial { n, q }),
            (0.65..1.0f64).prop_map(|q| ScalarLaw::Geometric { q }),
        ]
    }

    proptest! {
        #[test]
        fn two_routes_agree(
            laws in prop::collection::vec(arb_law(), 1..=3),
            imm in (0.1..3.0f64),
        ) {
            let total: f64 = laws.iter().map(ScalarLaw::mean).sum();
            prop_assume!(total < 0.95);
            let spec = GinarSpec::new(laws, ScalarLaw::Poisson { lambda: imm }).unwrap();
            let model = embed(&spec);
            let cp = characteristic_polynomial(&spec);
            prop_assert_eq!(cp.regime, model.validate().regime);
            prop_assert!((cp.rho - model.spectral_radius()).abs() < 1e-9);
            let v = v_ginar(&spec).unwrap();
            prop_assert!(v.max_abs_diff(&noise_matrix_v(&model).unwrap()) <= 1e-12 * v.max_abs().max(1.0));
            if spec.order == 1 {
                let c = scalar_limit_std(&spec).unwrap();
                let sigma = limit_covariance(&model).unwrap()[(0, 0)];
                prop_assert!((c * c - sigma).abs() <= 1e-12 * sigma.max(1.0));
            }
        }

        #[test]
        fn regime_by_sum_matches_rho(means in prop::collection::vec(0.0..0.7f64, 1..=4)) {
            prop_assume!(means.last().copied().unwrap_or(0.0) > 0.01);
            let total: f64 = means.iter().sum();
            prop_assume!((total - 1.0).abs() > 1e-6);
            let spec = GinarSpec::from_means(&means, 1.0).unwrap();
            let cp = characteristic_polynomial(&spec);
            prop_assert_eq!(cp.regime, embed(&spec).validate().regime);
            prop_assert_eq!(cp.rho < 1.0, total < 1.0);
        }
    }
}
