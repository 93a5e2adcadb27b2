//! Model fixtures shared by unit tests, integration tests and the
//! acceptance suite.

use rand::Rng;

use crate::model::{Atom, BranchingModel, ScalarLaw, VectorLaw};

/// `ξ ~ Bernoulli(0.5)`, `ε ~ Poisson(1)`: mean 2, V 1.5, var 2, Σ 6.
pub fn scalar_model() -> BranchingModel {
    BranchingModel::new(
        1,
        vec![VectorLaw::independent(vec![ScalarLaw::Bernoulli { q: 0.5 }]).unwrap()],
        VectorLaw::independent(vec![ScalarLaw::Poisson { lambda: 1.0 }]).unwrap(),
    )
    .unwrap()
}

/// `ξ ≡ 0`, `ε ~ Poisson(1)`: the chain is i.i.d. Poisson(1).
pub fn no_offspring_model() -> BranchingModel {
    BranchingModel::new(
        1,
        vec![VectorLaw::point(&[0])],
        VectorLaw::independent(vec![ScalarLaw::Poisson { lambda: 1.0 }]).unwrap(),
    )
    .unwrap()
}

/// Deterministic laws `ξ ≡ 0`, `ε ≡ 1`: the chain sits at 1 forever.
pub fn deterministic_model() -> BranchingModel {
    BranchingModel::new(1, vec![VectorLaw::point(&[0])], VectorLaw::point(&[1])).unwrap()
}

/// A primitive two-type model with correlated offspring components and
/// `ρ(M) ≈ 0.61`.
pub fn two_type_model() -> BranchingModel {
    BranchingModel::new(
        2,
        vec![
            VectorLaw::finite(vec![
                Atom {
                    v: vec![0, 0],
                    p: 0.5,
                },
                Atom {
                    v: vec![1, 0],
                    p: 0.2,
                },
                Atom {
                    v: vec![0, 1],
                    p: 0.1,
                },
                Atom {
                    v: vec![1, 1],
                    p: 0.1,
                },
                Atom {
                    v: vec![2, 0],
                    p: 0.1,
                },
            ])
            .unwrap(),
            VectorLaw::independent(vec![
                ScalarLaw::Bernoulli { q: 0.2 },
                ScalarLaw::Poisson { lambda: 0.3 },
            ])
            .unwrap(),
        ],
        VectorLaw::independent(vec![
            ScalarLaw::Poisson { lambda: 1.0 },
            ScalarLaw::Bernoulli { q: 0.5 },
        ])
        .unwrap(),
    )
    .unwrap()
}

fn random_scalar(rng: &mut impl Rng) -> ScalarLaw {
    match rng.random_range(0..5) {
        0 => ScalarLaw::Poisson {
            lambda: rng.random_range(0.1..2.0),
        },
        1 => ScalarLaw::Bernoulli {
            q: rng.random_range(0.1..0.9),
        },
        2 => ScalarLaw::Binomial {
            n: rng.random_range(1..4),
            q: rng.random_range(0.1..0.9),
        },
        3 => ScalarLaw::Geometric {
            q: rng.random_range(0.3..0.9),
        },
        _ => ScalarLaw::Point {
            c: rng.random_range(0..3),
        },
    }
}

/// Scales the mean of a scalar law by `s ∈ (0, 1]` without leaving its family
/// (a point mass becomes a binomial thinning of itself).
fn thin_scalar(law: &ScalarLaw, s: f64) -> ScalarLaw {
    match *law {
        ScalarLaw::Poisson { lambda } => ScalarLaw::Poisson { lambda: lambda * s },
        ScalarLaw::Bernoulli { q } => ScalarLaw::Bernoulli { q: q * s },
        ScalarLaw::Binomial { n, q } => ScalarLaw::Binomial { n, q: q * s },
        ScalarLaw::Geometric { q } => {
            let r = (1.0 - q) / q * s;
            ScalarLaw::Geometric { q: 1.0 / (1.0 + r) }
        }
        ScalarLaw::Point { c } => ScalarLaw::Binomial { n: c, q: s },
    }
}

fn random_law(rng: &mut impl Rng, p: usize) -> VectorLaw {
    if rng.random_bool(0.5) {
        let k = rng.random_range(2..=4);
        let mut atoms: Vec<Atom> = Vec::new();
        while atoms.len() < k {
            let v: Vec<u64> = (0..p).map(|_| rng.random_range(0..4)).collect();
            if atoms.iter().all(|a| a.v != v) {
                atoms.push(Atom {
                    v,
                    p: rng.random_range(0.05..1.0),
                });
            }
        }
        let total: f64 = atoms.iter().map(|a| a.p).sum();
        atoms.iter_mut().for_each(|a| a.p /= total);
        VectorLaw::finite(atoms).unwrap()
    } else {
        VectorLaw::independent((0..p).map(|_| random_scalar(rng)).collect()).unwrap()
    }
}

/// Mixes a law with the point mass at zero so that its mean scales by `s`.
fn thin_law(law: &VectorLaw, s: f64) -> VectorLaw {
    match law {
        VectorLaw::Finite { support } => {
            let p = law.dim();
            let mut atoms: Vec<Atom> = support
                .iter()
                .map(|a| Atom {
                    v: a.v.clone(),
                    p: a.p * s,
                })
                .collect();
            match atoms.iter_mut().find(|a| a.v.iter().all(|&c| c == 0)) {
                Some(zero) => zero.p += 1.0 - s,
                None => atoms.push(Atom {
                    v: vec![0; p],
                    p: 1.0 - s,
                }),
            }
            VectorLaw::finite(atoms).unwrap()
        }
        VectorLaw::Independent { marginals } => {
            VectorLaw::independent(marginals.iter().map(|m| thin_scalar(m, s)).collect()).unwrap()
        }
    }
}

/// A random subcritical model with `ρ(M) ∈ [0.1, rho_max]`, mixing
/// finite-support and independent-marginal laws, with nonzero immigration.
pub fn random_model(rng: &mut impl Rng, p: usize, rho_max: f64) -> BranchingModel {
    loop {
        let offspring: Vec<VectorLaw> = (0..p).map(|_| random_law(rng, p)).collect();
        let immigration = random_law(rng, p);
        if immigration.mean().iter().all(|&x| x == 0.0) {
            continue;
        }
        let raw = BranchingModel::new(p, offspring.clone(), immigration.clone()).unwrap();
        let rho = raw.spectral_radius();
        if rho < 1e-3 {
            continue;
        }
        let target = rng.random_range(0.1..rho_max);
        let s = target / rho;
        let offspring = if s < 1.0 {
            offspring.iter().map(|l| thin_law(l, s)).collect()
        } else {
            // already below target; keep as is when below rho_max
            if rho > rho_max {
                continue;
            }
            offspring
        };
        let model = BranchingModel::new(p, offspring, immigration).unwrap();
        if model.spectral_radius() <= rho_max {
            return model;
        }
    }
}
