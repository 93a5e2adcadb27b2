//! Offspring and immigration laws, the branching model, and its
//! classification (spectral radius, regime, primitivity).

use rand::Rng;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kronalg::{kron_vec_power, spectral_radius, Matrix, Vector};

/// Mass-sum tolerance for finite-support tables.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Tolerance on `ρ` when comparing against 1.
pub const CRITICALITY_TOLERANCE: f64 = 1e-9;

/// A law on `Z_+` with closed-form raw moments up to order 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum ScalarLaw {
    Poisson {
        lambda: f64,
    },
    Bernoulli {
        q: f64,
    },
    Binomial {
        n: u64,
        q: f64,
    },
    /// Number of failures before the first success, success probability `q`.
    Geometric {
        q: f64,
    },
    Point {
        c: u64,
    },
}

impl ScalarLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarLaw::Poisson { lambda } => lambda.is_finite() && lambda >= 0.0,
            ScalarLaw::Bernoulli { q } | ScalarLaw::Binomial { q, .. } => (0.0..=1.0).contains(&q),
            ScalarLaw::Geometric { q } => q > 0.0 && q <= 1.0,
            ScalarLaw::Point { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLaw(format!(
                "parameter out of range in {self:?}"
            )))
        }
    }

    /// Factorial moments `E[X(X-1)...(X-k+1)]` for k = 1, 2, 3.
    fn factorial_moments(&self) -> [f64; 3] {
        match *self {
            ScalarLaw::Poisson { lambda } => [lambda, lambda.powi(2), lambda.powi(3)],
            ScalarLaw::Bernoulli { q } => [q, 0.0, 0.0],
            ScalarLaw::Binomial { n, q } => {
                let n = n as f64;
                [
                    n * q,
                    n * (n - 1.0) * q * q,
                    n * (n - 1.0) * (n - 2.0) * q.powi(3),
                ]
            }
            ScalarLaw::Geometric { q } => {
                let r = (1.0 - q) / q;
                [r, 2.0 * r * r, 6.0 * r.powi(3)]
            }
            ScalarLaw::Point { c } => {
                let c = c as f64;
                [c, c * (c - 1.0), c * (c - 1.0) * (c - 2.0)]
            }
        }
    }

    /// Raw moment `E[X^k]`, `k` in 0..=3.
    pub fn raw_moment(&self, k: usize) -> f64 {
        if let ScalarLaw::Point { c } = *self {
            return (c as f64).powi(k as i32);
        }
        let [f1, f2, f3] = self.factorial_moments();
        match k {
            0 => 1.0,
            1 => f1,
            2 => f2 + f1,
            3 => f3 + 3.0 * f2 + f1,
            _ => panic!("raw moments are available up to order 3"),
        }
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.raw_moment(2) - m * m
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            ScalarLaw::Poisson { lambda } => poisson(lambda, rng),
            ScalarLaw::Bernoulli { q } => u64::from(rng.random_bool(q)),
            ScalarLaw::Binomial { n, q } => binomial(n, q, rng),
            ScalarLaw::Geometric { q } => {
                if q >= 1.0 {
                    0
                } else {
                    Geometric::new(q).expect("validated").sample(rng)
                }
            }
            ScalarLaw::Point { c } => c,
        }
    }

    /// Sum of `count` independent draws.
    ///
    /// Poisson, Bernoulli, binomial and point laws are closed under
    /// i.i.d. summation and are drawn in one shot; geometric draws are
    /// summed one by one.
    pub fn sample_sum<R: Rng + ?Sized>(&self, count: u64, rng: &mut R) -> Result<u64> {
        if count == 0 {
            return Ok(0);
        }
        match *self {
            ScalarLaw::Poisson { lambda } => Ok(poisson(lambda * count as f64, rng)),
            ScalarLaw::Bernoulli { q } => Ok(binomial(count, q, rng)),
            ScalarLaw::Binomial { n, q } => {
                let trials = n.checked_mul(count).ok_or(Error::Overflow)?;
                Ok(binomial(trials, q, rng))
            }
            ScalarLaw::Point { c } => c.checked_mul(count).ok_or(Error::Overflow),
            ScalarLaw::Geometric { .. } => {
                let mut total = 0u64;
                for _ in 0..count {
                    total = total.checked_add(self.sample(rng)).ok_or(Error::Overflow)?;
                }
                Ok(total)
            }
        }
    }
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let x: f64 = Poisson::new(lambda)
        .expect("finite positive rate")
        .sample(rng);
    x as u64
}

fn binomial<R: Rng + ?Sized>(n: u64, q: f64, rng: &mut R) -> u64 {
    if n == 0 || q <= 0.0 {
        return 0;
    }
    if q >= 1.0 {
        return n;
    }
    Binomial::new(n, q)
        .expect("probability in (0,1)")
        .sample(rng)
}

/// One support point of a finite-support law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub v: Vec<u64>,
    pub p: f64,
}

/// A probability law on `Z_+^p`.
///
/// Correlated components are expressible only through [`VectorLaw::Finite`];
/// [`VectorLaw::Independent`] is the product of its scalar marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "RawLaw")]
pub enum VectorLaw {
    Finite { support: Vec<Atom> },
    Independent { marginals: Vec<ScalarLaw> },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RawLaw {
    Finite { support: Vec<Atom> },
    Independent { marginals: Vec<ScalarLaw> },
}

impl TryFrom<RawLaw> for VectorLaw {
    type Error = Error;

    fn try_from(raw: RawLaw) -> Result<Self> {
        match raw {
            RawLaw::Finite { support } => VectorLaw::finite(support),
            RawLaw::Independent { marginals } => VectorLaw::independent(marginals),
        }
    }
}

impl VectorLaw {
    pub fn finite(support: Vec<Atom>) -> Result<Self> {
        let law = VectorLaw::Finite { support };
        law.validate()?;
        Ok(law)
    }

    pub fn independent(marginals: Vec<ScalarLaw>) -> Result<Self> {
        let law = VectorLaw::Independent { marginals };
        law.validate()?;
        Ok(law)
    }

    /// Degenerate law at `v`.
    pub fn point(v: &[u64]) -> Self {
        VectorLaw::Independent {
            marginals: v.iter().map(|&c| ScalarLaw::Point { c }).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            VectorLaw::Finite { support } => support.first().map_or(0, |a| a.v.len()),
            VectorLaw::Independent { marginals } => marginals.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            VectorLaw::Finite { support } => {
                if support.is_empty() {
                    return Err(Error::InvalidLaw("empty support".into()));
                }
                let dim = support[0].v.len();
                if dim == 0 {
                    return Err(Error::InvalidLaw("zero-dimensional support vector".into()));
                }
                let mut total = 0.0;
                for (k, atom) in support.iter().enumerate() {
                    if atom.v.len() != dim {
                        return Err(Error::InvalidLaw(format!(
                            "support vector {k} has dimension {}, expected {dim}",
                            atom.v.len()
                        )));
                    }
                    if !(atom.p.is_finite() && atom.p >= 0.0) {
                        return Err(Error::InvalidLaw(format!(
                            "negative or non-finite probability {}",
                            atom.p
                        )));
                    }
                    if support[..k].iter().any(|other| other.v == atom.v) {
                        return Err(Error::InvalidLaw(format!(
                            "duplicate support vector {:?}",
                            atom.v
                        )));
                    }
                    total += atom.p;
                }
                if (total - 1.0).abs() > MASS_TOLERANCE {
                    return Err(Error::InvalidLaw(format!(
                        "probabilities sum to {total}, not 1"
                    )));
                }
                Ok(())
            }
            VectorLaw::Independent { marginals } => {
                if marginals.is_empty() {
                    return Err(Error::InvalidLaw("no marginals".into()));
                }
                marginals.iter().try_for_each(ScalarLaw::validate)
            }
        }
    }

    pub fn mean(&self) -> Vector {
        match self {
            VectorLaw::Finite { support } => {
                let mut m = vec![0.0; self.dim()];
                for atom in support {
                    for (mi, &x) in m.iter_mut().zip(&atom.v) {
                        *mi += atom.p * x as f64;
                    }
                }
                m
            }
            VectorLaw::Independent { marginals } => marginals.iter().map(ScalarLaw::mean).collect(),
        }
    }

    /// Exact `E[X^{⊗α}]`, a vector of length `p^α`.
    pub fn kron_moments(&self, alpha: usize) -> Result<Vector> {
        if !(1..=3).contains(&alpha) {
            return Err(Error::InvalidOrder(alpha));
        }
        let p = self.dim();
        match self {
            VectorLaw::Finite { support } => {
                let mut out = vec![0.0; p.pow(alpha as u32)];
                for atom in support {
                    let x: Vector = atom.v.iter().map(|&c| c as f64).collect();
                    let xk = kron_vec_power(&x, alpha)?;
                    for (o, v) in out.iter_mut().zip(xk) {
                        *o += atom.p * v;
                    }
                }
                Ok(out)
            }
            VectorLaw::Independent { marginals } => {
                let len = p.pow(alpha as u32);
                let mut out = Vec::with_capacity(len);
                let mut mult = vec![0usize; p];
                for flat in 0..len {
                    mult.iter_mut().for_each(|m| *m = 0);
                    let mut rest = flat;
                    for _ in 0..alpha {
                        mult[rest % p] += 1;
                        rest /= p;
                    }
                    out.push(
                        marginals
                            .iter()
                            .zip(&mult)
                            .filter(|(_, &k)| k > 0)
                            .map(|(law, &k)| law.raw_moment(k))
                            .product(),
                    );
                }
                Ok(out)
            }
        }
    }

    /// Covariance matrix of the law.
    pub fn covariance(&self) -> Matrix {
        let p = self.dim();
        let m = self.mean();
        let second = self.kron_moments(2).expect("order 2 is valid");
        let mut c = Matrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                c[(i, j)] = second[i * p + j] - m[i] * m[j];
            }
        }
        c
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        match self {
            VectorLaw::Finite { support } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for atom in support {
                    acc += atom.p;
                    if u < acc {
                        return atom.v.clone();
                    }
                }
                // u landed in the rounding gap above the cumulative mass
                support
                    .iter()
                    .rev()
                    .find(|a| a.p > 0.0)
                    .expect("validated law has positive mass")
                    .v
                    .clone()
            }
            VectorLaw::Independent { marginals } => {
                marginals.iter().map(|m| m.sample(rng)).collect()
            }
        }
    }

    /// Adds the sum of `count` i.i.d. draws into `acc`.
    ///
    /// Finite-support tables draw the atom counts as a multinomial via
    /// sequential conditional binomials; independent marginals use
    /// [`ScalarLaw::sample_sum`] per coordinate.
    pub fn add_sample_sum<R: Rng + ?Sized>(
        &self,
        count: u64,
        acc: &mut [u64],
        rng: &mut R,
    ) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        match self {
            VectorLaw::Finite { support } => {
                let mut remaining = count;
                let mut mass_left = 1.0f64;
                for (k, atom) in support.iter().enumerate() {
                    if remaining == 0 {
                        break;
                    }
                    let hits = if k + 1 == support.len() || atom.p >= mass_left {
                        remaining
                    } else {
                        binomial(remaining, (atom.p / mass_left).clamp(0.0, 1.0), rng)
                    };
                    mass_left -= atom.p;
                    remaining -= hits;
                    if hits == 0 {
                        continue;
                    }
                    for (a, &x) in acc.iter_mut().zip(&atom.v) {
                        let add = x.checked_mul(hits).ok_or(Error::Overflow)?;
                        *a = a.checked_add(add).ok_or(Error::Overflow)?;
                    }
                }
                Ok(())
            }
            VectorLaw::Independent { marginals } => {
                for (a, law) in acc.iter_mut().zip(marginals) {
                    let s = law.sample_sum(count, rng)?;
                    *a = a.checked_add(s).ok_or(Error::Overflow)?;
                }
                Ok(())
            }
        }
    }
}

/// `p` offspring laws (one per type) and one immigration law, all on `Z_+^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct BranchingModel {
    pub p: usize,
    pub offspring: Vec<VectorLaw>,
    pub immigration: VectorLaw,
}

#[derive(Deserialize)]
struct RawModel {
    p: usize,
    offspring: Vec<VectorLaw>,
    immigration: VectorLaw,
}

impl TryFrom<RawModel> for BranchingModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        BranchingModel::new(raw.p, raw.offspring, raw.immigration)
    }
}

impl BranchingModel {
    pub fn new(p: usize, offspring: Vec<VectorLaw>, immigration: VectorLaw) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidModel("type count must be at least 1".into()));
        }
        if offspring.len() != p {
            return Err(Error::InvalidModel(format!(
                "expected {p} offspring laws, got {}",
                offspring.len()
            )));
        }
        for (i, law) in offspring.iter().enumerate() {
            law.validate()?;
            if law.dim() != p {
                return Err(Error::InvalidModel(format!(
                    "offspring law {} has dimension {}, expected {p}",
                    i + 1,
                    law.dim()
                )));
            }
        }
        immigration.validate()?;
        if immigration.dim() != p {
            return Err(Error::InvalidModel(format!(
                "immigration law has dimension {}, expected {p}",
                immigration.dim()
            )));
        }
        Ok(Self {
            p,
            offspring,
            immigration,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// `M_ξ`: column `i` is the mean of the type-`i` offspring law.
    pub fn mean_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.p, self.p);
        for (i, law) in self.offspring.iter().enumerate() {
            m.set_col(i, &law.mean());
        }
        m
    }

    pub fn immigration_mean(&self) -> Vector {
        self.immigration.mean()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.mean_matrix()).expect("mean matrix is square")
    }

    /// Fails unless `ρ(M_ξ) < 1 - CRITICALITY_TOLERANCE`.
    pub fn require_subcritical(&self) -> Result<f64> {
        let rho = self.spectral_radius();
        if rho >= 1.0 - CRITICALITY_TOLERANCE {
            return Err(Error::NotSubcritical { rho });
        }
        Ok(rho)
    }

    pub fn validate(&self) -> Classification {
        classify(&self.mean_matrix(), &self.immigration_mean())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub rho: f64,
    pub regime: Regime,
    pub primitive: bool,
    pub immigration_nontrivial: bool,
}

impl Classification {
    /// All standing assumptions hold: subcritical, primitive, nonzero immigration.
    pub fn admissible(&self) -> bool {
        self.regime == Regime::Subcritical && self.primitive && self.immigration_nontrivial
    }
}

pub fn regime_of(rho: f64) -> Regime {
    if (rho - 1.0).abs() <= CRITICALITY_TOLERANCE {
        Regime::Critical
    } else if rho < 1.0 {
        Regime::Subcritical
    } else {
        Regime::Supercritical
    }
}

pub fn classify(mean_matrix: &Matrix, immigration_mean: &[f64]) -> Classification {
    let rho = spectral_radius(mean_matrix).expect("square mean matrix");
    Classification {
        rho,
        regime: regime_of(rho),
        primitive: is_primitive(mean_matrix),
        immigration_nontrivial: immigration_mean.iter().any(|&x| x != 0.0),
    }
}

/// Primitivity of a nonnegative matrix via the boolean power at the
/// Wielandt exponent `p^2 - 2p + 2`.
pub fn is_primitive(m: &Matrix) -> bool {
    let p = m.rows();
    let pattern: Vec<bool> = m.as_slice().iter().map(|&x| x > 0.0).collect();
    let power = bool_matrix_pow(&pattern, p, p * p + 2 - 2 * p);
    power.iter().all(|&b| b)
}

fn bool_matmul(a: &[bool], b: &[bool], p: usize) -> Vec<bool> {
    let mut out = vec![false; p * p];
    for i in 0..p {
        for k in 0..p {
            if a[i * p + k] {
                for j in 0..p {
                    out[i * p + j] |= b[k * p + j];
                }
            }
        }
    }
    out
}

fn bool_matrix_pow(m: &[bool], p: usize, mut e: usize) -> Vec<bool> {
    let mut out: Vec<bool> = (0..p * p).map(|k| k / p == k % p).collect();
    let mut base = m.to_vec();
    while e > 0 {
        if e & 1 == 1 {
            out = bool_matmul(&out, &base, p);
        }
        base = bool_matmul(&base, &base, p);
        e >>= 1;
    }
    out
}
