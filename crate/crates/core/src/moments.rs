//! Stationary moment engine.
//!
//! The Kronecker moments `E(Y_n^{⊗α})`, α = 1, 2, 3, of the chain started
//! from zero satisfy a block lower-triangular linear recursion
//!
//! ```text
//! [E Y_n      ]   [ M     0       0     ] [E Y_{n-1}      ]   [ m_ε      ]
//! [E Y_n^{⊗2} ] = [ A21   M^{⊗2}  0     ] [E Y_{n-1}^{⊗2} ] + [ E ε^{⊗2} ]
//! [E Y_n^{⊗3} ]   [ A31   A32     M^{⊗3}] [E Y_{n-1}^{⊗3} ]   [ E ε^{⊗3} ]
//! ```
//!
//! whose fixed point gives the moments of the stationary law. The fixed
//! point is found by block forward substitution; the full inverse of
//! `I - A3` is never formed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kronalg::{
    commutation_matrix, kron, kron_power, kron_vec, lyapunov_solve, Matrix, Vector,
};
use crate::model::{BranchingModel, CRITICALITY_TOLERANCE};

/// Relative tolerance for the Lyapunov-vs-second-moment route comparison.
pub const ROUTE_GAP_TOLERANCE: f64 = 1e-8;
/// Absolute tolerance on the two sides of the limit-covariance identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;
/// Relative Lyapunov residual tolerance, `‖S - V - MSMᵀ‖ / (1 + ‖S‖)`.
pub const LYAPUNOV_TOLERANCE: f64 = 1e-10;

/// Blocks of the moment recursion.
#[derive(Debug, Clone)]
pub struct TransferMatrices {
    pub p: usize,
    pub m: Matrix,
    pub m2: Matrix,
    pub a21: Matrix,
    pub m3: Option<Matrix>,
    pub a31: Option<Matrix>,
    pub a32: Option<Matrix>,
}

impl TransferMatrices {
    /// The `(p+p²)` square block matrix `[[M, 0], [A21, M^{⊗2}]]`.
    pub fn a2(&self) -> Matrix {
        let p = self.p;
        let n = p + p * p;
        let mut out = Matrix::zeros(n, n);
        place(&mut out, &self.m, 0, 0);
        place(&mut out, &self.a21, p, 0);
        place(&mut out, &self.m2, p, p);
        out
    }

    /// The `(p+p²+p³)` square block matrix.
    pub fn a3(&self) -> Result<Matrix> {
        let (m3, a31, a32) = self.third()?;
        let p = self.p;
        let (p2, p3) = (p * p, p * p * p);
        let n = p + p2 + p3;
        let mut out = Matrix::zeros(n, n);
        place(&mut out, &self.m, 0, 0);
        place(&mut out, &self.a21, p, 0);
        place(&mut out, &self.m2, p, p);
        place(&mut out, a31, p + p2, 0);
        place(&mut out, a32, p + p2, p);
        place(&mut out, m3, p + p2, p + p2);
        Ok(out)
    }

    fn third(&self) -> Result<(&Matrix, &Matrix, &Matrix)> {
        match (&self.m3, &self.a31, &self.a32) {
            (Some(m3), Some(a31), Some(a32)) => Ok((m3, a31, a32)),
            _ => Err(Error::MissingThirdMoments),
        }
    }
}

fn place(dst: &mut Matrix, src: &Matrix, r0: usize, c0: usize) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dst[(r0 + i, c0 + j)] = src[(i, j)];
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64], s: f64) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

fn kron3(a: &[f64], b: &[f64], c: &[f64]) -> Vector {
    kron_vec(&kron_vec(a, b), c)
}

/// Assembles the recursion blocks up to `max_order` (2 or 3).
pub fn build_transfer(model: &BranchingModel, max_order: usize) -> Result<TransferMatrices> {
    if !(1..=3).contains(&max_order) {
        return Err(Error::InvalidOrder(max_order));
    }
    let p = model.p;
    let m = model.mean_matrix();
    let m_eps = model.immigration_mean();
    let mu: Vec<Vector> = model.offspring.iter().map(|l| l.mean()).collect();
    let s2: Vec<Vector> = model
        .offspring
        .iter()
        .map(|l| l.kron_moments(2))
        .collect::<Result<_>>()?;

    let p2 = p * p;
    let mut a21 = Matrix::zeros(p2, p);
    for i in 0..p {
        let mut col = s2[i].clone();
        add_into(&mut col, &kron_vec(&mu[i], &m_eps), 1.0);
        add_into(&mut col, &kron_vec(&m_eps, &mu[i]), 1.0);
        add_into(&mut col, &kron_vec(&mu[i], &mu[i]), -1.0);
        a21.set_col(i, &col);
    }

    let mut out = TransferMatrices {
        p,
        m2: kron_power(&m, 2)?,
        m: m.clone(),
        a21,
        m3: None,
        a31: None,
        a32: None,
    };
    if max_order < 3 {
        return Ok(out);
    }

    let p3 = p2 * p;
    let s3: Vec<Vector> = model
        .offspring
        .iter()
        .map(|l| l.kron_moments(3))
        .collect::<Result<_>>()?;
    let e2 = model.immigration.kron_moments(2)?;
    // (P ⊗ I_p) moves the middle factor: u ⊗ v ⊗ w = (P ⊗ I)(v ⊗ u ⊗ w).
    let swap12 = kron(&commutation_matrix(p), &Matrix::identity(p));

    let mut a31 = Matrix::zeros(p3, p);
    for i in 0..p {
        let (mu_i, s2_i) = (&mu[i], &s2[i]);
        let mu_s2 = kron_vec(mu_i, s2_i);
        let mu3 = kron3(mu_i, mu_i, mu_i);
        let mut col = s3[i].clone();

        // same-type offspring, at most two distinct individuals
        add_into(&mut col, &kron_vec(s2_i, mu_i), -1.0);
        add_into(&mut col, &swap12.matvec(&mu_s2)?, -1.0);
        add_into(&mut col, &mu_s2, -1.0);
        add_into(&mut col, &mu3, 2.0);

        // one offspring vector used twice, immigration once
        add_into(&mut col, &kron_vec(s2_i, &m_eps), 1.0);
        add_into(&mut col, &swap12.matvec(&kron_vec(&m_eps, s2_i))?, 1.0);
        add_into(&mut col, &kron_vec(&m_eps, s2_i), 1.0);
        add_into(&mut col, &kron3(mu_i, mu_i, &m_eps), -1.0);
        add_into(&mut col, &kron3(mu_i, &m_eps, mu_i), -1.0);
        add_into(&mut col, &kron3(&m_eps, mu_i, mu_i), -1.0);

        // one offspring vector, immigration twice
        add_into(&mut col, &kron_vec(mu_i, &e2), 1.0);
        add_into(&mut col, &swap12.matvec(&kron_vec(mu_i, &e2))?, 1.0);
        add_into(&mut col, &kron_vec(&e2, mu_i), 1.0);

        a31.set_col(i, &col);
    }

    let mut a32 = Matrix::zeros(p3, p2);
    for i in 0..p {
        for j in 0..p {
            let (mu_i, mu_j, s2_i) = (&mu[i], &mu[j], &s2[i]);
            let mut col = kron_vec(s2_i, mu_j);
            add_into(&mut col, &swap12.matvec(&kron_vec(mu_j, s2_i))?, 1.0);
            add_into(&mut col, &kron_vec(mu_j, s2_i), 1.0);
            add_into(&mut col, &kron3(mu_i, mu_i, mu_j), -1.0);
            add_into(&mut col, &kron3(mu_i, mu_j, mu_i), -1.0);
            add_into(&mut col, &kron3(mu_j, mu_i, mu_i), -1.0);

            add_into(&mut col, &kron3(mu_i, mu_j, &m_eps), 1.0);
            add_into(&mut col, &kron3(mu_i, &m_eps, mu_j), 1.0);
            add_into(&mut col, &kron3(&m_eps, mu_i, mu_j), 1.0);

            a32.set_col(i * p + j, &col);
        }
    }

    out.m3 = Some(kron_power(&m, 3)?);
    out.a31 = Some(a31);
    out.a32 = Some(a32);
    Ok(out)
}

/// Kronecker moments of the stationary distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryMoments {
    pub mean: Vector,
    pub kron2: Option<Vector>,
    pub kron3: Option<Vector>,
}

/// Solves for the stationary moments up to `max_order`.
pub fn stationary_moments(model: &BranchingModel, max_order: usize) -> Result<StationaryMoments> {
    if !(1..=3).contains(&max_order) {
        return Err(Error::InvalidOrder(max_order));
    }
    model.require_subcritical()?;
    let m_eps = model.immigration_mean();
    if m_eps.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroImmigration);
    }
    let tm = build_transfer(model, max_order)?;
    solve_fixed_point(model, &tm, max_order)
}

fn solve_fixed_point(
    model: &BranchingModel,
    tm: &TransferMatrices,
    max_order: usize,
) -> Result<StationaryMoments> {
    let p = model.p;
    let m_eps = model.immigration_mean();
    let mean = Matrix::identity(p).sub(&tm.m)?.solve_vec(&m_eps)?;
    let mut out = StationaryMoments {
        mean,
        kron2: None,
        kron3: None,
    };
    if max_order < 2 {
        return Ok(out);
    }
    let mut rhs2 = tm.a21.matvec(&out.mean)?;
    add_into(&mut rhs2, &model.immigration.kron_moments(2)?, 1.0);
    let kron2 = Matrix::identity(p * p).sub(&tm.m2)?.solve_vec(&rhs2)?;

    if max_order == 3 {
        let (m3, a31, a32) = tm.third()?;
        let mut rhs3 = a31.matvec(&out.mean)?;
        add_into(&mut rhs3, &a32.matvec(&kron2)?, 1.0);
        add_into(&mut rhs3, &model.immigration.kron_moments(3)?, 1.0);
        out.kron3 = Some(Matrix::identity(p * p * p).sub(m3)?.solve_vec(&rhs3)?);
    }
    out.kron2 = Some(kron2);
    Ok(out)
}

/// Runs the moment recursion from `Y_0 = 0` for `steps` steps.
///
/// Returns `E(Y_n)`, `E(Y_n^{⊗2})` and (for order 3) `E(Y_n^{⊗3})`.
pub fn iterate_moment_recursion(
    model: &BranchingModel,
    steps: usize,
    max_order: usize,
) -> Result<StationaryMoments> {
    let tm = build_transfer(model, max_order)?;
    let p = model.p;
    let m_eps = model.immigration_mean();
    let e2 = model.immigration.kron_moments(2)?;
    let e3 = if max_order == 3 {
        model.immigration.kron_moments(3)?
    } else {
        Vec::new()
    };
    let mut y1 = vec![0.0; p];
    let mut y2 = vec![0.0; p * p];
    let mut y3 = vec![0.0; if max_order == 3 { p * p * p } else { 0 }];
    for _ in 0..steps {
        if max_order == 3 {
            let (m3, a31, a32) = tm.third()?;
            let mut next = m3.matvec(&y3)?;
            add_into(&mut next, &a32.matvec(&y2)?, 1.0);
            add_into(&mut next, &a31.matvec(&y1)?, 1.0);
            add_into(&mut next, &e3, 1.0);
            y3 = next;
        }
        if max_order >= 2 {
            let mut next = tm.m2.matvec(&y2)?;
            add_into(&mut next, &tm.a21.matvec(&y1)?, 1.0);
            add_into(&mut next, &e2, 1.0);
            y2 = next;
        }
        let mut next = tm.m.matvec(&y1)?;
        add_into(&mut next, &m_eps, 1.0);
        y1 = next;
    }
    Ok(StationaryMoments {
        mean: y1,
        kron2: (max_order >= 2).then_some(y2),
        kron3: (max_order == 3).then_some(y3),
    })
}

/// `v_(i,j)`: offspring covariances `cov(ξ^{(q,i)}, ξ^{(q,j)})` for q = 1..p,
/// followed by the immigration covariance `cov(ε^{(i)}, ε^{(j)})`.
pub fn noise_vector(model: &BranchingModel, i: usize, j: usize) -> Vector {
    let mut v: Vector = model
        .offspring
        .iter()
        .map(|law| law.covariance()[(i, j)])
        .collect();
    v.push(model.immigration.covariance()[(i, j)]);
    v
}

/// All `v_(i,j)` at once, indexed `[i][j]`.
pub fn noise_vectors(model: &BranchingModel) -> Vec<Vec<Vector>> {
    let offs: Vec<Matrix> = model.offspring.iter().map(|l| l.covariance()).collect();
    let imm = model.immigration.covariance();
    (0..model.p)
        .map(|i| {
            (0..model.p)
                .map(|j| {
                    let mut v: Vector = offs.iter().map(|c| c[(i, j)]).collect();
                    v.push(imm[(i, j)]);
                    v
                })
                .collect()
        })
        .collect()
}

/// Conditional innovation covariance given the previous state `x`:
/// entry `(i,j)` is `v_(i,j)ᵀ [x; 1]`.
pub fn conditional_innovation_covariance(model: &BranchingModel, x: &[f64]) -> Matrix {
    let p = model.p;
    let vs = noise_vectors(model);
    let mut out = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let v = &vs[i][j];
            out[(i, j)] = v[..p].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + v[p];
        }
    }
    out
}

/// The matrix `V`, the stationary innovation covariance.
pub fn noise_matrix_v(model: &BranchingModel) -> Result<Matrix> {
    model.require_subcritical()?;
    let p = model.p;
    let mean = Matrix::identity(p)
        .sub(&model.mean_matrix())?
        .solve_vec(&model.immigration_mean())?;
    Ok(conditional_innovation_covariance(model, &mean).symmetrize())
}

/// `var(X_0)` via the discrete Lyapunov equation `var = V + M var Mᵀ`.
pub fn stationary_variance(model: &BranchingModel) -> Result<Matrix> {
    let v = noise_matrix_v(model)?;
    lyapunov_solve(&model.mean_matrix(), &v)
}

/// `cov(X_0, X_k) = var(X_0) (Mᵀ)^k`.
pub fn autocovariance(model: &BranchingModel, k: usize) -> Result<Matrix> {
    let var = stationary_variance(model)?;
    var.matmul(&model.mean_matrix().transpose().pow(k)?)
}

/// `Σ = (I - M)^{-1} V (I - Mᵀ)^{-1}`.
pub fn limit_covariance(model: &BranchingModel) -> Result<Matrix> {
    let v = noise_matrix_v(model)?;
    sigma_from_parts(&model.mean_matrix(), &v)
}

fn sigma_from_parts(m: &Matrix, v: &Matrix) -> Result<Matrix> {
    let inv = Matrix::identity(m.rows()).sub(m)?.inverse()?;
    Ok(inv.matmul(v)?.matmul(&inv.transpose())?.symmetrize())
}

/// Left-hand side of the identity linking `var(X_0)` to `Σ`:
/// `M (I-M)^{-1} var + var + var (I-Mᵀ)^{-1} Mᵀ`.
pub fn sigma_from_variance(m: &Matrix, var: &Matrix) -> Result<Matrix> {
    let inv = Matrix::identity(m.rows()).sub(m)?.inverse()?;
    let left = m.matmul(&inv)?.matmul(var)?;
    let right = var.matmul(&inv.transpose())?.matmul(&m.transpose())?;
    left.add(var)?.add(&right)
}

/// Reshapes a `p²` Kronecker second moment minus `mean meanᵀ` into a covariance.
pub fn central_second_moment(mean: &[f64], kron2: &[f64]) -> Matrix {
    let p = mean.len();
    let mut c = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            c[(i, j)] = kron2[i * p + j] - mean[i] * mean[j];
        }
    }
    c
}

/// Cross-route consistency residuals; each carries its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `‖S - V - MSMᵀ‖_F / (1 + ‖S‖_F)` for `S = var(X_0)`.
    pub lyapunov: f64,
    /// Max entrywise gap between the two expressions for `Σ`.
    #[serde(rename = "help6")]
    pub sigma_identity: f64,
    /// Max entrywise gap between the Lyapunov variance and the variance
    /// read off the second Kronecker moment, relative to `max |var|`.
    /// Absent when the report was built with `max_order = 1`.
    pub route_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub lyapunov: f64,
    #[serde(rename = "help6")]
    pub sigma_identity: f64,
    pub route_gap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            lyapunov: LYAPUNOV_TOLERANCE,
            sigma_identity: IDENTITY_TOLERANCE,
            route_gap: ROUTE_GAP_TOLERANCE,
        }
    }
}

/// Everything the engine knows about the stationary regime of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean: Vector,
    pub kron2: Option<Vector>,
    pub kron3: Option<Vector>,
    #[serde(rename = "V")]
    pub v: Matrix,
    #[serde(rename = "varX0")]
    pub var_x0: Matrix,
    pub sigma: Matrix,
    pub rho: f64,
    pub residuals: Residuals,
    pub tolerances: Tolerances,
}

impl MomentReport {
    /// Whether every cross-route residual is within its tolerance.
    pub fn consistent(&self) -> bool {
        let t = &self.tolerances;
        self.residuals.lyapunov <= t.lyapunov
            && self.residuals.sigma_identity <= t.sigma_identity
            && self.residuals.route_gap.is_none_or(|g| g <= t.route_gap)
    }
}

pub fn moment_report(model: &BranchingModel, max_order: usize) -> Result<MomentReport> {
    let moments = stationary_moments(model, max_order)?;
    let rho = model.spectral_radius();
    let m = model.mean_matrix();
    let v = noise_matrix_v(model)?;
    let var = lyapunov_solve(&m, &v)?;
    let sigma = sigma_from_parts(&m, &v)?;

    let lyap_resid = var
        .sub(&v)?
        .sub(&m.matmul(&var)?.matmul(&m.transpose())?)?
        .norm()
        / (1.0 + var.norm());
    let sigma_alt = sigma_from_variance(&m, &var)?;
    let identity_gap = sigma.max_abs_diff(&sigma_alt);
    let route_gap = moments.kron2.as_ref().map(|k2| {
        let alt = central_second_moment(&moments.mean, k2);
        let scale = var.max_abs();
        let diff = var.max_abs_diff(&alt);
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    });
    debug_assert!(rho < 1.0 - CRITICALITY_TOLERANCE);

    Ok(MomentReport {
        mean: moments.mean,
        kron2: moments.kron2,
        kron3: moments.kron3,
        v,
        var_x0: var,
        sigma,
        rho,
        residuals: Residuals {
            lyapunov: lyap_resid,
            sigma_identity: identity_gap,
            route_gap,
        },
        tolerances: Tolerances::default(),
    })
}
