//! Monte Carlo checks of the ergodic theorem, the autocovariance formula,
//! the innovation structure and the aggregation limit theorems.
//!
//! Each check compares an estimate with its exact target through
//! `z = (estimate − target) / se` and passes when `|z|` is within a fixed
//! multiplier of the standard error.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kronalg::{kron_vec, Matrix};
use crate::model::BranchingModel;
use crate::moments::{
    autocovariance, conditional_innovation_covariance, limit_covariance, noise_matrix_v,
    stationary_moments,
};
use crate::simulate::{
    burnin_steps, center_sums, csv_err, derive_seed, extract_innovations, grid_index, model_hash,
    partial_sums, simulate_path, stream_rng, BurnIn, Init, Path,
};

pub const SE_MULTIPLIER: f64 = 4.0;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// KS threshold is `KS_COEFFICIENT / √reps` (5% level).
pub const KS_COEFFICIENT: f64 = 1.36;
pub const BATCHES: usize = 50;
/// Buckets with fewer visits are not tested.
pub const MIN_BUCKET_COUNT: usize = 100;
/// Below this effective sample size `n(1−ρ)/(1+ρ)` an ergodic report is
/// flagged as underpowered.
pub const MIN_EFFECTIVE_N: f64 = 500.0;

const BOOTSTRAP_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub copies: usize,
    pub reps: usize,
    pub grid: Vec<f64>,
    pub master_seed: u64,
    pub se_multiplier: f64,
    pub burnin: BurnIn,
}

impl ExperimentConfig {
    pub fn new(
        n: usize,
        copies: usize,
        reps: usize,
        grid: Vec<f64>,
        master_seed: u64,
    ) -> Result<Self> {
        let cfg = Self {
            n,
            copies,
            reps,
            grid,
            master_seed,
            se_multiplier: SE_MULTIPLIER,
            burnin: BurnIn::Auto,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.copies == 0 || self.reps == 0 {
            return Err(Error::InvalidConfig(
                "n, copies and reps must be at least 1".into(),
            ));
        }
        if self.reps < 2 {
            return Err(Error::InvalidConfig(
                "covariance estimates need reps >= 2".into(),
            ));
        }
        if !(self.se_multiplier.is_finite() && self.se_multiplier > 0.0) {
            return Err(Error::InvalidConfig(
                "SE multiplier must be positive".into(),
            ));
        }
        for &t in &self.grid {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "grid point {t} outside (0, 1]"
                )));
            }
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "grid must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Mean,
    SecondMoment,
    ThirdMoment,
    Autocovariance,
    Covariance,
    IncrementCovariance,
    /// Intermediate point of an iterated sweep; informational.
    Sweep,
    OrderOverlap,
    InnovationMean,
    InnovationCovariance,
    BucketCovariance,
}

/// One estimate against its exact target. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub kind: CheckKind,
    /// Grid time, lag, or 0 when neither applies.
    pub t: f64,
    pub i: usize,
    pub j: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub copies: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub state: Option<Vec<u64>>,
    pub empirical: f64,
    pub target: f64,
    pub se: f64,
    pub z: f64,
    /// Bootstrap percentile interval (2.5%, 97.5%) where available.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub interval: Option<[f64; 2]>,
    pub pass: bool,
}

impl Check {
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: CheckKind,
        t: f64,
        i: usize,
        j: usize,
        empirical: f64,
        target: f64,
        se: f64,
        k: f64,
    ) -> Self {
        let z = z_score(empirical, target, se);
        Self {
            kind,
            t,
            i: i + 1,
            j: j + 1,
            n: None,
            copies: None,
            state: None,
            empirical,
            target,
            se,
            z,
            interval: None,
            pass: z.abs() <= k,
        }
    }
}

/// `(estimate − target) / se`, with a tiny floor on `se` so that exact
/// agreement in degenerate models gives `z = 0` instead of `0/0`.
pub fn z_score(empirical: f64, target: f64, se: f64) -> f64 {
    let floor = 1e-12 * target.abs().max(1.0);
    (empirical - target) / se.max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityCheck {
    pub t: f64,
    pub component: usize,
    pub ks_statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Empirical and target covariance matrices of the scaled aggregate at `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCovariance {
    pub t: f64,
    pub empirical: Matrix,
    pub target: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub experiment: String,
    pub model_hash: String,
    pub master_seed: u64,
    pub n: usize,
    pub copies: usize,
    pub reps: usize,
    pub grid: Vec<f64>,
    pub burnin: usize,
    pub se_multiplier: f64,
    pub covariances: Vec<GridCovariance>,
    pub checks: Vec<Check>,
    pub normality: Vec<NormalityCheck>,
    pub notes: Vec<String>,
    pub pass: bool,
    /// Wall-clock time; kept out of the serialized report so that reruns
    /// are byte-identical.
    #[serde(skip)]
    pub runtime: Duration,
}

impl VerificationReport {
    fn new(experiment: &str, model: &BranchingModel, master_seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            model_hash: model_hash(model),
            master_seed,
            n: 0,
            copies: 1,
            reps: 1,
            grid: Vec::new(),
            burnin: 0,
            se_multiplier: SE_MULTIPLIER,
            covariances: Vec::new(),
            checks: Vec::new(),
            normality: Vec::new(),
            notes: Vec::new(),
            pass: false,
            runtime: Duration::ZERO,
        }
    }

    fn finish(mut self, started: Instant) -> Self {
        self.pass = self
            .checks
            .iter()
            .filter(|c| c.kind != CheckKind::Sweep)
            .all(|c| c.pass)
            && self.normality.iter().all(|c| c.pass);
        self.runtime = started.elapsed();
        self
    }

    pub fn failing(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| c.kind != CheckKind::Sweep && !c.pass)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.kind != CheckKind::Sweep)
            .map(|c| c.z.abs())
            .fold(0.0, f64::max)
    }

    /// Rows `t,i,j,empirical,target,z,kind`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "i", "j", "empirical", "target", "z", "kind"])
            .map_err(csv_err)?;
        for c in &self.checks {
            let kind = serde_json::to_value(c.kind)?;
            wtr.write_record([
                c.t.to_string(),
                c.i.to_string(),
                c.j.to_string(),
                c.empirical.to_string(),
                c.target.to_string(),
                c.z.to_string(),
                kind.as_str().unwrap_or_default().to_string(),
            ])
            .map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-feature batch means over a long series.
struct BatchMeans {
    batch_len: usize,
    sums: Vec<f64>,
    batches: Vec<Vec<f64>>,
    filled: usize,
    total: Vec<f64>,
    count: usize,
}

impl BatchMeans {
    fn new(features: usize, len: usize) -> Self {
        let batches = BATCHES.min(len).max(1);
        Self {
            batch_len: (len / batches).max(1),
            sums: vec![0.0; features],
            batches: Vec::with_capacity(batches),
            filled: 0,
            total: vec![0.0; features],
            count: 0,
        }
    }

    fn push(&mut self, x: &[f64]) {
        for ((s, t), &v) in self.sums.iter_mut().zip(self.total.iter_mut()).zip(x) {
            *s += v;
            *t += v;
        }
        self.count += 1;
        self.filled += 1;
        if self.filled == self.batch_len && self.batches.len() < BATCHES {
            let b = self.batch_len as f64;
            self.batches.push(self.sums.iter().map(|s| s / b).collect());
            self.sums.iter_mut().for_each(|s| *s = 0.0);
            self.filled = 0;
        }
    }

    /// Overall means and batch-means standard errors.
    fn finish(&self) -> (Vec<f64>, Vec<f64>) {
        let count = self.count.max(1) as f64;
        let means: Vec<f64> = self.total.iter().map(|t| t / count).collect();
        let b = self.batches.len();
        let se = (0..self.total.len())
            .map(|f| {
                if b < 2 {
                    return f64::INFINITY;
                }
                let bm: Vec<f64> = self.batches.iter().map(|batch| batch[f]).collect();
                let avg = bm.iter().sum::<f64>() / b as f64;
                let var = bm.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / (b - 1) as f64;
                (var / b as f64).sqrt()
            })
            .collect();
        (means, se)
    }
}

fn stationary_path(model: &BranchingModel, n: usize, seed: u64) -> Result<(Path, usize)> {
    let burn = burnin_steps(model, Init::auto())?;
    let mut rng = stream_rng(seed, 0);
    Ok((simulate_path(model, n, &mut rng, Init::auto())?, burn))
}

/// Time averages of `x`, `x⊗x` and `x⊗x⊗x` along one stationary path
/// against the exact stationary moments. Second and third moments are
/// indexed as `p × p` and `p × p²` matrices.
pub fn ergodic_check(model: &BranchingModel, n: usize, seed: u64) -> Result<VerificationReport> {
    let started = Instant::now();
    let rho = model.require_subcritical()?;
    let exact = stationary_moments(model, 3)?;
    let p = model.p;
    let (path, burn) = stationary_path(model, n, seed)?;

    let width = p + p * p + p * p * p;
    let mut acc = BatchMeans::new(width, n);
    let mut feat = Vec::with_capacity(width);
    for s in path.iter().skip(1) {
        let x: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let x2 = kron_vec(&x, &x);
        let x3 = kron_vec(&x2, &x);
        feat.clear();
        feat.extend_from_slice(&x);
        feat.extend_from_slice(&x2);
        feat.extend_from_slice(&x3);
        acc.push(&feat);
    }
    let (est, se) = acc.finish();

    let mut report = VerificationReport::new("ergodic", model, seed);
    report.n = n;
    report.burnin = burn;
    let k = report.se_multiplier;
    let targets = exact
        .mean
        .iter()
        .chain(exact.kron2.as_deref().unwrap_or_default())
        .chain(exact.kron3.as_deref().unwrap_or_default());
    for (f, &target) in targets.enumerate() {
        let (kind, i, j) = if f < p {
            (CheckKind::Mean, f, f)
        } else if f < p + p * p {
            (CheckKind::SecondMoment, (f - p) / p, (f - p) % p)
        } else {
            let g = f - p - p * p;
            (CheckKind::ThirdMoment, g / (p * p), g % (p * p))
        };
        report
            .checks
            .push(Check::new(kind, 0.0, i, j, est[f], target, se[f], k));
    }
    let effective = n as f64 * (1.0 - rho) / (1.0 + rho);
    if effective < MIN_EFFECTIVE_N {
        report.notes.push(format!(
            "insufficient_n: effective sample size {effective:.1} < {MIN_EFFECTIVE_N}"
        ));
    }
    Ok(report.finish(started))
}

/// Lag-`k` covariance `E[(X_t − μ)(X_{t+k} − μ)ᵀ]` from one stationary path,
/// centered at the exact mean, against `var(X_0)(Mᵀ)^k`.
pub fn autocovariance_check(
    model: &BranchingModel,
    n: usize,
    lags: &[usize],
    seed: u64,
) -> Result<VerificationReport> {
    let started = Instant::now();
    model.require_subcritical()?;
    let mean = stationary_moments(model, 1)?.mean;
    let p = model.p;
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if max_lag >= n {
        return Err(Error::InvalidConfig(format!(
            "lag {max_lag} needs a path longer than {n}"
        )));
    }
    let (path, burn) = stationary_path(model, n, seed)?;
    let centered: Vec<Vec<f64>> = path
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect();
    let terms = path.len() - max_lag;
    let mut acc = BatchMeans::new(lags.len() * p * p, terms);
    let mut feat = vec![0.0; lags.len() * p * p];
    for t in 0..terms {
        for (l, &lag) in lags.iter().enumerate() {
            let (a, b) = (&centered[t], &centered[t + lag]);
            for i in 0..p {
                for j in 0..p {
                    feat[(l * p + i) * p + j] = a[i] * b[j];
                }
            }
        }
        acc.push(&feat);
    }
    let (est, se) = acc.finish();

    let mut report = VerificationReport::new("autocovariance", model, seed);
    report.n = n;
    report.burnin = burn;
    let k = report.se_multiplier;
    for (l, &lag) in lags.iter().enumerate() {
        let target = autocovariance(model, lag)?;
        for i in 0..p {
            for j in 0..p {
                let f = (l * p + i) * p + j;
                report.checks.push(Check::new(
                    CheckKind::Autocovariance,
                    lag as f64,
                    i,
                    j,
                    est[f],
                    target[(i, j)],
                    se[f],
                    k,
                ));
            }
        }
    }
    Ok(report.finish(started))
}

/// Checks `E(U_k U_kᵀ | X_{k−1} = x) = v_(i,j)ᵀ[x; 1]` on every state
/// visited at least [`MIN_BUCKET_COUNT`] times, and globally
/// `E U_k = 0`, `E U_k U_kᵀ = V`.
pub fn innovation_diagnostics(model: &BranchingModel, path: &Path) -> Result<VerificationReport> {
    let started = Instant::now();
    let p = model.p;
    let v = noise_matrix_v(model)?;
    let innov = extract_innovations(model, path)?;
    let n = innov.len();

    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
    let mut global = BatchMeans::new(pairs.len(), n);
    let mut mean_u = vec![0.0; p];
    // state -> (count, Σ product, Σ product²) per pair
    let mut buckets: BTreeMap<Vec<u64>, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut prods = vec![0.0; pairs.len()];
    for k in 1..=n {
        let u = innov.get(k);
        for (m, &x) in mean_u.iter_mut().zip(u) {
            *m += x;
        }
        for (f, &(i, j)) in pairs.iter().enumerate() {
            prods[f] = u[i] * u[j];
        }
        global.push(&prods);
        let entry = buckets
            .entry(path.state(k - 1).to_vec())
            .or_insert_with(|| (0, vec![0.0; pairs.len()], vec![0.0; pairs.len()]));
        entry.0 += 1;
        for (f, &x) in prods.iter().enumerate() {
            entry.1[f] += x;
            entry.2[f] += x * x;
        }
    }

    let mut report = VerificationReport::new("innovations", model, 0);
    report.n = n;
    let kmul = report.se_multiplier;
    for (i, m) in mean_u.iter().enumerate() {
        let se = (v[(i, i)] / n as f64).sqrt();
        report.checks.push(Check::new(
            CheckKind::InnovationMean,
            0.0,
            i,
            i,
            m / n as f64,
            0.0,
            se,
            kmul,
        ));
    }
    let (est, se) = global.finish();
    for (f, &(i, j)) in pairs.iter().enumerate() {
        report.checks.push(Check::new(
            CheckKind::InnovationCovariance,
            0.0,
            i,
            j,
            est[f],
            v[(i, j)],
            se[f],
            kmul,
        ));
    }
    let mut skipped = 0;
    for (state, (count, sum, sumsq)) in &buckets {
        if *count < MIN_BUCKET_COUNT {
            skipped += 1;
            continue;
        }
        let x: Vec<f64> = state.iter().map(|&s| s as f64).collect();
        let target = conditional_innovation_covariance(model, &x);
        let c = *count as f64;
        for (f, &(i, j)) in pairs.iter().enumerate() {
            let mean = sum[f] / c;
            let var = ((sumsq[f] - c * mean * mean) / (c - 1.0)).max(0.0);
            let mut check = Check::new(
                CheckKind::BucketCovariance,
                0.0,
                i,
                j,
                mean,
                target[(i, j)],
                (var / c).sqrt(),
                kmul,
            );
            check.n = Some(*count);
            check.state = Some(state.clone());
            report.checks.push(check);
        }
    }
    if skipped > 0 {
        report.notes.push(format!(
            "{skipped} states visited fewer than {MIN_BUCKET_COUNT} times were not tested"
        ));
    }
    Ok(report.finish(started))
}

/// Scaled aggregates `(nN)^{-1/2} S_t` for every replication and grid point:
/// `out[r][g]` is the value at `grid[g]` in replication `r`.
pub fn scaled_aggregate_replications(
    model: &BranchingModel,
    n: usize,
    copies: usize,
    reps: usize,
    grid: &[f64],
    master_seed: u64,
    init: Init,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mean = stationary_moments(model, 1)?.mean;
    let ks: Vec<usize> = grid
        .iter()
        .map(|&t| grid_index(n, t))
        .collect::<Result<_>>()?;
    let scale = 1.0 / ((n * copies) as f64).sqrt();
    let p = model.p;
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(master_seed, r as u64);
            let mut totals = vec![vec![0u128; p]; ks.len()];
            for j in 0..copies {
                let mut rng = stream_rng(seed, j as u64);
                let sums = partial_sums(model, n, &mut rng, init, &ks)?;
                for (tot, s) in totals.iter_mut().zip(&sums) {
                    for (a, &b) in tot.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
            Ok(totals
                .iter()
                .zip(&ks)
                .map(|(tot, &k)| center_sums(tot, (copies * k) as f64, &mean, scale))
                .collect())
        })
        .collect()
}

/// Sample covariance of features `a` and `b` over the rows in `idx`.
fn covariance(rows: &[Vec<f64>], idx: &[usize], a: usize, b: usize) -> f64 {
    let m = idx.len() as f64;
    let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
    for &r in idx {
        let (x, y) = (rows[r][a], rows[r][b]);
        sa += x;
        sb += y;
        sab += x * y;
    }
    (sab - sa * sb / m) / (m - 1.0)
}

struct Bootstrapped {
    estimate: f64,
    se: f64,
    interval: [f64; 2],
}

/// Covariances of the listed feature pairs with bootstrap standard errors
/// and percentile intervals from [`BOOTSTRAP_RESAMPLES`] resamples.
fn bootstrap_covariances(
    rows: &[Vec<f64>],
    pairs: &[(usize, usize)],
    seed: u64,
) -> Vec<Bootstrapped> {
    let reps = rows.len();
    let all: Vec<usize> = (0..reps).collect();
    let mut rng = stream_rng(seed, BOOTSTRAP_STREAM);
    let draws: Vec<Vec<f64>> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..reps).map(|_| rng.random_range(0..reps)).collect();
            pairs
                .iter()
                .map(|&(a, b)| covariance(rows, &idx, a, b))
                .collect()
        })
        .collect();
    pairs
        .iter()
        .enumerate()
        .map(|(f, &(a, b))| {
            let mut vals: Vec<f64> = draws.iter().map(|d| d[f]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let se = (vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64)
                .sqrt();
            vals.sort_by(f64::total_cmp);
            let q = |p: f64| vals[((p * (vals.len() - 1) as f64).round()) as usize];
            Bootstrapped {
                estimate: covariance(rows, &all, a, b),
                se,
                interval: [q(0.025), q(0.975)],
            }
        })
        .collect()
}

/// Kolmogorov–Smirnov distance between the empirically standardized sample
/// and the standard normal; `None` when the sample has no spread.
pub fn ks_normal_statistic(sample: &[f64]) -> Option<f64> {
    let m = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / m;
    let sd = (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return None;
    }
    let mut z: Vec<f64> = sample.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    Some(z.iter().enumerate().fold(0.0f64, |d, (k, &x)| {
        let f = normal.cdf(x);
        d.max((k + 1) as f64 / m - f).max(f - k as f64 / m)
    }))
}

struct CltOutcome {
    covariances: Vec<GridCovariance>,
    checks: Vec<Check>,
    normality: Vec<NormalityCheck>,
}

fn clt_core(
    model: &BranchingModel,
    sigma: &Matrix,
    n: usize,
    copies: usize,
    cfg: &ExperimentConfig,
    seed: u64,
    with_increments: bool,
) -> Result<CltOutcome> {
    let p = model.p;
    let init = Init::Burnin(cfg.burnin);
    let values = scaled_aggregate_replications(model, n, copies, cfg.reps, &cfg.grid, seed, init)?;
    // features: S_t for every grid point, then increments S_t − S_{t−}
    let rows: Vec<Vec<f64>> = values
        .iter()
        .map(|per_t| {
            let mut row: Vec<f64> = per_t.iter().flatten().copied().collect();
            let zero = vec![0.0; p];
            for (a, cur) in per_t.iter().enumerate() {
                let prev = if a == 0 { &zero } else { &per_t[a - 1] };
                row.extend(cur.iter().zip(prev).map(|(x, y)| x - y));
            }
            row
        })
        .collect();
    let level = |a: usize, i: usize| a * p + i;
    let g = cfg.grid.len();
    let incr = |a: usize, i: usize| g * p + a * p + i;

    let mut pairs = Vec::new();
    let mut meta = Vec::new();
    for (a, &t) in cfg.grid.iter().enumerate() {
        for i in 0..p {
            for j in i..p {
                pairs.push((level(a, i), level(a, j)));
                meta.push((CheckKind::Covariance, t, i, j, t * sigma[(i, j)]));
            }
        }
    }
    if with_increments {
        for a in 0..g {
            for b in a + 1..g {
                for i in 0..p {
                    for j in 0..p {
                        pairs.push((incr(a, i), incr(b, j)));
                        meta.push((CheckKind::IncrementCovariance, cfg.grid[b], i, j, 0.0));
                    }
                }
            }
        }
    }
    let boot = bootstrap_covariances(&rows, &pairs, seed);
    let checks = boot
        .iter()
        .zip(&meta)
        .map(|(b, &(kind, t, i, j, target))| {
            let mut c = Check::new(kind, t, i, j, b.estimate, target, b.se, cfg.se_multiplier);
            c.n = Some(n);
            c.copies = Some(copies);
            c.interval = Some(b.interval);
            c
        })
        .collect();

    let all: Vec<usize> = (0..rows.len()).collect();
    let covariances = cfg
        .grid
        .iter()
        .enumerate()
        .map(|(a, &t)| {
            let mut emp = Matrix::zeros(p, p);
            for i in 0..p {
                for j in 0..p {
                    emp[(i, j)] = covariance(&rows, &all, level(a, i), level(a, j));
                }
            }
            GridCovariance {
                t,
                empirical: emp,
                target: sigma.scale(t),
            }
        })
        .collect();

    let threshold = KS_COEFFICIENT / (cfg.reps as f64).sqrt();
    let mut normality = Vec::new();
    for (a, &t) in cfg.grid.iter().enumerate() {
        for i in 0..p {
            let sample: Vec<f64> = rows.iter().map(|r| r[level(a, i)]).collect();
            if let Some(d) = ks_normal_statistic(&sample) {
                normality.push(NormalityCheck {
                    t,
                    component: i + 1,
                    ks_statistic: d,
                    threshold,
                    pass: d <= threshold,
                });
            }
        }
    }
    Ok(CltOutcome {
        covariances,
        checks,
        normality,
    })
}

fn experiment_report(
    name: &str,
    model: &BranchingModel,
    cfg: &ExperimentConfig,
) -> Result<(VerificationReport, Matrix)> {
    cfg.validate()?;
    let rho = model.require_subcritical()?;
    let sigma = limit_covariance(model)?;
    let mut report = VerificationReport::new(name, model, cfg.master_seed);
    report.n = cfg.n;
    report.copies = cfg.copies;
    report.reps = cfg.reps;
    report.grid = cfg.grid.clone();
    report.burnin = burnin_steps(model, Init::Burnin(cfg.burnin))?;
    report.se_multiplier = cfg.se_multiplier;
    report.notes.push(
        "finite (n, N, reps) proxies for limits; no convergence rate is available, so adequacy is empirical"
            .into(),
    );
    if !model.validate().primitive {
        report
            .notes
            .push(format!("mean matrix is not primitive (rho = {rho})"));
    }
    Ok((report, sigma))
}

/// Covariance of `(nN)^{-1/2} S_t` across replications against `tΣ`,
/// decorrelation of disjoint increments, and marginal normality.
pub fn clt_covariance_experiment(
    model: &BranchingModel,
    cfg: &ExperimentConfig,
) -> Result<VerificationReport> {
    let started = Instant::now();
    let (mut report, sigma) = experiment_report("clt", model, cfg)?;
    let out = clt_core(model, &sigma, cfg.n, cfg.copies, cfg, cfg.master_seed, true)?;
    report.covariances = out.covariances;
    report.checks = out.checks;
    report.normality = out.normality;
    Ok(report.finish(started))
}

/// Which limit is approximated first by a large fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitOrder {
    /// Copies `N` fixed and large, time horizon `n` swept.
    #[serde(rename = "N_first")]
    CopiesFirst,
    /// Time horizon `n` fixed and large, copies `N` swept.
    #[serde(rename = "n_first")]
    TimeFirst,
}

/// Sweeps the outer parameter with the inner one held at `inner`.
/// Intermediate points are reported as [`CheckKind::Sweep`]; the verdict
/// is taken at the last sweep value.
pub fn iterated_experiment(
    model: &BranchingModel,
    cfg: &ExperimentConfig,
    order: LimitOrder,
    inner: usize,
    sweep: &[usize],
) -> Result<VerificationReport> {
    let started = Instant::now();
    if inner == 0 || sweep.is_empty() || sweep.contains(&0) {
        return Err(Error::InvalidConfig(
            "inner value and sweep must be positive and nonempty".into(),
        ));
    }
    let name = match order {
        LimitOrder::CopiesFirst => "iterated_N_first",
        LimitOrder::TimeFirst => "iterated_n_first",
    };
    let (mut report, sigma) = experiment_report(name, model, cfg)?;
    for (s, &outer) in sweep.iter().enumerate() {
        let (n, copies) = match order {
            LimitOrder::CopiesFirst => (outer, inner),
            LimitOrder::TimeFirst => (inner, outer),
        };
        let seed = derive_seed(cfg.master_seed, s as u64);
        let last = s + 1 == sweep.len();
        let mut out = clt_core(model, &sigma, n, copies, cfg, seed, false)?;
        if last {
            report.n = n;
            report.copies = copies;
            report.covariances = out.covariances;
            report.normality = out.normality;
        } else {
            out.checks
                .iter_mut()
                .for_each(|c| c.kind = CheckKind::Sweep);
        }
        report.checks.extend(out.checks);
    }
    Ok(report.finish(started))
}

/// Final-point covariance estimates of two orderings: each band must hold
/// `tΣ` (already in the inputs) and the bands `est ± k·se` must overlap.
pub fn compare_orders(
    a: &VerificationReport,
    b: &VerificationReport,
) -> Result<VerificationReport> {
    let started = Instant::now();
    let finals = |r: &VerificationReport| -> Vec<Check> {
        r.checks
            .iter()
            .filter(|c| c.kind == CheckKind::Covariance)
            .cloned()
            .collect()
    };
    let (fa, fb) = (finals(a), finals(b));
    if fa.len() != fb.len() || a.model_hash != b.model_hash {
        return Err(Error::InvalidConfig("reports are not comparable".into()));
    }
    let k = a.se_multiplier;
    let mut report = a.clone();
    report.experiment = "iterated_both".into();
    report.checks = fa.iter().chain(&fb).cloned().collect();
    report.normality = a.normality.iter().chain(&b.normality).cloned().collect();
    report.notes.push(format!(
        "orders compared at (n, N) = ({}, {}) and ({}, {})",
        a.n, a.copies, b.n, b.copies
    ));
    for (x, y) in fa.iter().zip(&fb) {
        // disjoint bands ⇔ |x − y| > k(se_x + se_y)
        let mut c = Check::new(
            CheckKind::OrderOverlap,
            x.t,
            x.i - 1,
            x.j - 1,
            x.empirical - y.empirical,
            0.0,
            x.se + y.se,
            k,
        );
        c.interval = None;
        report.checks.push(c);
    }
    Ok(report.finish(started))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{deterministic_model, no_offspring_model, scalar_model, two_type_model};

    #[test]
    fn ergodic_scalar() {
        let r = ergodic_check(&scalar_model(), 1_000_000, 1).unwrap();
        assert!(r.pass, "{:?}", r.failing().collect::<Vec<_>>());
        let mean = &r.checks[0];
        assert_eq!(mean.kind, CheckKind::Mean);
        assert!((mean.empirical - 2.0).abs() < 0.02);
        assert!(r.notes.is_empty());
    }

    #[test]
    fn ergodic_deterministic_is_exact() {
        let r = ergodic_check(&deterministic_model(), 1000, 1).unwrap();
        assert!(r.pass);
        assert!(r.checks.iter().all(|c| c.empirical == 1.0 && c.z == 0.0));
    }

    #[test]
    fn ergodic_flags_short_runs() {
        let high = crate::ginar::embed(&crate::ginar::GinarSpec::from_means(&[0.95], 1.0).unwrap());
        let r = ergodic_check(&high, 100, 1).unwrap();
        assert!(r.notes.iter().any(|n| n.starts_with("insufficient_n")));
    }

    #[test]
    fn autocovariance_scalar() {
        let r = autocovariance_check(&scalar_model(), 1_000_000, &[0, 1, 2, 50], 3).unwrap();
        assert!(r.pass, "{:?}", r.failing().collect::<Vec<_>>());
        let lag = |k: f64| r.checks.iter().find(|c| c.t == k).unwrap();
        assert!((lag(0.0).target - 2.0).abs() < 1e-12);
        assert!((lag(1.0).target - 1.0).abs() < 1e-12);
        assert!(lag(50.0).target < 1e-14);
        assert!(autocovariance_check(&scalar_model(), 10, &[10], 3).is_err());
    }

    #[test]
    fn innovations_scalar() {
        let model = scalar_model();
        let mut rng = stream_rng(4, 0);
        let path = simulate_path(&model, 1_000_000, &mut rng, Init::auto()).unwrap();
        let r = innovation_diagnostics(&model, &path).unwrap();
        assert!(r.pass, "{:?}", r.failing().collect::<Vec<_>>());
        let zero = r
            .checks
            .iter()
            .find(|c| c.kind == CheckKind::BucketCovariance && c.state.as_deref() == Some(&[0][..]))
            .unwrap();
        assert!((zero.target - 1.0).abs() < 1e-12);
        let global = r
            .checks
            .iter()
            .find(|c| c.kind == CheckKind::InnovationCovariance)
            .unwrap();
        assert!((global.target - 1.5).abs() < 1e-12);
    }

    #[test]
    fn innovations_deterministic() {
        let model = deterministic_model();
        let mut rng = stream_rng(4, 0);
        let path = simulate_path(&model, 500, &mut rng, Init::auto()).unwrap();
        let r = innovation_diagnostics(&model, &path).unwrap();
        assert!(r.pass);
        assert!(r
            .checks
            .iter()
            .all(|c| c.empirical == 0.0 && c.target == 0.0));
    }

    #[test]
    fn innovations_two_type() {
        let model = two_type_model();
        let mut rng = stream_rng(5, 0);
        let path = simulate_path(&model, 300_000, &mut rng, Init::auto()).unwrap();
        let r = innovation_diagnostics(&model, &path).unwrap();
        assert!(r.pass, "{:?}", r.failing().collect::<Vec<_>>());
    }

    #[test]
    fn ks_statistic_behaves() {
        let normal = Normal::standard();
        let m = 2000;
        let quantiles: Vec<f64> = (0..m)
            .map(|k| normal.inverse_cdf((k as f64 + 0.5) / m as f64))
            .collect();
        assert!(ks_normal_statistic(&quantiles).unwrap() < 0.01);
        let skewed: Vec<f64> = (0..m)
            .map(|k| ((k as f64 + 0.5) / m as f64).powi(8))
            .collect();
        assert!(ks_normal_statistic(&skewed).unwrap() > 1.36 / (m as f64).sqrt());
        assert_eq!(ks_normal_statistic(&[1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::new(0, 1, 2, vec![1.0], 0).is_err());
        assert!(ExperimentConfig::new(10, 1, 2, vec![1.5], 0).is_err());
        assert!(ExperimentConfig::new(10, 1, 2, vec![0.0], 0).is_err());
        assert!(ExperimentConfig::new(10, 1, 2, vec![1.0, 0.5], 0).is_err());
        assert!(ExperimentConfig::new(10, 1, 2, vec![], 0).is_ok());
    }

    #[test]
    fn clt_no_offspring_is_classical_clt() {
        let cfg = ExperimentConfig::new(200, 50, 2000, vec![0.5, 1.0], 7).unwrap();
        let r = clt_covariance_experiment(&no_offspring_model(), &cfg).unwrap();
        assert!(
            r.pass,
            "{:?} {:?}",
            r.failing().collect::<Vec<_>>(),
            r.normality
        );
        let last = r.covariances.last().unwrap();
        assert!((last.target[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((last.empirical[(0, 0)] - 1.0).abs() < 0.1);
        assert!(r
            .checks
            .iter()
            .any(|c| c.kind == CheckKind::IncrementCovariance));
    }

    #[test]
    fn clt_detects_wrong_target() {
        // the i.i.d. aggregate has variance 1; a model claiming Σ = 1.5 must fail
        let cfg = ExperimentConfig::new(100, 20, 2000, vec![1.0], 9).unwrap();
        let model = no_offspring_model();
        let (_, sigma) = experiment_report("clt", &model, &cfg).unwrap();
        let out = clt_core(&model, &sigma.scale(1.5), 100, 20, &cfg, 9, false).unwrap();
        assert!(out.checks.iter().any(|c| !c.pass));
    }

    #[test]
    fn clt_degenerate_is_exactly_zero() {
        let model = deterministic_model();
        let cfg = ExperimentConfig::new(50, 5, 20, vec![0.5, 1.0], 1).unwrap();
        let values =
            scaled_aggregate_replications(&model, 50, 5, 20, &cfg.grid, 1, Init::auto()).unwrap();
        assert!(values.iter().flatten().flatten().all(|&x| x == 0.0));
        let r = clt_covariance_experiment(&model, &cfg).unwrap();
        assert!(r.pass);
        assert!(r.normality.is_empty());
        let o = iterated_experiment(&model, &cfg, LimitOrder::TimeFirst, 50, &[2, 5]).unwrap();
        assert!(o.pass);
    }

    #[test]
    fn reports_are_deterministic_across_thread_counts() {
        let model = two_type_model();
        let cfg = ExperimentConfig::new(40, 6, 50, vec![0.5, 1.0], 3).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let r = pool.install(|| clt_covariance_experiment(&model, &cfg).unwrap());
            let mut csv = Vec::new();
            r.write_csv(&mut csv).unwrap();
            (serde_json::to_string(&r).unwrap(), csv)
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn iterated_scalar_orders_agree() {
        let model = scalar_model();
        let cfg = ExperimentConfig::new(200, 50, 1000, vec![1.0], 11).unwrap();
        let a = iterated_experiment(&model, &cfg, LimitOrder::CopiesFirst, 200, &[12, 50]).unwrap();
        let b = iterated_experiment(&model, &cfg, LimitOrder::TimeFirst, 200, &[12, 50]).unwrap();
        assert_eq!((a.n, a.copies, b.n, b.copies), (50, 200, 200, 50));
        assert!(a.checks.iter().any(|c| c.kind == CheckKind::Sweep));
        let both = compare_orders(&a, &b).unwrap();
        assert!(both.pass, "{:?}", both.failing().collect::<Vec<_>>());
    }

    #[test]
    fn csv_header_only_for_empty_grid() {
        let model = scalar_model();
        let cfg = ExperimentConfig::new(10, 2, 5, vec![], 1).unwrap();
        let r = clt_covariance_experiment(&model, &cfg).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,i,j,empirical,target,z,kind\n"
        );
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("runtime").is_none());
    }

    #[test]
    fn z_score_floor() {
        assert_eq!(z_score(1.0, 1.0, 0.0), 0.0);
        assert!(z_score(1.0, 0.0, 0.0).abs() > 1e6);
        assert_eq!(z_score(3.0, 1.0, 0.5), 4.0);
    }
}
