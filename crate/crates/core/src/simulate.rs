//! Reproducible simulation of the branching chain, independent copies,
//! innovations and the space-time aggregate.
//!
//! Every copy draws from its own ChaCha8 stream, selected by
//! `(master_seed, copy index)`, so an ensemble is a pure function of its
//! seed regardless of how the copies are scheduled across threads.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kronalg::{Matrix, Vector};
use crate::model::BranchingModel;

pub type SimRng = ChaCha8Rng;

/// Target distance to stationarity for automatic burn-in.
pub const BURNIN_TOLERANCE: f64 = 1e-6;
/// Lower bound on automatic burn-in length.
pub const MIN_BURNIN: usize = 100;

/// Random stream number `stream` under `master_seed`.
pub fn stream_rng(master_seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for sub-experiment `index` (e.g. one replication).
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    stream_rng(master_seed, index).next_u64()
}

/// Content hash of a model's canonical JSON form.
pub fn model_hash(model: &BranchingModel) -> String {
    let text = serde_json::to_string(model).expect("model serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BurnIn {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Start at the zero state and record from there.
    Zero,
    /// Run discarded steps from zero before recording.
    Burnin(BurnIn),
}

impl Init {
    pub fn auto() -> Self {
        Init::Burnin(BurnIn::Auto)
    }
}

/// `max(100, ⌈log(1e-6) / log ρ⌉)`.
pub fn auto_burnin(rho: f64) -> usize {
    if rho <= 0.0 {
        return MIN_BURNIN;
    }
    let k = (BURNIN_TOLERANCE.ln() / rho.ln()).ceil();
    MIN_BURNIN.max(k as usize)
}

/// Number of discarded steps for `init` on `model`.
pub fn burnin_steps(model: &BranchingModel, init: Init) -> Result<usize> {
    match init {
        Init::Zero => Ok(0),
        Init::Burnin(b) => {
            let rho = model.require_subcritical()?;
            Ok(match b {
                BurnIn::Auto => auto_burnin(rho),
                BurnIn::Fixed(k) => k,
            })
        }
    }
}

/// One generation: every individual reproduces independently and one
/// immigration vector arrives.
pub fn step(model: &BranchingModel, state: &[u64], rng: &mut SimRng) -> Result<Vec<u64>> {
    let mut next = vec![0u64; model.p];
    step_into(model, state, &mut next, rng)?;
    Ok(next)
}

fn step_into(
    model: &BranchingModel,
    state: &[u64],
    next: &mut [u64],
    rng: &mut SimRng,
) -> Result<()> {
    next.iter_mut().for_each(|x| *x = 0);
    for (law, &count) in model.offspring.iter().zip(state) {
        law.add_sample_sum(count, next, rng)?;
    }
    model.immigration.add_sample_sum(1, next, rng)
}

/// A recorded trajectory `X_0, ..., X_n` stored flat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub p: usize,
    pub states: Vec<u64>,
}

impl Path {
    pub fn from_states(p: usize, states: &[Vec<u64>]) -> Self {
        Self {
            p,
            states: states.iter().flatten().copied().collect(),
        }
    }

    /// Number of recorded states (`n + 1`).
    pub fn len(&self) -> usize {
        self.states.len() / self.p
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[u64] {
        &self.states[k * self.p..(k + 1) * self.p]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u64]> {
        self.states.chunks_exact(self.p)
    }

    /// Coordinate `i` of every state.
    pub fn coordinate(&self, i: usize) -> Vec<u64> {
        self.iter().map(|s| s[i]).collect()
    }
}

/// Simulates `n` steps after the initialization, recording `n + 1` states.
pub fn simulate_path(
    model: &BranchingModel,
    n: usize,
    rng: &mut SimRng,
    init: Init,
) -> Result<Path> {
    let p = model.p;
    let burn = burnin_steps(model, init)?;
    let mut cur = vec![0u64; p];
    let mut next = vec![0u64; p];
    for _ in 0..burn {
        step_into(model, &cur, &mut next, rng)?;
        std::mem::swap(&mut cur, &mut next);
    }
    let mut states = Vec::with_capacity((n + 1) * p);
    states.extend_from_slice(&cur);
    for _ in 0..n {
        step_into(model, &cur, &mut next, rng)?;
        std::mem::swap(&mut cur, &mut next);
        states.extend_from_slice(&cur);
    }
    Ok(Path { p, states })
}

/// Runs a path without storing it, returning `Σ_{k=1}^{K} X_k` for each
/// `K` in `checkpoints` (ascending, each `≤ n`).
pub fn partial_sums(
    model: &BranchingModel,
    n: usize,
    rng: &mut SimRng,
    init: Init,
    checkpoints: &[usize],
) -> Result<Vec<Vec<u128>>> {
    debug_assert!(checkpoints.windows(2).all(|w| w[0] <= w[1]));
    let p = model.p;
    let burn = burnin_steps(model, init)?;
    let mut cur = vec![0u64; p];
    let mut next = vec![0u64; p];
    for _ in 0..burn {
        step_into(model, &cur, &mut next, rng)?;
        std::mem::swap(&mut cur, &mut next);
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut acc = vec![0u128; p];
    let mut cp = checkpoints.iter().peekable();
    while cp.next_if(|&&k| k == 0).is_some() {
        out.push(acc.clone());
    }
    let last = checkpoints.last().copied().unwrap_or(0).min(n);
    for k in 1..=last {
        step_into(model, &cur, &mut next, rng)?;
        std::mem::swap(&mut cur, &mut next);
        for (a, &x) in acc.iter_mut().zip(&cur) {
            *a += u128::from(x);
        }
        while cp.next_if(|&&c| c == k).is_some() {
            out.push(acc.clone());
        }
    }
    if out.len() != checkpoints.len() {
        return Err(Error::OutOfRange(format!(
            "checkpoint beyond the {n} simulated steps"
        )));
    }
    Ok(out)
}

/// `N` independent copies of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub model_hash: String,
    pub copies: usize,
    pub steps: usize,
    pub burnin: usize,
    pub master_seed: u64,
    pub paths: Vec<Path>,
}

/// Metadata written next to exported paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetadata {
    pub model_hash: String,
    pub copies: usize,
    pub steps: usize,
    pub burnin: usize,
    pub master_seed: u64,
    /// Copy `j` uses stream `j` of the master seed.
    pub stream_scheme: String,
}

impl PathEnsemble {
    pub fn metadata(&self) -> EnsembleMetadata {
        EnsembleMetadata {
            model_hash: self.model_hash.clone(),
            copies: self.copies,
            steps: self.steps,
            burnin: self.burnin,
            master_seed: self.master_seed,
            stream_scheme: "chacha8(seed_from_u64(master_seed)).set_stream(copy)".into(),
        }
    }

    /// Writes `copy,k,x_1..x_p` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let p = self.paths.first().map_or(0, |path| path.p);
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["copy".to_string(), "k".to_string()];
        header.extend((1..=p).map(|i| format!("x_{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for (j, path) in self.paths.iter().enumerate() {
            for (k, s) in path.iter().enumerate() {
                let mut rec = vec![j.to_string(), k.to_string()];
                rec.extend(s.iter().map(u64::to_string));
                wtr.write_record(&rec).map_err(csv_err)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn simulate_ensemble(
    model: &BranchingModel,
    copies: usize,
    n: usize,
    master_seed: u64,
    init: Init,
) -> Result<PathEnsemble> {
    let burnin = burnin_steps(model, init)?;
    let paths = (0..copies)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(master_seed, j as u64);
            simulate_path(model, n, &mut rng, init)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        model_hash: model_hash(model),
        copies,
        steps: n,
        burnin,
        master_seed,
        paths,
    })
}

/// Centered space-time sums on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSeries {
    pub grid: Vec<f64>,
    pub values: Vec<Vector>,
    pub scaled: bool,
}

impl AggregateSeries {
    /// Writes `t,s_1..s_p` rows.
    pub fn write_csv<W: Write>(&self, w: W, p: usize) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=p).map(|i| format!("s_{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for (t, v) in self.grid.iter().zip(&self.values) {
            let mut rec = vec![t.to_string()];
            rec.extend(v.iter().map(f64::to_string));
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `⌊n t⌋`, tolerant to representation error in `t` (0.3 * 10 is 3, not 2).
pub fn grid_index(n: usize, t: f64) -> Result<usize> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::OutOfRange(format!(
            "grid point {t} must be finite and nonnegative"
        )));
    }
    let k = (n as f64 * t * (1.0 + 1e-12)).floor() as usize;
    if k > n {
        return Err(Error::OutOfRange(format!(
            "grid point {t} needs {k} steps but only {n} were simulated"
        )));
    }
    Ok(k)
}

/// Converts summed integer states into centered (optionally scaled) values.
pub(crate) fn center_sums(sums: &[u128], count: f64, mean: &[f64], scale: f64) -> Vector {
    sums.iter()
        .zip(mean)
        .map(|(&s, &m)| (s as f64 - count * m) * scale)
        .collect()
}

/// `S_t = Σ_j Σ_{k ≤ ⌊nt⌋} (X^{(j)}_k − mean)`, scaled by `(nN)^{-1/2}` if asked.
///
/// `mean` is the exact stationary mean used for centering.
pub fn aggregate(
    ensemble: &PathEnsemble,
    mean: &[f64],
    grid: &[f64],
    scaled: bool,
) -> Result<AggregateSeries> {
    let n = ensemble.steps;
    let ks: Vec<usize> = grid
        .iter()
        .map(|&t| grid_index(n, t))
        .collect::<Result<_>>()?;
    let p = mean.len();
    let scale = if scaled {
        1.0 / ((n * ensemble.copies) as f64).sqrt()
    } else {
        1.0
    };
    let values = ks
        .iter()
        .map(|&k| {
            let mut sums = vec![0u128; p];
            for path in &ensemble.paths {
                for s in path.iter().skip(1).take(k) {
                    for (a, &x) in sums.iter_mut().zip(s) {
                        *a += u128::from(x);
                    }
                }
            }
            center_sums(&sums, (ensemble.copies * k) as f64, mean, scale)
        })
        .collect();
    Ok(AggregateSeries {
        grid: grid.to_vec(),
        values,
        scaled,
    })
}

/// Martingale differences `U_k = X_k − M X_{k−1} − m_ε`, k = 1..n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationSeries {
    pub p: usize,
    pub u: Vec<f64>,
}

impl InnovationSeries {
    pub fn len(&self) -> usize {
        self.u.len() / self.p
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// `U_k` for k in 1..=len.
    pub fn get(&self, k: usize) -> &[f64] {
        &self.u[(k - 1) * self.p..k * self.p]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.u.chunks_exact(self.p)
    }
}

pub fn extract_innovations(model: &BranchingModel, path: &Path) -> Result<InnovationSeries> {
    if path.len() < 2 {
        return Err(Error::OutOfRange(
            "innovations need a path with at least two states".into(),
        ));
    }
    let m = model.mean_matrix();
    let m_eps = model.immigration_mean();
    let p = model.p;
    let mut u = Vec::with_capacity((path.len() - 1) * p);
    let mut prev: Vec<f64> = path.state(0).iter().map(|&x| x as f64).collect();
    for k in 1..path.len() {
        let pred = m.matvec(&prev)?;
        let cur: Vec<f64> = path.state(k).iter().map(|&x| x as f64).collect();
        u.extend(
            cur.iter()
                .zip(&pred)
                .zip(&m_eps)
                .map(|((x, mx), e)| x - mx - e),
        );
        prev = cur;
    }
    Ok(InnovationSeries { p, u })
}

/// `X_k − (M X_{k−1} + m_ε + U_k)` maximized over the path.
pub fn reconstruction_error(model: &BranchingModel, path: &Path, innov: &InnovationSeries) -> f64 {
    let m: Matrix = model.mean_matrix();
    let m_eps = model.immigration_mean();
    let mut worst = 0.0f64;
    for k in 1..path.len() {
        let prev: Vec<f64> = path.state(k - 1).iter().map(|&x| x as f64).collect();
        let pred = m.matvec(&prev).expect("shape");
        for i in 0..model.p {
            let rebuilt = pred[i] + m_eps[i] + innov.get(k)[i];
            worst = worst.max((path.state(k)[i] as f64 - rebuilt).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScalarLaw, VectorLaw};
    use crate::moments::{noise_matrix_v, stationary_moments, stationary_variance};
    use crate::testing::{scalar_model, two_type_model};

    fn point_model(p: usize, offspring: Vec<Vec<u64>>, imm: &[u64]) -> BranchingModel {
        BranchingModel::new(
            p,
            offspring.iter().map(|v| VectorLaw::point(v)).collect(),
            VectorLaw::point(imm),
        )
        .unwrap()
    }

    #[test]
    fn step_examples() {
        let mut rng = stream_rng(1, 0);
        let m = point_model(1, vec![vec![0]], &[2]);
        assert_eq!(step(&m, &[0], &mut rng).unwrap(), vec![2]);
        let m = point_model(1, vec![vec![1]], &[2]);
        assert_eq!(step(&m, &[3], &mut rng).unwrap(), vec![5]);
        let m = point_model(2, vec![vec![0, 1], vec![0, 0]], &[0, 0]);
        assert_eq!(step(&m, &[1, 0], &mut rng).unwrap(), vec![0, 1]);
    }

    #[test]
    fn step_overflow() {
        let mut rng = stream_rng(1, 0);
        let m = point_model(1, vec![vec![4]], &[1]);
        assert!(matches!(
            step(&m, &[u64::MAX / 2], &mut rng),
            Err(Error::Overflow)
        ));
        // runaway supercritical growth eventually overflows
        let mut path_rng = stream_rng(2, 0);
        assert!(matches!(
            simulate_path(&m, 100, &mut path_rng, Init::Zero),
            Err(Error::Overflow)
        ));
    }

    #[test]
    fn zero_start_deterministic_path() {
        let m = point_model(1, vec![vec![0]], &[1]);
        let mut rng = stream_rng(0, 0);
        let path = simulate_path(&m, 3, &mut rng, Init::Zero).unwrap();
        assert_eq!(path.states, vec![0, 1, 1, 1]);
    }

    #[test]
    fn burnin_rules() {
        assert_eq!(auto_burnin(0.5), 100);
        assert_eq!(auto_burnin(0.0), 100);
        assert_eq!(auto_burnin(0.9), 132);
        let critical = point_model(1, vec![vec![1]], &[1]);
        assert!(matches!(
            burnin_steps(&critical, Init::auto()),
            Err(Error::NotSubcritical { .. })
        ));
        assert_eq!(burnin_steps(&critical, Init::Zero).unwrap(), 0);
        assert_eq!(
            burnin_steps(&scalar_model(), Init::Burnin(BurnIn::Fixed(7))).unwrap(),
            7
        );
    }

    #[test]
    fn ergodic_mean_scalar_model() {
        let model = scalar_model();
        let mut rng = stream_rng(2024, 0);
        let path = simulate_path(&model, 1_000_000, &mut rng, Init::auto()).unwrap();
        let mean = path.states[1..].iter().sum::<u64>() as f64 / 1e6;
        assert!((mean - 2.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn ensembles_are_reproducible_and_distinct() {
        let model = scalar_model();
        let a = simulate_ensemble(&model, 2, 100, 77, Init::auto()).unwrap();
        let b = simulate_ensemble(&model, 2, 100, 77, Init::auto()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.paths[0], a.paths[1]);
        // copy j depends only on (seed, j)
        let c = simulate_ensemble(&model, 5, 100, 77, Init::auto()).unwrap();
        assert_eq!(c.paths[..2], a.paths[..]);
    }

    #[test]
    fn ensemble_independent_of_thread_count() {
        let model = two_type_model();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_ensemble(&model, 16, 50, 5, Init::auto()).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn cross_copy_variance_matches_stationary_variance() {
        let model = scalar_model();
        let ens = simulate_ensemble(&model, 5000, 0, 31, Init::auto()).unwrap();
        let xs: Vec<f64> = ens.paths.iter().map(|p| p.state(0)[0] as f64).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let se = ((m4 - m2 * m2) / n).sqrt();
        let exact = stationary_variance(&model).unwrap()[(0, 0)];
        assert!((m2 - exact).abs() <= 4.0 * se, "{m2} vs {exact} (se {se})");
    }

    #[test]
    fn aggregate_basic_cases() {
        let ens = PathEnsemble {
            model_hash: String::new(),
            copies: 1,
            steps: 1,
            burnin: 0,
            master_seed: 0,
            paths: vec![Path {
                p: 1,
                states: vec![5, 3],
            }],
        };
        let agg = aggregate(&ens, &[2.0], &[0.0, 1.0], false).unwrap();
        assert_eq!(agg.values, vec![vec![0.0], vec![1.0]]);
        assert!(matches!(
            aggregate(&ens, &[2.0], &[2.5], false),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            aggregate(&ens, &[2.0], &[-0.5], false),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn grid_index_is_robust_to_rounding() {
        assert_eq!(grid_index(10, 0.3).unwrap(), 3);
        assert_eq!(grid_index(200, 0.5).unwrap(), 100);
        assert_eq!(grid_index(7, 1.0).unwrap(), 7);
        assert_eq!(grid_index(7, 0.99).unwrap(), 6);
    }

    #[test]
    fn partial_sums_match_stored_path() {
        let model = two_type_model();
        let mut r1 = stream_rng(9, 3);
        let mut r2 = stream_rng(9, 3);
        let path = simulate_path(&model, 40, &mut r1, Init::auto()).unwrap();
        let sums = partial_sums(&model, 40, &mut r2, Init::auto(), &[0, 10, 10, 40]).unwrap();
        for (idx, &k) in [0usize, 10, 10, 40].iter().enumerate() {
            for i in 0..2 {
                let direct: u128 = (1..=k).map(|s| u128::from(path.state(s)[i])).sum();
                assert_eq!(sums[idx][i], direct);
            }
        }
        let mut r3 = stream_rng(9, 3);
        assert!(partial_sums(&model, 5, &mut r3, Init::auto(), &[6]).is_err());
    }

    #[test]
    fn innovation_examples() {
        let model = scalar_model();
        let path = Path {
            p: 1,
            states: vec![2, 3],
        };
        let u = extract_innovations(&model, &path).unwrap();
        assert_eq!(u.u, vec![1.0]);
        assert!(extract_innovations(
            &model,
            &Path {
                p: 1,
                states: vec![2]
            }
        )
        .is_err());

        let det = point_model(2, vec![vec![0, 1], vec![1, 0]], &[1, 0]);
        let mut rng = stream_rng(3, 0);
        let path = simulate_path(&det, 50, &mut rng, Init::Zero).unwrap();
        let u = extract_innovations(&det, &path).unwrap();
        assert!(u.u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reconstruction_is_exact() {
        let model = two_type_model();
        let mut rng = stream_rng(4, 0);
        let path = simulate_path(&model, 2000, &mut rng, Init::auto()).unwrap();
        let u = extract_innovations(&model, &path).unwrap();
        assert!(reconstruction_error(&model, &path, &u) <= 1e-12);
    }

    #[test]
    fn innovation_moments() {
        let model = scalar_model();
        let mut rng = stream_rng(5, 0);
        let n = 1_000_000;
        let path = simulate_path(&model, n, &mut rng, Init::auto()).unwrap();
        let u = extract_innovations(&model, &path).unwrap();
        let v = noise_matrix_v(&model).unwrap()[(0, 0)];
        let mean = u.u.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= 4.0 * (v / n as f64).sqrt());
        // E[U²] vs V with batch-means SE
        let sq: Vec<f64> = u.u.iter().map(|x| x * x).collect();
        let batches = 100;
        let bm: Vec<f64> = sq
            .chunks(n / batches)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let grand = bm.iter().sum::<f64>() / batches as f64;
        let sd =
            (bm.iter().map(|b| (b - grand).powi(2)).sum::<f64>() / (batches - 1) as f64).sqrt();
        let se = sd / (batches as f64).sqrt();
        assert!((grand - v).abs() <= 4.0 * se, "{grand} vs {v}");
    }

    #[test]
    fn ergodic_mean_two_type() {
        let model = two_type_model();
        let exact = stationary_moments(&model, 1).unwrap().mean;
        let mut rng = stream_rng(6, 0);
        let path = simulate_path(&model, 1_000_000, &mut rng, Init::auto()).unwrap();
        for i in 0..2 {
            let avg = path.coordinate(i)[1..].iter().sum::<u64>() as f64 / 1e6;
            assert!(
                (avg - exact[i]).abs() <= 0.02 * exact[i],
                "{avg} vs {}",
                exact[i]
            );
        }
    }

    #[test]
    fn csv_exports() {
        let model = two_type_model();
        let ens = simulate_ensemble(&model, 2, 2, 1, Init::auto()).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("copy,k,x_1,x_2"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        assert!(text.ends_with('\n'));

        let agg = AggregateSeries {
            grid: vec![],
            values: vec![],
            scaled: true,
        };
        let mut buf = Vec::new();
        agg.write_csv(&mut buf, 2).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,s_1,s_2\n");

        let meta = serde_json::to_value(ens.metadata()).unwrap();
        assert_eq!(meta["model_hash"].as_str().unwrap().len(), 64);
        assert_eq!(meta["burnin"], 100);
    }

    #[test]
    fn bernoulli_fast_path_matches_individual_draws_in_law() {
        // Same law through the binomial shortcut and through a finite table.
        let fast = BranchingModel::new(
            1,
            vec![VectorLaw::independent(vec![ScalarLaw::Bernoulli { q: 0.5 }]).unwrap()],
            VectorLaw::independent(vec![ScalarLaw::Poisson { lambda: 1.0 }]).unwrap(),
        )
        .unwrap();
        let table = BranchingModel::new(
            1,
            vec![VectorLaw::finite(vec![
                crate::model::Atom { v: vec![0], p: 0.5 },
                crate::model::Atom { v: vec![1], p: 0.5 },
            ])
            .unwrap()],
            VectorLaw::independent(vec![ScalarLaw::Poisson { lambda: 1.0 }]).unwrap(),
        )
        .unwrap();
        let reps = 200_000;
        let mut ra = stream_rng(8, 0);
        let mut rb = stream_rng(8, 1);
        let mean_a = (0..reps)
            .map(|_| step(&fast, &[10], &mut ra).unwrap()[0])
            .sum::<u64>() as f64
            / reps as f64;
        let mean_b = (0..reps)
            .map(|_| step(&table, &[10], &mut rb).unwrap()[0])
            .sum::<u64>() as f64
            / reps as f64;
        // conditional variance 10*0.25 + 1 = 3.5
        let se = (2.0 * 3.5 / reps as f64).sqrt();
        assert!((mean_a - mean_b).abs() <= 4.0 * se);
        assert!((mean_a - 6.0).abs() <= 4.0 * (3.5 / reps as f64).sqrt());
    }
}
