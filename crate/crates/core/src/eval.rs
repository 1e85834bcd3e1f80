//! Evaluation: sparse-state estimation against sparse coding and a Kalman
//! filter on simulated permutation dynamics, and cluster separability of
//! inferred causes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure_len, ensure_shape, Error, Result};
use crate::inference::{GammaWeights, StateSolver};
use crate::model::{normalize_columns, HyperParams};
use crate::seed;

/// Simulation of a sparse state vector carried by random permutations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub state_dim: usize,
    pub active: usize,
    pub obs_dim: usize,
    pub steps: usize,
    pub obs_noise_var: f64,
    /// Poisson mean of the number of support switches per step.
    pub switch_mean: f64,
    /// Range of the diagonal observation scaling.
    pub scale_range: (f64, f64),
    /// Range of the magnitudes of active entries; signs are random.
    pub amplitude_range: (f64, f64),
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            state_dim: 100,
            active: 10,
            obs_dim: 100,
            steps: 80,
            obs_noise_var: 0.01,
            switch_mean: 2.0,
            scale_range: (0.5, 1.5),
            amplitude_range: (2.0, 4.0),
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.obs_dim == 0 || self.steps == 0 {
            return Err(Error::param("state_dim, obs_dim and steps must be >= 1"));
        }
        if self.active == 0 || self.active > self.state_dim {
            return Err(Error::param(format!(
                "active count {} must lie in 1..={}",
                self.active, self.state_dim
            )));
        }
        if self.obs_dim > self.state_dim {
            return Err(Error::param("obs_dim may not exceed state_dim"));
        }
        if !(self.obs_noise_var >= 0.0 && self.obs_noise_var.is_finite()) {
            return Err(Error::param("obs_noise_var must be finite and >= 0"));
        }
        if !(self.switch_mean >= 0.0 && self.switch_mean.is_finite()) {
            return Err(Error::param("switch_mean must be finite and >= 0"));
        }
        for (name, (lo, hi)) in [("scale_range", self.scale_range), ("amplitude_range", self.amplitude_range)] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::param(format!("{name} must satisfy 0 < lo <= hi")));
            }
        }
        Ok(())
    }
}

/// Simulated trajectory with the known model matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub states: Vec<Array1<f64>>,
    pub observations: Vec<Array1<f64>>,
    /// `perms[t][i]` is where entry `i` of `x_{t−1}` lands in `x_t`. The
    /// first entry is the identity.
    pub perms: Vec<Vec<usize>>,
    pub observation_matrix: Array2<f64>,
    pub switch_counts: Vec<usize>,
}

impl Simulation {
    /// Dense transition matrix of step `t`.
    pub fn transition(&self, t: usize) -> Array2<f64> {
        let k = self.perms[t].len();
        let mut a = Array2::zeros((k, k));
        for (i, &j) in self.perms[t].iter().enumerate() {
            a[[j, i]] = 1.0;
        }
        a
    }

    pub fn transitions(&self) -> Vec<Array2<f64>> {
        (0..self.perms.len()).map(|t| self.transition(t)).collect()
    }
}

fn permute(x: &Array1<f64>, perm: &[usize]) -> Array1<f64> {
    let mut out = Array1::zeros(x.len());
    for (i, &j) in perm.iter().enumerate() {
        out[j] = x[i];
    }
    out
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Observation matrix: a diagonal scaling, preceded for `P < K` by a fixed
/// Gaussian projection with unit-norm columns.
fn observation_matrix(spec: &SimSpec, rng: &mut impl Rng) -> Array2<f64> {
    let (k, p) = (spec.state_dim, spec.obs_dim);
    let scale = Array1::from_shape_fn(k, |_| uniform(rng, spec.scale_range));
    if p == k {
        return Array2::from_diag(&scale);
    }
    let mut proj = Array2::from_shape_fn((p, k), |_| rng.sample::<f64, _>(StandardNormal));
    normalize_columns(&mut proj, None);
    proj * &scale
}

/// Sparse dynamics: at every step the state is permuted by a fresh random
/// permutation, then a Poisson number of switches each swap a random active
/// entry with a uniformly chosen entry (which preserves the support size).
pub fn simulate_sparse_dynamics(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let k = spec.state_dim;
    let mut rng = seed::rng(seed::derive(spec.seed, "sparse-dynamics"));
    let m = observation_matrix(spec, &mut rng);

    let mut x = Array1::zeros(k);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(&mut rng);
    for &i in &idx[..spec.active] {
        let mag = uniform(&mut rng, spec.amplitude_range);
        x[i] = if rng.random::<bool>() { mag } else { -mag };
    }
    let poisson = (spec.switch_mean > 0.0)
        .then(|| Poisson::new(spec.switch_mean).map_err(|e| Error::param(e.to_string())))
        .transpose()?;
    let noise_sd = spec.obs_noise_var.sqrt();

    let mut sim = Simulation {
        states: Vec::with_capacity(spec.steps),
        observations: Vec::with_capacity(spec.steps),
        perms: Vec::with_capacity(spec.steps),
        observation_matrix: m,
        switch_counts: Vec::with_capacity(spec.steps),
    };
    for t in 0..spec.steps {
        let mut switches = 0;
        if t == 0 {
            sim.perms.push((0..k).collect());
        } else {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            x = permute(&x, &perm);
            sim.perms.push(perm);
            if let Some(p) = &poisson {
                switches = p.sample(&mut rng) as usize;
                for _ in 0..switches {
                    let support: Vec<usize> = (0..k).filter(|&i| x[i] != 0.0).collect();
                    let from = support[rng.random_range(0..support.len())];
                    let to = rng.random_range(0..k);
                    x.swap(from, to);
                }
            }
        }
        let noise = Array1::from_shape_fn(spec.obs_dim, |_| noise_sd * rng.sample::<f64, _>(StandardNormal));
        sim.observations.push(sim.observation_matrix.dot(&x) + noise);
        sim.states.push(x.clone());
        sim.switch_counts.push(switches);
    }
    Ok(sim)
}

/// Relative error `‖x_est − x_true‖ / ‖x_true‖`.
pub fn rmse(x_est: &Array1<f64>, x_true: &Array1<f64>) -> Result<f64> {
    ensure_len("estimate", x_est.len(), x_true.len())?;
    let norm = x_true.dot(x_true).sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("relative error of a zero true state".into()));
    }
    let d = x_est - x_true;
    Ok(d.dot(&d).sqrt() / norm)
}

/// Mean relative error over steps `from..`.
pub fn steady_state_rmse(estimates: &[Array1<f64>], truth: &[Array1<f64>], from: usize) -> Result<f64> {
    ensure_len("estimate sequence", estimates.len(), truth.len())?;
    if from >= truth.len() {
        return Err(Error::param(format!(
            "steady-state window starts at {from} but the sequence has {} steps",
            truth.len()
        )));
    }
    let errs = estimates[from..]
        .iter()
        .zip(&truth[from..])
        .map(|(e, t)| rmse(e, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Linear-Gaussian filter with isotropic process noise `q·I` and
/// observation noise `r·I`.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    obs: DMatrix<f64>,
    q: f64,
    r: f64,
}

impl KalmanFilter {
    pub fn new(observation: &Array2<f64>, process_var: f64, obs_var: f64, init_var: f64) -> Result<Self> {
        for (name, v) in [("process_var", process_var), ("obs_var", obs_var)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be finite and >= 0")));
            }
        }
        if !(init_var > 0.0 && init_var.is_finite()) {
            return Err(Error::param("init_var must be > 0"));
        }
        let k = observation.ncols();
        Ok(Self {
            mean: DVector::zeros(k),
            cov: DMatrix::identity(k, k) * init_var,
            obs: to_na(observation),
            q: process_var,
            r: obs_var,
        })
    }

    pub fn mean(&self) -> Array1<f64> {
        Array1::from(self.mean.as_slice().to_vec())
    }

    pub fn predict(&mut self, transition: &Array2<f64>) -> Result<()> {
        let k = self.mean.len();
        ensure_shape("transition", transition.dim(), (k, k))?;
        let a = to_na(transition);
        self.mean = &a * &self.mean;
        self.cov = &a * &self.cov * a.transpose();
        for i in 0..k {
            self.cov[(i, i)] += self.q;
        }
        Ok(())
    }

    pub fn update(&mut self, y: &Array1<f64>) -> Result<()> {
        ensure_len("observation", y.len(), self.obs.nrows())?;
        let y = DVector::from_column_slice(y.as_slice().expect("contiguous"));
        let ph = &self.cov * self.obs.transpose();
        let mut s = &self.obs * &ph;
        for i in 0..s.nrows() {
            s[(i, i)] += self.r;
        }
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numeric("innovation covariance is not positive definite".into()))?;
        // Gain K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ.
        let gain = chol.solve(&ph.transpose()).transpose();
        let innovation = y - &self.obs * &self.mean;
        self.mean += &gain * innovation;
        self.cov -= &gain * ph.transpose();
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        Ok(())
    }
}

/// Filtered means for a whole sequence; `transitions[0]` is unused.
pub fn kalman_baseline(
    observations: &[Array1<f64>],
    transitions: &[Array2<f64>],
    observation: &Array2<f64>,
    process_var: f64,
    obs_var: f64,
    init_var: f64,
) -> Result<Vec<Array1<f64>>> {
    ensure_len("transitions", transitions.len(), observations.len())?;
    let mut kf = KalmanFilter::new(observation, process_var, obs_var, init_var)?;
    let mut out = Vec::with_capacity(observations.len());
    for (t, y) in observations.iter().enumerate() {
        if t > 0 {
            kf.predict(&transitions[t])?;
        }
        kf.update(y)?;
        out.push(kf.mean());
    }
    Ok(out)
}

/// Per-frame lasso over the known dictionary, no temporal coupling.
pub fn sparse_coding_baseline(
    observations: &[Array1<f64>],
    dictionary: &Array2<f64>,
    gamma: f64,
    hyper: &HyperParams,
) -> Result<Vec<Array1<f64>>> {
    let hyper = HyperParams { lambda: 0.0, ..*hyper };
    hyper.validate()?;
    let k = dictionary.ncols();
    let solver = StateSolver::new(dictionary);
    let weights = GammaWeights::uniform(k, gamma);
    let zero = Array1::zeros(k);
    observations
        .iter()
        .map(|y| Ok(solver.infer(y.view(), zero.view(), &weights, &hyper, None)?.point))
        .collect()
}

/// Sequential state inference with the known transitions: each step is
/// pulled towards `A_t x̂_{t−1}` by the temporal term with weight
/// `hyper.lambda`. `transitions[0]` is unused.
pub fn dpcn_estimator(
    observations: &[Array1<f64>],
    transitions: &[Array2<f64>],
    dictionary: &Array2<f64>,
    gamma: f64,
    hyper: &HyperParams,
) -> Result<Vec<Array1<f64>>> {
    hyper.validate()?;
    ensure_len("transitions", transitions.len(), observations.len())?;
    let k = dictionary.ncols();
    let solver = StateSolver::new(dictionary);
    let weights = GammaWeights::uniform(k, gamma);
    let mut prev = Array1::zeros(k);
    let mut out = Vec::with_capacity(observations.len());
    for (t, y) in observations.iter().enumerate() {
        let prediction = if t == 0 {
            Array1::zeros(k)
        } else {
            ensure_shape("transition", transitions[t].dim(), (k, k))?;
            transitions[t].dot(&prev)
        };
        let x = solver.infer(y.view(), prediction.view(), &weights, hyper, None)?.point;
        prev = x.clone();
        out.push(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dpcn,
    SparseCoding,
    Kalman,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dpcn, Method::SparseCoding, Method::Kalman];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpcn => "dpcn",
            Method::SparseCoding => "sparse_coding",
            Method::Kalman => "kalman",
        }
    }
}

/// Benchmark grid over observation dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Simulation template; `obs_dim` and `seed` are set per run.
    pub sim: SimSpec,
    pub obs_dims: Vec<usize>,
    pub runs: usize,
    /// First step of the steady-state window.
    pub steady_from: usize,
    /// Sparsity weight of both sparse estimators.
    pub gamma: f64,
    /// Solver settings; `lambda` is the temporal weight of the dynamic estimator.
    pub hyper: HyperParams,
    /// Kalman process variances tried on calibration runs; the best is kept
    /// per observation dimension.
    pub kalman_grid: Vec<f64>,
    pub calibration_runs: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Record wall-clock seconds per row. Off keeps the output deterministic.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sim: SimSpec::default(),
            obs_dims: (3..=10).map(|i| i * 10).collect(),
            runs: 20,
            steady_from: 50,
            gamma: 0.05,
            hyper: HyperParams {
                lambda: 0.1,
                mu: 0.01,
                max_iters: 500,
                tol: 1e-7,
                ..Default::default()
            },
            kalman_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            calibration_runs: 2,
            methods: Method::ALL.to_vec(),
            seed: 0,
            timing: false,
        }
    }
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub obs_dim: usize,
    pub runs: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub seconds: Option<f64>,
    /// Steady-state error of each run, in run order.
    pub per_run: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

impl BenchResult {
    pub fn row(&self, method: Method, obs_dim: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method && r.obs_dim == obs_dim)
    }

    /// `method,P,runs,rmse_mean,rmse_std,seconds`; the seconds field is
    /// empty when timing was off.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,P,runs,rmse_mean,rmse_std,seconds\n");
        for r in &self.rows {
            let secs = r.seconds.map(|v| format!("{v:.3}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:.9e},{:.9e},{}\n",
                r.method.name(),
                r.obs_dim,
                r.runs,
                r.rmse_mean,
                r.rmse_std,
                secs
            ));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn run_method(method: Method, sim: &Simulation, cfg: &BenchConfig, kalman_q: f64) -> Result<Vec<Array1<f64>>> {
    let m = &sim.observation_matrix;
    match method {
        Method::Dpcn => dpcn_estimator(&sim.observations, &sim.transitions(), m, cfg.gamma, &cfg.hyper),
        Method::SparseCoding => sparse_coding_baseline(&sim.observations, m, cfg.gamma, &cfg.hyper),
        Method::Kalman => {
            let s = &cfg.sim;
            let (lo, hi) = s.amplitude_range;
            let prior_var = (lo * lo + lo * hi + hi * hi) / 3.0 * s.active as f64 / s.state_dim as f64;
            kalman_baseline(
                &sim.observations,
                &sim.transitions(),
                m,
                kalman_q,
                s.obs_noise_var.max(1e-12),
                prior_var,
            )
        }
    }
}

fn spec_for(cfg: &BenchConfig, obs_dim: usize, tag: &str, run: usize) -> SimSpec {
    SimSpec {
        obs_dim,
        seed: seed::derive_indexed(seed::derive(cfg.seed, tag), &format!("P{obs_dim}"), run as u64),
        ..cfg.sim.clone()
    }
}

/// Process variance with the lowest mean steady-state error on
/// calibration runs, which use seeds disjoint from the evaluation runs.
pub fn calibrate_kalman(cfg: &BenchConfig, obs_dim: usize) -> Result<f64> {
    let sims = (0..cfg.calibration_runs.max(1))
        .map(|r| simulate_sparse_dynamics(&spec_for(cfg, obs_dim, "kalman-calibration", r)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = (f64::INFINITY, f64::NAN);
    for &q in &cfg.kalman_grid {
        let mut total = 0.0;
        for sim in &sims {
            let est = run_method(Method::Kalman, sim, cfg, q)?;
            total += steady_state_rmse(&est, &sim.states, cfg.steady_from)?;
        }
        if total < best.0 {
            best = (total, q);
        }
    }
    if best.1.is_nan() {
        return Err(Error::param("kalman_grid is empty"));
    }
    Ok(best.1)
}

/// Steady-state error of every method at every observation dimension,
/// averaged over independent runs. Runs at one dimension share nothing but
/// the master seed, and every method sees the same simulated runs.
pub fn benchmark_state_estimation(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.obs_dims.is_empty() || cfg.runs == 0 || cfg.methods.is_empty() {
        return Err(Error::param("benchmark grid, runs and methods must be non-empty"));
    }
    cfg.hyper.validate()?;
    let mut rows = Vec::new();
    for &p in &cfg.obs_dims {
        let q = if cfg.methods.contains(&Method::Kalman) {
            calibrate_kalman(cfg, p)?
        } else {
            0.0
        };
        let sims = (0..cfg.runs)
            .into_par_iter()
            .map(|r| simulate_sparse_dynamics(&spec_for(cfg, p, "benchmark", r)))
            .collect::<Result<Vec<_>>>()?;
        for &method in &cfg.methods {
            let start = Instant::now();
            let per_run = sims
                .par_iter()
                .map(|sim| steady_state_rmse(&run_method(method, sim, cfg, q)?, &sim.states, cfg.steady_from))
                .collect::<Result<Vec<_>>>()?;
            let seconds = cfg.timing.then(|| start.elapsed().as_secs_f64());
            let (mean, std) = mean_std(&per_run);
            rows.push(BenchRow {
                method,
                obs_dim: p,
                runs: cfg.runs,
                rmse_mean: mean,
                rmse_std: std,
                seconds,
                per_run,
            });
        }
    }
    Ok(BenchResult { rows })
}

/// One-sided paired t-test of `mean(a − b) > 0`: returns the t statistic
/// and its p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    ensure_len("paired samples", b.len(), a.len())?;
    if a.len() < 2 {
        return Err(Error::param("paired test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    let n = d.len() as f64;
    if sd == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        return Ok((mean.signum() * f64::INFINITY, p));
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

/// Result of [`cluster_separability`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separability {
    pub accuracy: f64,
    /// Set when the points carry no structure to cluster (all identical);
    /// the accuracy is then chance level.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd iterations from a k-means++ seeding. Returns assignments and
/// inertia.
fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&i, &j| sq_dist(p, &centers[i]).total_cmp(&sq_dist(p, &centers[j])))
                .expect("k >= 1");
            changed |= *a != best;
            *a = best;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
    (assign, inertia)
}

/// Fraction of points whose cluster maps to their label under the best
/// one-to-one matching of clusters to labels.
pub fn matched_accuracy(assign: &[usize], labels: &[u32]) -> Result<f64> {
    ensure_len("assignments", assign.len(), labels.len())?;
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len().max(assign.iter().max().map_or(0, |m| m + 1));
    let mut counts = vec![vec![0i64; k]; k];
    for (&a, l) in assign.iter().zip(labels) {
        let c = classes.binary_search(l).expect("label present");
        counts[a][c] += 1;
    }
    let weights = Matrix::from_rows(counts).map_err(|e| Error::Numeric(e.to_string()))?;
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / labels.len() as f64)
}

/// k-means (k = number of distinct labels, 10 seeded k-means++ restarts,
/// lowest inertia kept) on the rows of `causes`, scored by the best
/// cluster-to-label matching.
pub fn cluster_separability(causes: &Array2<f64>, labels: &[u32], seed: u64) -> Result<Separability> {
    ensure_len("labels", labels.len(), causes.nrows())?;
    if causes.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite cause values".into()));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    if k < 2 {
        return Err(Error::param("cluster separability needs at least two classes"));
    }
    let points: Vec<Vec<f64>> = causes.rows().into_iter().map(|r| r.to_vec()).collect();
    if points.iter().all(|p| p == &points[0]) {
        return Ok(Separability {
            accuracy: 1.0 / k as f64,
            degenerate: true,
        });
    }
    let mut rng = seed::rng(seed::derive(seed, "kmeans"));
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..10 {
        let (assign, inertia) = kmeans_once(&points, k, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("ten restarts");
    Ok(Separability {
        accuracy: matched_accuracy(&assign, labels)?,
        degenerate: false,
    })
}
