//! Accelerated proximal gradient (FISTA) for `g(x) + Σ_i w_i |x_i|` with a
//! smooth convex `g`, backtracking line search on the Lipschitz estimate, and
//! optional momentum restart.
//!
//! The solver is driven one step at a time through [`fista_step`] so that
//! callers can interleave steps on several variables (as joint inference
//! does) while every variable keeps its own momentum and step size.

use ndarray::{Array1, ArrayView1, Zip};

use crate::error::{Error, Result};

/// Maximum number of line-search backtracks in one step.
pub const MAX_BACKTRACKS: usize = 64;

/// Smooth part of a composite objective.
pub trait SmoothObjective {
    fn value(&self, x: ArrayView1<f64>) -> f64;
    fn gradient(&self, x: ArrayView1<f64>) -> Array1<f64>;
}

/// A [`SmoothObjective`] backed by two closures.
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> SmoothObjective for FnObjective<V, G>
where
    V: Fn(ArrayView1<f64>) -> f64,
    G: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    fn value(&self, x: ArrayView1<f64>) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (self.gradient)(x)
    }
}

/// Weights of the ℓ1 term.
#[derive(Debug, Clone, Copy)]
pub enum L1Weights<'a> {
    Uniform(f64),
    PerComponent(ArrayView1<'a, f64>),
}

impl L1Weights<'_> {
    fn validate(&self, len: usize) -> Result<()> {
        match self {
            L1Weights::Uniform(w) if !(*w >= 0.0 && w.is_finite()) => {
                Err(Error::param(format!("l1 weight must be finite and >= 0, got {w}")))
            }
            L1Weights::PerComponent(w) if w.len() != len => Err(Error::dim(format!(
                "l1 weights: length {}, expected {len}",
                w.len()
            ))),
            L1Weights::PerComponent(w) if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) => {
                Err(Error::param("l1 weights must be finite and >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// `Σ_i w_i |x_i|`.
    pub fn penalty(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            L1Weights::Uniform(w) => w * x.iter().map(|v| v.abs()).sum::<f64>(),
            L1Weights::PerComponent(w) => Zip::from(w).and(&x).fold(0.0, |a, &wi, &xi| a + wi * xi.abs()),
        }
    }

    /// `prox_{w/L}(v)`: componentwise soft threshold at `w_i / L`.
    fn prox(&self, v: &Array1<f64>, lipschitz: f64) -> Array1<f64> {
        match self {
            L1Weights::Uniform(w) => {
                let t = w / lipschitz;
                v.mapv(|x| shrink(x, t))
            }
            L1Weights::PerComponent(w) => {
                Zip::from(v).and(w).map_collect(|&x, &wi| shrink(x, wi / lipschitz))
            }
        }
    }
}

#[inline]
fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `sign(v_i) · max(|v_i| − t, 0)`.
pub fn soft_threshold(v: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    if !(t >= 0.0) {
        return Err(Error::param(format!("threshold must be >= 0, got {t}")));
    }
    Ok(v.mapv(|x| shrink(x, t)))
}

/// Momentum schedule `(1 + √(4τ² + 1)) / 2`.
pub fn tau_next(tau: f64) -> f64 {
    (1.0 + (4.0 * tau * tau + 1.0).sqrt()) / 2.0
}

/// Iterate, auxiliary (momentum) point, momentum scalar and Lipschitz
/// estimate of one FISTA run.
#[derive(Debug, Clone, PartialEq)]
pub struct FistaState {
    pub point: Array1<f64>,
    pub momentum_point: Array1<f64>,
    pub tau: f64,
    pub lipschitz: f64,
}

impl FistaState {
    pub fn new(start: Array1<f64>, lipschitz: f64) -> Result<Self> {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::param(format!("initial Lipschitz estimate must be > 0, got {lipschitz}")));
        }
        if start.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite starting point".into()));
        }
        Ok(Self {
            momentum_point: start.clone(),
            point: start,
            tau: 1.0,
            lipschitz,
        })
    }
}

/// Outcome of one [`fista_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// `‖Δx‖₂ / max(1, ‖x‖₂)` of the accepted step; `None` when the step
    /// was rejected by the restart rule.
    pub rel_change: Option<f64>,
    /// Composite objective at the iterate after this step.
    pub objective: f64,
    pub backtracks: usize,
}

/// One accelerated proximal-gradient step, updating `state` in place.
///
/// Backtracking multiplies the Lipschitz estimate by `eta` until the
/// quadratic upper bound holds at the prox point; the estimate is kept for
/// the next call. With `restart`, a step that increases the composite
/// objective is discarded and the momentum reset (`τ = 1`, momentum point =
/// current iterate), so the objective never increases.
pub fn fista_step(
    state: &mut FistaState,
    objective: &impl SmoothObjective,
    weights: L1Weights<'_>,
    eta: f64,
    restart: bool,
) -> Result<StepReport> {
    if !(eta > 1.0 && eta.is_finite()) {
        return Err(Error::param(format!("eta must be > 1, got {eta}")));
    }
    weights.validate(state.point.len())?;

    let z = &state.momentum_point;
    let grad = objective.gradient(z.view());
    if grad.len() != z.len() {
        return Err(Error::dim(format!(
            "gradient length {}, expected {}",
            grad.len(),
            z.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let fz = objective.value(z.view());
    if !fz.is_finite() {
        return Err(Error::Numeric("non-finite objective value".into()));
    }

    let mut lipschitz = state.lipschitz;
    let mut backtracks = 0;
    let (candidate, f_candidate) = loop {
        let step = z - &(&grad / lipschitz);
        let p = weights.prox(&step, lipschitz);
        let diff = &p - z;
        let fp = objective.value(p.view());
        let bound = fz + grad.dot(&diff) + 0.5 * lipschitz * diff.dot(&diff);
        // Relative slack absorbs rounding in the comparison.
        if fp.is_finite() && fp <= bound + 1e-12 * (1.0 + fz.abs()) {
            break (p, fp);
        }
        if backtracks == MAX_BACKTRACKS {
            return Err(Error::Divergence {
                backtracks,
                lipschitz,
            });
        }
        lipschitz *= eta;
        backtracks += 1;
    };
    state.lipschitz = lipschitz;

    let obj_candidate = f_candidate + weights.penalty(candidate.view());
    if restart {
        let obj_current = objective.value(state.point.view()) + weights.penalty(state.point.view());
        if obj_candidate > obj_current {
            state.tau = 1.0;
            state.momentum_point.assign(&state.point);
            return Ok(StepReport {
                rel_change: None,
                objective: obj_current,
                backtracks,
            });
        }
    }

    let delta = &candidate - &state.point;
    let rel_change = delta.dot(&delta).sqrt() / candidate.dot(&candidate).sqrt().max(1.0);
    let tau1 = tau_next(state.tau);
    let beta = (state.tau - 1.0) / tau1;
    state.momentum_point = &candidate + &(&delta * beta);
    state.point = candidate;
    state.tau = tau1;
    Ok(StepReport {
        rel_change: Some(rel_change),
        objective: obj_candidate,
        backtracks,
    })
}

/// Controls for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub lipschitz0: f64,
    pub eta: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub restart: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lipschitz0: 1.0,
            eta: 1.5,
            max_iters: 500,
            tol: 1e-6,
            restart: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub point: Array1<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lipschitz: f64,
}

/// Runs [`fista_step`] until the relative change falls below `tol` or the
/// iteration cap is hit.
pub fn minimize(
    objective: &impl SmoothObjective,
    weights: L1Weights<'_>,
    start: Array1<f64>,
    opts: &SolverOptions,
) -> Result<Solution> {
    let mut state = FistaState::new(start, opts.lipschitz0)?;
    let mut last = StepReport {
        rel_change: None,
        objective: f64::NAN,
        backtracks: 0,
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        last = fista_step(&mut state, objective, weights, opts.eta, opts.restart)?;
        iterations += 1;
        if matches!(last.rel_change, Some(c) if c < opts.tol) {
            converged = true;
            break;
        }
    }
    let objective_value = if last.objective.is_nan() {
        objective.value(state.point.view()) + weights.penalty(state.point.view())
    } else {
        last.objective
    };
    Ok(Solution {
        point: state.point,
        objective: objective_value,
        iterations,
        converged,
        lipschitz: state.lipschitz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// `½‖x − target‖²` scaled by `curvature`.
    fn quadratic(target: Array1<f64>, curvature: f64) -> impl SmoothObjective {
        let t2 = target.clone();
        FnObjective {
            value: move |x: ArrayView1<f64>| {
                let d = &x - &target;
                0.5 * curvature * d.dot(&d)
            },
            gradient: move |x: ArrayView1<f64>| (&x - &t2) * curvature,
        }
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(array![1.5, -0.2].view(), 0.5).unwrap(), array![1.0, 0.0]);
        let v = array![0.3, -4.0, 0.0];
        assert_eq!(soft_threshold(v.view(), 0.0).unwrap(), v);
        assert_eq!(soft_threshold(array![-2.0].view(), 3.0).unwrap(), array![0.0]);
        assert!(matches!(soft_threshold(v.view(), -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn tau_schedule() {
        assert!((tau_next(1.0) - 1.618_033_988_749_895).abs() < 1e-12);
        // τ_{+} = τ + 1/2 + O(1/τ).
        assert!((tau_next(1000.0) - 1000.5).abs() < 1e-3);
        let mut t = 1.0;
        for _ in 0..1000 {
            let n = tau_next(t);
            assert!(n > t);
            t = n;
        }
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        let f = quadratic(array![3.0], 1.0);
        let mut s = FistaState::new(array![0.0], 1.0).unwrap();
        let mut steps = 0;
        while (s.point[0] - 3.0).abs() > 1e-8 {
            fista_step(&mut s, &f, L1Weights::Uniform(0.0), 1.5, true).unwrap();
            steps += 1;
            assert!(steps <= 100);
        }
    }

    #[test]
    fn scalar_lasso_solutions() {
        let opts = SolverOptions::default();
        let f = quadratic(array![1.0], 1.0);
        let sol = minimize(&f, L1Weights::Uniform(0.4), array![0.0], &opts).unwrap();
        assert!((sol.point[0] - 0.6).abs() < 1e-6);
        let sol = minimize(&f, L1Weights::Uniform(2.0), array![5.0], &opts).unwrap();
        assert!(sol.point[0].abs() < 1e-9);
    }

    #[test]
    fn per_component_weights() {
        let f = quadratic(array![1.0, -1.0, 0.5], 1.0);
        let w = array![0.4, 0.1, 0.6];
        let sol = minimize(&f, L1Weights::PerComponent(w.view()), Array1::zeros(3), &SolverOptions::default()).unwrap();
        let want = array![0.6, -0.9, 0.0];
        assert!((&sol.point - &want).iter().all(|d| d.abs() < 1e-6));
        let bad = array![1.0];
        assert!(minimize(&f, L1Weights::PerComponent(bad.view()), Array1::zeros(3), &SolverOptions::default()).is_err());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let f = FnObjective {
            value: |_: ArrayView1<f64>| 0.0,
            gradient: |x: ArrayView1<f64>| x.mapv(|_| f64::NAN),
        };
        let mut s = FistaState::new(array![1.0], 1.0).unwrap();
        assert!(matches!(
            fista_step(&mut s, &f, L1Weights::Uniform(0.0), 1.5, true),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn unbounded_curvature_diverges() {
        // The upper bound can never hold for a concave objective with a
        // nonzero step.
        let f = FnObjective {
            value: |x: ArrayView1<f64>| -1e300 * x.dot(&x),
            gradient: |x: ArrayView1<f64>| x.mapv(|v| -2e300 * v) + 1.0,
        };
        let mut s = FistaState::new(array![1.0], 1.0).unwrap();
        match fista_step(&mut s, &f, L1Weights::Uniform(0.0), 1.5, false) {
            Err(Error::Divergence { backtracks, .. }) => assert_eq!(backtracks, MAX_BACKTRACKS),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn lipschitz_bounded_by_backtracking_cap() {
        let f = quadratic(array![2.0, -1.0], 50.0);
        let mut s = FistaState::new(array![0.0, 0.0], 1.0).unwrap();
        for _ in 0..50 {
            fista_step(&mut s, &f, L1Weights::Uniform(0.1), 1.5, true).unwrap();
            assert!(s.lipschitz <= 1.5f64.powi(64));
            assert!(s.tau >= 1.0 && s.lipschitz > 0.0);
        }
    }

    /// Orthonormal design: minimizer is the soft threshold of `Qᵀb`.
    fn orthonormal(n: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let m = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let q = m.qr().q();
        Array2::from_shape_fn((n, n), |(i, j)| q[(i, j)])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn orthonormal_lasso_matches_closed_form(seed in 0u64..1000, w in 0.0f64..1.0) {
            let n = 6;
            let q = orthonormal(n, seed);
            let mut rng = crate::seed::rng(seed ^ 0xabc);
            use rand::Rng;
            let b = Array1::from_shape_fn(n, |_| rng.random::<f64>() * 4.0 - 2.0);
            let want = soft_threshold(q.t().dot(&b).view(), w).unwrap();
            let (q1, b1) = (q.clone(), b.clone());
            let f = FnObjective {
                value: move |x: ArrayView1<f64>| { let r = q.dot(&x) - &b; 0.5 * r.dot(&r) },
                gradient: move |x: ArrayView1<f64>| q1.t().dot(&(q1.dot(&x) - &b1)),
            };
            let opts = SolverOptions { max_iters: 500, tol: 1e-12, ..Default::default() };
            let sol = minimize(&f, L1Weights::Uniform(w), Array1::zeros(n), &opts).unwrap();
            prop_assert!(sol.iterations <= 500);
            prop_assert!((&sol.point - &want).iter().all(|d| d.abs() < 1e-6));
        }

        #[test]
        fn restart_keeps_objective_below_start(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let n = 5;
            let a = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
            let b = Array1::from_shape_fn(n, |_| rng.random::<f64>() * 2.0 - 1.0);
            let x0 = Array1::from_shape_fn(n, |_| rng.random::<f64>() * 2.0 - 1.0);
            let (a1, b1) = (a.clone(), b.clone());
            let f = FnObjective {
                value: move |x: ArrayView1<f64>| { let r = a.dot(&x) - &b; 0.5 * r.dot(&r) },
                gradient: move |x: ArrayView1<f64>| a1.t().dot(&(a1.dot(&x) - &b1)),
            };
            let w = L1Weights::Uniform(0.05);
            let start = f.value(x0.view()) + w.penalty(x0.view());
            let mut s = FistaState::new(x0, 0.1).unwrap();
            let mut prev = start;
            for _ in 0..100 {
                let r = fista_step(&mut s, &f, w, 1.5, true).unwrap();
                prop_assert!(r.objective <= start + 1e-12);
                prop_assert!(r.objective <= prev + 1e-12);
                prev = r.objective;
            }
        }
    }
}
