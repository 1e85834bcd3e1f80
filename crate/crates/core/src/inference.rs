//! Energy functions of a single layer and their minimizers.
//!
//! For a group of inputs `y^(n)` the layer energy is
//!
//! ```text
//! E = Σ_n ½‖y^(n) − C x^(n)‖² + λ‖x^(n) − A x_prev^(n)‖₁ + Σ_k γ_k |x_k^(n)|
//!     + β‖u‖₁ [+ ½‖u − û‖²]
//! γ_k = γ0 (1 + exp(−[B u]_k)) / 2
//! ```
//!
//! States are inferred with the temporal term replaced by its Nesterov
//! smoothing (see [`crate::smoothing`]); causes are inferred from the pooled
//! states `s_k = Σ_n |x_k^(n)|`. Joint inference alternates one FISTA step on
//! every state vector with one step on the causes.

use ndarray::{Array1, Array2, ArrayView1, Zip};

use crate::error::{ensure_len, ensure_shape, Error, Result};
use crate::model::{HyperParams, LayerParams, LayerState};
use crate::smoothing::{alpha_star_unchecked, smoothed_l1_unchecked};
use crate::solver::{fista_step, minimize, FistaState, L1Weights, SmoothObjective, Solution, SolverOptions};

/// Per-state sparsity weights `γ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaWeights(pub Array1<f64>);

impl GammaWeights {
    pub fn uniform(len: usize, gamma: f64) -> Self {
        Self(Array1::from_elem(len, gamma))
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

/// Top-down predictions for one layer: predicted states and the causes of
/// the layer below they imply (`u_hat = C x_hat`).
#[derive(Debug, Clone, PartialEq)]
pub struct TopDownPrediction {
    pub u_hat: Array1<f64>,
    pub x_hat: Array1<f64>,
}

/// `γ_k = γ0 (1 + exp(−[Bu]_k)) / 2`.
pub fn gamma_from_causes(u: ArrayView1<f64>, invariance: &Array2<f64>, gamma0: f64) -> Result<GammaWeights> {
    ensure_len("causes", u.len(), invariance.ncols())?;
    Ok(gamma_unchecked(u, invariance, gamma0))
}

fn gamma_unchecked(u: ArrayView1<f64>, invariance: &Array2<f64>, gamma0: f64) -> GammaWeights {
    GammaWeights(invariance.dot(&u).mapv(|bu| gamma0 * (1.0 + (-bu).exp()) / 2.0))
}

fn check_state_shapes(
    y: ArrayView1<f64>,
    x: ArrayView1<f64>,
    x_prev: ArrayView1<f64>,
    dictionary: &Array2<f64>,
    transition: &Array2<f64>,
) -> Result<()> {
    let (p, k) = dictionary.dim();
    ensure_len("input", y.len(), p)?;
    ensure_len("state", x.len(), k)?;
    ensure_len("previous state", x_prev.len(), k)?;
    ensure_shape("transition", transition.dim(), (k, k))
}

/// Exact (unsmoothed) state energy
/// `½‖y − Cx‖² + λ‖x − A x_prev‖₁ + Σ_k γ_k |x_k|`.
#[allow(clippy::too_many_arguments)]
pub fn state_energy(
    y: ArrayView1<f64>,
    x: ArrayView1<f64>,
    x_prev: ArrayView1<f64>,
    gamma: &GammaWeights,
    dictionary: &Array2<f64>,
    transition: &Array2<f64>,
    lambda: f64,
) -> Result<f64> {
    check_state_shapes(y, x, x_prev, dictionary, transition)?;
    ensure_len("gamma", gamma.0.len(), x.len())?;
    let r = &y - &dictionary.dot(&x);
    let e = &x - &transition.dot(&x_prev);
    let temporal: f64 = e.iter().map(|v| v.abs()).sum();
    let sparsity = L1Weights::PerComponent(gamma.view()).penalty(x);
    Ok(0.5 * r.dot(&r) + lambda * temporal + sparsity)
}

/// Gradient of `h(x) = ½‖y − Cx‖² + λ f_μ(x − A x_prev)`:
/// `Cᵀ(Cx − y) + λ α*(x − A x_prev)`.
#[allow(clippy::too_many_arguments)]
pub fn state_smooth_gradient(
    y: ArrayView1<f64>,
    x: ArrayView1<f64>,
    x_prev: ArrayView1<f64>,
    dictionary: &Array2<f64>,
    transition: &Array2<f64>,
    lambda: f64,
    mu: f64,
) -> Result<Array1<f64>> {
    check_state_shapes(y, x, x_prev, dictionary, transition)?;
    if !(mu > 0.0) {
        return Err(Error::param(format!("mu must be > 0, got {mu}")));
    }
    let r = dictionary.dot(&x) - y;
    let e = &x - &transition.dot(&x_prev);
    Ok(dictionary.t().dot(&r) + alpha_star_unchecked(e.view(), mu) * lambda)
}

/// Value of the smooth part `h(x)`.
pub fn state_smooth_value(
    y: ArrayView1<f64>,
    x: ArrayView1<f64>,
    x_prev: ArrayView1<f64>,
    dictionary: &Array2<f64>,
    transition: &Array2<f64>,
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    check_state_shapes(y, x, x_prev, dictionary, transition)?;
    let r = &y - &dictionary.dot(&x);
    let e = &x - &transition.dot(&x_prev);
    Ok(0.5 * r.dot(&r) + lambda * smoothed_l1_unchecked(e.view(), mu))
}

/// Smooth part of the state subproblem in Gram form:
/// `½xᵀGx − xᵀCᵀy + ½‖y‖² + λ f_μ(x − prediction)`.
pub(crate) struct StateObjective<'a> {
    gram: &'a Array2<f64>,
    target: Array1<f64>,
    y_sq: f64,
    prediction: ArrayView1<'a, f64>,
    lambda: f64,
    mu: f64,
}

impl SmoothObjective for StateObjective<'_> {
    fn value(&self, x: ArrayView1<f64>) -> f64 {
        let gx = self.gram.dot(&x);
        let data = 0.5 * x.dot(&gx) - x.dot(&self.target) + 0.5 * self.y_sq;
        let temporal = if self.lambda == 0.0 {
            0.0
        } else {
            smoothed_l1_unchecked((&x - &self.prediction).view(), self.mu)
        };
        data + self.lambda * temporal
    }

    fn gradient(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut g = self.gram.dot(&x) - &self.target;
        if self.lambda != 0.0 {
            let mu = self.mu;
            let lambda = self.lambda;
            Zip::from(&mut g)
                .and(&x)
                .and(&self.prediction)
                .for_each(|gi, &xi, &pi| {
                    let a = ((xi - pi) / mu).clamp(-1.0, 1.0);
                    *gi += lambda * a;
                });
        }
        g
    }
}

/// Dictionary with its cached Gram matrix `CᵀC`, for repeated state
/// inference against a fixed dictionary.
#[derive(Debug, Clone)]
pub struct StateSolver {
    dictionary: Array2<f64>,
    gram: Array2<f64>,
}

impl StateSolver {
    pub fn new(dictionary: &Array2<f64>) -> Self {
        Self {
            gram: dictionary.t().dot(dictionary),
            dictionary: dictionary.clone(),
        }
    }

    pub fn dictionary(&self) -> &Array2<f64> {
        &self.dictionary
    }

    pub(crate) fn objective<'a>(
        &'a self,
        y: ArrayView1<f64>,
        prediction: ArrayView1<'a, f64>,
        lambda: f64,
        mu: f64,
    ) -> StateObjective<'a> {
        StateObjective {
            gram: &self.gram,
            target: self.dictionary.t().dot(&y),
            y_sq: y.dot(&y),
            prediction,
            lambda,
            mu,
        }
    }

    /// Minimizes the smoothed state energy for fixed `γ`, given the temporal
    /// prediction `A x_prev`.
    pub fn infer(
        &self,
        y: ArrayView1<f64>,
        prediction: ArrayView1<f64>,
        gamma: &GammaWeights,
        hyper: &HyperParams,
        start: Option<Array1<f64>>,
    ) -> Result<Solution> {
        let k = self.dictionary.ncols();
        ensure_len("input", y.len(), self.dictionary.nrows())?;
        ensure_len("prediction", prediction.len(), k)?;
        ensure_len("gamma", gamma.0.len(), k)?;
        let objective = self.objective(y, prediction, hyper.lambda, hyper.mu);
        let opts = SolverOptions {
            lipschitz0: hyper.lipschitz_x,
            eta: hyper.eta,
            max_iters: hyper.max_iters,
            tol: hyper.tol,
            restart: hyper.restart,
        };
        let start = start.unwrap_or_else(|| Array1::zeros(k));
        ensure_len("start", start.len(), k)?;
        minimize(&objective, L1Weights::PerComponent(gamma.view()), start, &opts)
    }
}

/// Sparse states for fixed `γ`, starting from zero.
pub fn infer_states(
    y: ArrayView1<f64>,
    x_prev: ArrayView1<f64>,
    gamma: &GammaWeights,
    dictionary: &Array2<f64>,
    transition: &Array2<f64>,
    hyper: &HyperParams,
) -> Result<Array1<f64>> {
    hyper.validate()?;
    let k = dictionary.ncols();
    ensure_len("previous state", x_prev.len(), k)?;
    ensure_shape("transition", transition.dim(), (k, k))?;
    let prediction = transition.dot(&x_prev);
    let solver = StateSolver::new(dictionary);
    Ok(solver.infer(y, prediction.view(), gamma, hyper, None)?.point)
}

/// Sum pooling `s_k = Σ_n |x_k^(n)|`.
pub fn pool_states(group: &[Array1<f64>]) -> Result<Array1<f64>> {
    let first = group
        .first()
        .ok_or_else(|| Error::dim("cannot pool an empty state group"))?;
    let mut s = Array1::zeros(first.len());
    for x in group {
        ensure_len("group member", x.len(), first.len())?;
        Zip::from(&mut s).and(x).for_each(|si, &xi| *si += xi.abs());
    }
    Ok(s)
}

/// Smooth part of the cause subproblem,
/// `Σ_k γ0 (1 + exp(−[Bu]_k))/2 · s_k [+ ½‖u − û‖²]`.
pub(crate) struct CauseObjective<'a> {
    invariance: &'a Array2<f64>,
    pooled: ArrayView1<'a, f64>,
    gamma0: f64,
    u_hat: Option<ArrayView1<'a, f64>>,
}

impl CauseObjective<'_> {
    fn value_grad(&self, u: ArrayView1<f64>, want_grad: bool) -> (f64, Option<Array1<f64>>) {
        let decay = self.invariance.dot(&u).mapv(|bu| (-bu).exp());
        let mut value = Zip::from(&decay)
            .and(&self.pooled)
            .fold(0.0, |acc, &d, &s| acc + self.gamma0 * (1.0 + d) / 2.0 * s);
        let mut grad = want_grad.then(|| {
            let weighted = &decay * &self.pooled;
            self.invariance.t().dot(&weighted) * (-self.gamma0 / 2.0)
        });
        if let Some(u_hat) = self.u_hat {
            let diff = &u - &u_hat;
            value += 0.5 * diff.dot(&diff);
            if let Some(g) = grad.as_mut() {
                *g += &diff;
            }
        }
        (value, grad)
    }
}

impl SmoothObjective for CauseObjective<'_> {
    fn value(&self, u: ArrayView1<f64>) -> f64 {
        self.value_grad(u, false).0
    }

    fn gradient(&self, u: ArrayView1<f64>) -> Array1<f64> {
        self.value_grad(u, true).1.expect("gradient requested")
    }
}

fn check_cause_shapes(
    u: ArrayView1<f64>,
    pooled: ArrayView1<f64>,
    invariance: &Array2<f64>,
    u_hat: Option<ArrayView1<f64>>,
) -> Result<()> {
    let (k, d) = invariance.dim();
    ensure_len("causes", u.len(), d)?;
    ensure_len("pooled states", pooled.len(), k)?;
    if let Some(h) = u_hat {
        ensure_len("predicted causes", h.len(), d)?;
    }
    Ok(())
}

/// Value and gradient of the smooth cause objective. The gradient is
/// `−(γ0/2) Bᵀ(exp(−Bu) ⊙ s) [+ (u − û)]`.
pub fn cause_smooth_value_grad(
    u: ArrayView1<f64>,
    pooled: ArrayView1<f64>,
    invariance: &Array2<f64>,
    gamma0: f64,
    u_hat: Option<ArrayView1<f64>>,
) -> Result<(f64, Array1<f64>)> {
    check_cause_shapes(u, pooled, invariance, u_hat)?;
    let obj = CauseObjective {
        invariance,
        pooled,
        gamma0,
        u_hat,
    };
    let (v, g) = obj.value_grad(u, true);
    Ok((v, g.expect("gradient requested")))
}

/// Causes minimizing the smooth cause objective plus `β‖u‖₁`, starting
/// from zero.
pub fn infer_causes(
    pooled: ArrayView1<f64>,
    invariance: &Array2<f64>,
    hyper: &HyperParams,
    u_hat: Option<ArrayView1<f64>>,
) -> Result<Array1<f64>> {
    hyper.validate()?;
    let d = invariance.ncols();
    let zero = Array1::zeros(d);
    check_cause_shapes(zero.view(), pooled, invariance, u_hat)?;
    if pooled.iter().any(|&s| s < 0.0) {
        return Err(Error::param("pooled states must be non-negative"));
    }
    let obj = CauseObjective {
        invariance,
        pooled,
        gamma0: hyper.gamma0,
        u_hat,
    };
    let opts = SolverOptions {
        lipschitz0: hyper.lipschitz_u,
        eta: hyper.eta,
        max_iters: hyper.max_iters,
        tol: hyper.tol,
        restart: hyper.restart,
    };
    Ok(minimize(&obj, L1Weights::Uniform(hyper.beta), zero, &opts)?.point)
}

/// Result of [`JointSolver::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub state: LayerState,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternating state/cause inference for one layer with a cached Gram
/// matrix. Each outer iteration recomputes `γ` from the current causes,
/// takes one FISTA step on every group member's states, pools, and takes one
/// FISTA step on the causes. Step sizes and momentum persist per variable.
#[derive(Debug, Clone)]
pub struct JointSolver<'a> {
    params: &'a LayerParams,
    hyper: HyperParams,
    states: StateSolver,
    layer: usize,
}

impl<'a> JointSolver<'a> {
    pub fn new(params: &'a LayerParams, hyper: &HyperParams) -> Result<Self> {
        params.validate()?;
        hyper.validate()?;
        Ok(Self {
            params,
            hyper: *hyper,
            states: StateSolver::new(&params.dictionary),
            layer: 0,
        })
    }

    /// Layer index reported in inference errors.
    pub fn with_layer_index(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn params(&self) -> &LayerParams {
        self.params
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn infer(
        &self,
        inputs: &[Array1<f64>],
        prev_states: &[Array1<f64>],
        u_hat: Option<ArrayView1<f64>>,
    ) -> Result<JointOutcome> {
        let dims = self.params.dims;
        ensure_len("input group", inputs.len(), dims.group)?;
        ensure_len("previous state group", prev_states.len(), dims.group)?;
        for (y, xp) in inputs.iter().zip(prev_states) {
            ensure_len("input", y.len(), dims.input)?;
            ensure_len("previous state", xp.len(), dims.state)?;
        }
        if let Some(h) = u_hat {
            ensure_len("predicted causes", h.len(), dims.causes)?;
        }
        let h = &self.hyper;
        let tag = |group: usize| {
            let layer = self.layer;
            move |e: Error| Error::Inference {
                layer,
                group,
                source: Box::new(e),
            }
        };

        let predictions: Vec<Array1<f64>> = prev_states
            .iter()
            .map(|xp| self.params.transition.dot(xp))
            .collect();
        let objectives: Vec<StateObjective<'_>> = inputs
            .iter()
            .zip(&predictions)
            .map(|(y, pred)| self.states.objective(y.view(), pred.view(), h.lambda, h.mu))
            .collect();

        let mut xs: Vec<FistaState> = (0..dims.group)
            .map(|_| FistaState::new(Array1::zeros(dims.state), h.lipschitz_x))
            .collect::<Result<_>>()?;
        let mut us = FistaState::new(Array1::zeros(dims.causes), h.lipschitz_u)?;

        let mut iterations = 0;
        let mut converged = false;
        while iterations < h.max_iters {
            iterations += 1;
            let gamma = gamma_unchecked(us.point.view(), &self.params.invariance, h.gamma0);
            let mut change_sq = 0.0;
            let mut norm_sq = 0.0;
            let mut rejected = false;
            for (n, (state, obj)) in xs.iter_mut().zip(&objectives).enumerate() {
                let before = state.point.clone();
                let r = fista_step(state, obj, L1Weights::PerComponent(gamma.view()), h.eta, h.restart)
                    .map_err(tag(n))?;
                rejected |= r.rel_change.is_none();
                let d = &state.point - &before;
                change_sq += d.dot(&d);
                norm_sq += state.point.dot(&state.point);
            }

            let points: Vec<Array1<f64>> = xs.iter().map(|s| s.point.clone()).collect();
            let pooled = pool_states(&points)?;
            let cause_obj = CauseObjective {
                invariance: &self.params.invariance,
                pooled: pooled.view(),
                gamma0: h.gamma0,
                u_hat,
            };
            let before = us.point.clone();
            let r = fista_step(&mut us, &cause_obj, L1Weights::Uniform(h.beta), h.eta, h.restart)
                .map_err(tag(dims.group))?;
            rejected |= r.rel_change.is_none();
            let d = &us.point - &before;
            change_sq += d.dot(&d);
            norm_sq += us.point.dot(&us.point);

            if !rejected && change_sq.sqrt() / norm_sq.sqrt().max(1.0) < h.tol {
                converged = true;
                break;
            }
        }

        Ok(JointOutcome {
            state: LayerState {
                states: xs.into_iter().map(|s| s.point).collect(),
                causes: us.point,
                prev_states: prev_states.to_vec(),
            },
            iterations,
            converged,
        })
    }
}

/// Joint inference of a group's states and causes.
pub fn joint_infer(
    inputs: &[Array1<f64>],
    prev_states: &[Array1<f64>],
    params: &LayerParams,
    hyper: &HyperParams,
    u_hat: Option<ArrayView1<f64>>,
) -> Result<LayerState> {
    Ok(JointSolver::new(params, hyper)?
        .infer(inputs, prev_states, u_hat)?
        .state)
}

/// Exact layer energy of a group at `state`, optionally including the
/// top-down term `½‖u − û‖²`.
pub fn unified_energy(
    inputs: &[Array1<f64>],
    state: &LayerState,
    params: &LayerParams,
    hyper: &HyperParams,
    u_hat: Option<ArrayView1<f64>>,
) -> Result<f64> {
    layer_energy(inputs, state, params, hyper, u_hat, None)
}

/// As [`unified_energy`] with the temporal term smoothed by `hyper.mu`.
pub fn smoothed_unified_energy(
    inputs: &[Array1<f64>],
    state: &LayerState,
    params: &LayerParams,
    hyper: &HyperParams,
    u_hat: Option<ArrayView1<f64>>,
) -> Result<f64> {
    layer_energy(inputs, state, params, hyper, u_hat, Some(hyper.mu))
}

fn layer_energy(
    inputs: &[Array1<f64>],
    state: &LayerState,
    params: &LayerParams,
    hyper: &HyperParams,
    u_hat: Option<ArrayView1<f64>>,
    mu: Option<f64>,
) -> Result<f64> {
    state.validate(params.dims)?;
    ensure_len("input group", inputs.len(), params.dims.group)?;
    let gamma = gamma_from_causes(state.causes.view(), &params.invariance, hyper.gamma0)?;
    let mut total = 0.0;
    for ((y, x), xp) in inputs.iter().zip(&state.states).zip(&state.prev_states) {
        ensure_len("input", y.len(), params.dims.input)?;
        let r = y - &params.dictionary.dot(x);
        let e = x - &params.transition.dot(xp);
        let temporal = match mu {
            Some(mu) => smoothed_l1_unchecked(e.view(), mu),
            None => e.iter().map(|v| v.abs()).sum(),
        };
        total += 0.5 * r.dot(&r)
            + hyper.lambda * temporal
            + L1Weights::PerComponent(gamma.view()).penalty(x.view());
    }
    total += hyper.beta * state.causes.iter().map(|v| v.abs()).sum::<f64>();
    if let Some(h) = u_hat {
        ensure_len("predicted causes", h.len(), params.dims.causes)?;
        let d = &state.causes - &h;
        total += 0.5 * d.dot(&d);
    }
    Ok(total)
}

/// Top-down state prediction: keep `[A x_prev]_k` where
/// `γ0 · exp(−[B û]_k)/2 < λ`, zero elsewhere.
pub fn predict_states(
    x_prev: ArrayView1<f64>,
    transition: &Array2<f64>,
    invariance: &Array2<f64>,
    u_hat_above: ArrayView1<f64>,
    lambda: f64,
    gamma0: f64,
) -> Result<Array1<f64>> {
    let k = transition.nrows();
    ensure_shape("transition", transition.dim(), (k, k))?;
    ensure_len("previous state", x_prev.len(), k)?;
    ensure_len("invariance rows", invariance.nrows(), k)?;
    ensure_len("predicted causes", u_hat_above.len(), invariance.ncols())?;
    let carried = transition.dot(&x_prev);
    let bu = invariance.dot(&u_hat_above);
    Ok(Zip::from(&carried).and(&bu).map_collect(|&ax, &b| {
        if gamma0 * (-b).exp() / 2.0 < lambda {
            ax
        } else {
            0.0
        }
    }))
}

/// `û = C x̂`.
pub fn predict_causes(x_hat: ArrayView1<f64>, dictionary: &Array2<f64>) -> Result<Array1<f64>> {
    ensure_len("predicted states", x_hat.len(), dictionary.ncols())?;
    Ok(dictionary.dot(&x_hat))
}

/// Both top-down quantities for one group member.
pub fn top_down_prediction(
    x_prev: ArrayView1<f64>,
    params: &LayerParams,
    u_hat_above: ArrayView1<f64>,
    hyper: &HyperParams,
) -> Result<TopDownPrediction> {
    let x_hat = predict_states(
        x_prev,
        &params.transition,
        &params.invariance,
        u_hat_above,
        hyper.lambda,
        hyper.gamma0,
    )?;
    let u_hat = predict_causes(x_hat.view(), &params.dictionary)?;
    Ok(TopDownPrediction { u_hat, x_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerDims;
    use ndarray::array;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
    }

    fn random_mat(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
    }

    #[test]
    fn gamma_cases() {
        let b = array![[1.0, 0.5], [0.2, 0.0]];
        let g = gamma_from_causes(array![0.0, 0.0].view(), &b, 1.0).unwrap();
        assert_eq!(g.0, array![1.0, 1.0]);
        // [Bu] = −ln 3 gives (1 + 3)/2 · γ0.
        let b = array![[1.0]];
        let g = gamma_from_causes(array![-(3.0f64).ln()].view(), &b, 2.0).unwrap();
        assert!((g.0[0] - 4.0).abs() < 1e-12);
        let g = gamma_from_causes(array![800.0].view(), &b, 2.0).unwrap();
        assert!((g.0[0] - 1.0).abs() < 1e-12);
        assert!(gamma_from_causes(array![1.0, 2.0].view(), &b, 1.0).is_err());
    }

    #[test]
    fn state_energy_cases() {
        let mut rng = crate::seed::rng(3);
        let c = random_mat(&mut rng, 3, 4, 1.0);
        let a = random_mat(&mut rng, 4, 4, 1.0);
        let y = random_vec(&mut rng, 3, 1.0);
        let z = Array1::zeros(4);
        let g = GammaWeights::uniform(4, 0.3);
        let e0 = state_energy(y.view(), z.view(), z.view(), &g, &c, &a, 0.5).unwrap();
        assert!((e0 - 0.5 * y.dot(&y)).abs() < 1e-14);

        let xp = random_vec(&mut rng, 4, 1.0);
        let x = a.dot(&xp);
        let yx = c.dot(&x);
        let e = state_energy(yx.view(), x.view(), xp.view(), &GammaWeights::uniform(4, 0.0), &c, &a, 0.5).unwrap();
        assert!(e.abs() < 1e-12);

        // Term-by-term oracle with explicit loops.
        let x = random_vec(&mut rng, 4, 1.0);
        let gam = GammaWeights(random_vec(&mut rng, 4, 1.0).mapv(f64::abs));
        let mut data = 0.0;
        for i in 0..3 {
            let mut cx = 0.0;
            for j in 0..4 {
                cx += c[[i, j]] * x[j];
            }
            data += (y[i] - cx) * (y[i] - cx);
        }
        let mut temporal = 0.0;
        let mut sparse = 0.0;
        for i in 0..4 {
            let mut ax = 0.0;
            for j in 0..4 {
                ax += a[[i, j]] * xp[j];
            }
            temporal += (x[i] - ax).abs();
            sparse += gam.0[i] * x[i].abs();
        }
        let oracle = 0.5 * data + 0.7 * temporal + sparse;
        let got = state_energy(y.view(), x.view(), xp.view(), &gam, &c, &a, 0.7).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn state_gradient_matches_finite_differences() {
        let mut rng = crate::seed::rng(11);
        for _ in 0..20 {
            let (p, k) = (5, 7);
            let c = random_mat(&mut rng, p, k, 1.0);
            let a = random_mat(&mut rng, k, k, 0.5);
            let y = random_vec(&mut rng, p, 1.0);
            let x = random_vec(&mut rng, k, 1.0);
            let xp = random_vec(&mut rng, k, 1.0);
            let (lambda, mu) = (0.6, 0.3);
            let g = state_smooth_gradient(y.view(), x.view(), xp.view(), &c, &a, lambda, mu).unwrap();
            let h = 1e-6;
            for i in 0..k {
                let mut xpl = x.clone();
                xpl[i] += h;
                let mut xmi = x.clone();
                xmi[i] -= h;
                let fp = state_smooth_value(y.view(), xpl.view(), xp.view(), &c, &a, lambda, mu).unwrap();
                let fm = state_smooth_value(y.view(), xmi.view(), xp.view(), &c, &a, lambda, mu).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn state_gradient_special_cases() {
        let mut rng = crate::seed::rng(5);
        let c = random_mat(&mut rng, 3, 3, 1.0);
        let a = random_mat(&mut rng, 3, 3, 1.0);
        let xp = random_vec(&mut rng, 3, 1.0);
        let x = a.dot(&xp);
        let y = c.dot(&x);
        let g = state_smooth_gradient(y.view(), x.view(), xp.view(), &c, &a, 0.5, 0.1).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));

        let y = random_vec(&mut rng, 3, 1.0);
        let g = state_smooth_gradient(y.view(), x.view(), xp.view(), &c, &a, 0.0, 0.1).unwrap();
        let want = c.t().dot(&(c.dot(&x) - &y));
        assert!((&g - &want).iter().all(|v| v.abs() < 1e-14));
        assert!(state_smooth_gradient(y.view(), x.view(), xp.view(), &c, &a, 0.5, 0.0).is_err());
    }

    #[test]
    fn gram_objective_matches_direct_form() {
        let mut rng = crate::seed::rng(9);
        let c = random_mat(&mut rng, 6, 4, 1.0);
        let a = random_mat(&mut rng, 4, 4, 1.0);
        let y = random_vec(&mut rng, 6, 1.0);
        let x = random_vec(&mut rng, 4, 1.0);
        let xp = random_vec(&mut rng, 4, 1.0);
        let solver = StateSolver::new(&c);
        let pred = a.dot(&xp);
        let obj = solver.objective(y.view(), pred.view(), 0.4, 0.2);
        let direct = state_smooth_value(y.view(), x.view(), xp.view(), &c, &a, 0.4, 0.2).unwrap();
        assert!((obj.value(x.view()) - direct).abs() < 1e-12);
        let g = state_smooth_gradient(y.view(), x.view(), xp.view(), &c, &a, 0.4, 0.2).unwrap();
        assert!((&obj.gradient(x.view()) - &g).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn infer_states_scalar_lasso() {
        let hyper = HyperParams {
            lambda: 0.0,
            tol: 1e-12,
            max_iters: 1000,
            ..Default::default()
        };
        let one = array![[1.0]];
        let x = infer_states(array![1.0].view(), array![0.0].view(), &GammaWeights::uniform(1, 0.3), &one, &one, &hyper)
            .unwrap();
        assert!((x[0] - 0.7).abs() < 1e-8);

        let x = infer_states(array![1.0].view(), array![0.0].view(), &GammaWeights::uniform(1, 1e6), &one, &one, &hyper)
            .unwrap();
        assert_eq!(x[0], 0.0);

        let mut rng = crate::seed::rng(1);
        let c = random_mat(&mut rng, 4, 6, 1.0);
        let a = random_mat(&mut rng, 6, 6, 1.0);
        let x = infer_states(
            Array1::zeros(4).view(),
            Array1::zeros(6).view(),
            &GammaWeights::uniform(6, 0.1),
            &c,
            &a,
            &HyperParams::default(),
        )
        .unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_states_not_worse_than_zero() {
        let mut rng = crate::seed::rng(21);
        let hyper = HyperParams::default();
        for _ in 0..20 {
            let c = random_mat(&mut rng, 5, 8, 1.0);
            let a = random_mat(&mut rng, 8, 8, 0.4);
            let y = random_vec(&mut rng, 5, 2.0);
            let xp = random_vec(&mut rng, 8, 1.0);
            let g = GammaWeights::uniform(8, 0.2);
            let x = infer_states(y.view(), xp.view(), &g, &c, &a, &hyper).unwrap();
            let val = |x: &Array1<f64>| {
                state_smooth_value(y.view(), x.view(), xp.view(), &c, &a, hyper.lambda, hyper.mu).unwrap()
                    + L1Weights::PerComponent(g.view()).penalty(x.view())
            };
            assert!(val(&x) <= val(&Array1::zeros(8)) + 1e-12);
        }
    }

    #[test]
    fn pooling_cases() {
        assert_eq!(pool_states(&[array![1.0, -2.0]]).unwrap(), array![1.0, 2.0]);
        assert_eq!(
            pool_states(&[array![1.0, -1.0], array![-2.0, 0.0]]).unwrap(),
            array![3.0, 1.0]
        );
        assert_eq!(pool_states(&[Array1::zeros(3), Array1::zeros(3)]).unwrap(), Array1::<f64>::zeros(3));
        assert!(matches!(pool_states(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn cause_gradient_matches_finite_differences() {
        let mut rng = crate::seed::rng(17);
        for with_hat in [false, true] {
            for _ in 0..20 {
                let (k, d) = (6, 3);
                let b = random_mat(&mut rng, k, d, 1.0).mapv(f64::abs);
                let s = random_vec(&mut rng, k, 2.0).mapv(f64::abs);
                let u = random_vec(&mut rng, d, 1.0);
                let uh = random_vec(&mut rng, d, 1.0);
                let hat = with_hat.then(|| uh.view());
                let (_, g) = cause_smooth_value_grad(u.view(), s.view(), &b, 0.7, hat).unwrap();
                let h = 1e-6;
                for j in 0..d {
                    let mut up = u.clone();
                    up[j] += h;
                    let mut um = u.clone();
                    um[j] -= h;
                    let fp = cause_smooth_value_grad(up.view(), s.view(), &b, 0.7, hat).unwrap().0;
                    let fm = cause_smooth_value_grad(um.view(), s.view(), &b, 0.7, hat).unwrap().0;
                    let fd = (fp - fm) / (2.0 * h);
                    assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn cause_objective_special_cases() {
        let b = array![[0.5, 0.5], [1.0, 0.0]];
        let (v, g) = cause_smooth_value_grad(array![0.3, -0.2].view(), Array1::zeros(2).view(), &b, 1.0, None).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let u = array![0.3, -0.2];
        let s = array![1.0, 2.0];
        let (_, g0) = cause_smooth_value_grad(u.view(), s.view(), &b, 1.0, None).unwrap();
        let (_, g1) = cause_smooth_value_grad(u.view(), s.view(), &b, 1.0, Some(u.view())).unwrap();
        assert_eq!(g0, g1);
    }

    #[test]
    fn infer_causes_cases() {
        let hyper = HyperParams::default();
        let b = array![[0.6, 0.8], [0.8, 0.6]];
        let u = infer_causes(Array1::zeros(2).view(), &b, &hyper, None).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
        let big = HyperParams {
            beta: 1e6,
            ..hyper
        };
        let u = infer_causes(array![3.0, 4.0].view(), &b, &big, None).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
        assert!(infer_causes(array![-1.0, 0.0].view(), &b, &hyper, None).is_err());
    }

    #[test]
    fn infer_causes_matches_grid_oracle() {
        // K = D = 1: minimize γ0(1 + e^{−bu})/2 · s + β|u| over a grid.
        let (bv, s, beta, gamma0) = (0.9, 3.0, 0.2, 1.0);
        let objective = |u: f64| gamma0 * (1.0 + (-bv * u).exp()) / 2.0 * s + beta * u.abs();
        let grid_best = (0..=100_000)
            .map(|i| -5.0 + i as f64 * 1e-4)
            .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        let hyper = HyperParams {
            beta,
            gamma0,
            tol: 1e-12,
            max_iters: 5000,
            ..Default::default()
        };
        let u = infer_causes(array![s].view(), &array![[bv]], &hyper, None).unwrap();
        assert!((u[0] - grid_best).abs() < 1e-3, "{} vs {grid_best}", u[0]);
    }

    fn random_layer(rng: &mut impl Rng, dims: LayerDims) -> LayerParams {
        let mut p = LayerParams::new(dims, rng.random()).unwrap();
        p.transition = random_mat(rng, dims.state, dims.state, 0.3);
        p
    }

    #[test]
    fn joint_inference_reduces_energy() {
        let mut rng = crate::seed::rng(33);
        let dims = LayerDims::new(10, 6, 3, 3).unwrap();
        let hyper = HyperParams {
            gamma0: 0.3,
            ..Default::default()
        };
        let mut wins = 0;
        for _ in 0..20 {
            let params = random_layer(&mut rng, dims);
            let ys: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 6, 1.0)).collect();
            let xps: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 10, 0.5)).collect();
            let out = joint_infer(&ys, &xps, &params, &hyper, None).unwrap();
            let mut zero = LayerState::zeros(dims);
            zero.prev_states = xps.clone();
            let e0 = unified_energy(&ys, &zero, &params, &hyper, None).unwrap();
            let e1 = unified_energy(&ys, &out, &params, &hyper, None).unwrap();
            if e1 <= e0 {
                wins += 1;
            }
        }
        assert!(wins >= 19);
    }

    #[test]
    fn joint_inference_decoupled_case_matches_state_inference() {
        let mut rng = crate::seed::rng(2);
        let dims = LayerDims::new(6, 4, 2, 1).unwrap();
        let mut params = random_layer(&mut rng, dims);
        params.invariance.fill(0.0);
        let hyper = HyperParams {
            tol: 1e-13,
            max_iters: 20_000,
            gamma0: 0.4,
            ..Default::default()
        };
        let y = random_vec(&mut rng, 4, 1.5);
        let xp = random_vec(&mut rng, 6, 1.0);
        let joint = joint_infer(&[y.clone()], &[xp.clone()], &params, &hyper, None).unwrap();
        // With B = 0, γ = γ0 (1 + 1)/2 = γ0 regardless of u.
        let alone = infer_states(
            y.view(),
            xp.view(),
            &GammaWeights::uniform(6, hyper.gamma0),
            &params.dictionary,
            &params.transition,
            &hyper,
        )
        .unwrap();
        assert!((&joint.states[0] - &alone).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn joint_inference_of_zero_input_is_zero() {
        let dims = LayerDims::new(5, 4, 2, 2).unwrap();
        let params = LayerParams::new(dims, 4).unwrap();
        let z = vec![Array1::zeros(4); 2];
        let zx = vec![Array1::zeros(5); 2];
        let out = joint_infer(&z, &zx, &params, &HyperParams::default(), None).unwrap();
        assert!(out.states.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        assert!(out.causes.iter().all(|&v| v == 0.0));
        assert!(joint_infer(&z[..1], &zx, &params, &HyperParams::default(), None).is_err());
    }

    #[test]
    fn predict_states_threshold_rule() {
        let a = Array2::eye(2);
        let b = array![[1.0], [0.0]];
        let xp = array![2.0, -3.0];
        let zero = array![0.0];
        assert_eq!(predict_states(xp.view(), &a, &b, zero.view(), 0.6, 1.0).unwrap(), xp);
        assert_eq!(predict_states(xp.view(), &a, &b, zero.view(), 0.4, 1.0).unwrap(), array![0.0, 0.0]);
        // [Bû] = (2, 0): γ0γ̂ = (0.068, 0.5) against λ = 0.4.
        let x = predict_states(xp.view(), &a, &b, array![2.0].view(), 0.4, 1.0).unwrap();
        assert_eq!(x, array![2.0, 0.0]);
    }

    #[test]
    fn predict_states_matches_coordinate_oracle() {
        // Per component, minimize λ|x − a| + w|x| over a grid containing 0 and a.
        let mut rng = crate::seed::rng(8);
        let k = 12;
        let a = random_mat(&mut rng, k, k, 1.0);
        let b = random_mat(&mut rng, k, 3, 1.0).mapv(f64::abs);
        let xp = random_vec(&mut rng, k, 1.0);
        let uh = random_vec(&mut rng, 3, 2.0);
        let (lambda, gamma0) = (0.3, 1.0);
        let got = predict_states(xp.view(), &a, &b, uh.view(), lambda, gamma0).unwrap();
        let carried = a.dot(&xp);
        let bu = b.dot(&uh);
        for i in 0..k {
            let w = gamma0 * (-bu[i]).exp() / 2.0;
            let f = |x: f64| lambda * (x - carried[i]).abs() + w * x.abs();
            let lo = carried[i].min(0.0) - 1.0;
            let hi = carried[i].max(0.0) + 1.0;
            let mut best = (f64::INFINITY, 0.0);
            for j in 0..=20_000 {
                let x = lo + (hi - lo) * j as f64 / 20_000.0;
                if f(x) < best.0 {
                    best = (f(x), x);
                }
            }
            for cand in [0.0, carried[i]] {
                if f(cand) <= best.0 {
                    best = (f(cand), cand);
                }
            }
            if (w - lambda).abs() > 1e-9 {
                assert!((got[i] - best.1).abs() < 1e-9, "component {i}: {} vs {}", got[i], best.1);
            }
        }
    }

    #[test]
    fn predict_causes_cases() {
        let mut rng = crate::seed::rng(4);
        let c = random_mat(&mut rng, 3, 4, 1.0);
        assert_eq!(predict_causes(Array1::zeros(4).view(), &c).unwrap(), Array1::<f64>::zeros(3));
        let e1 = array![0.0, 1.0, 0.0, 0.0];
        assert_eq!(predict_causes(e1.view(), &c).unwrap(), c.column(1).to_owned());
        let x = random_vec(&mut rng, 4, 1.0);
        let got = predict_causes(x.view(), &c).unwrap();
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += c[[i, j]] * x[j];
            }
            assert!((got[i] - acc).abs() < 1e-14);
        }
        assert!(predict_causes(Array1::zeros(3).view(), &c).is_err());
    }
}
