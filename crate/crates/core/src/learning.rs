//! Parameter estimation by block coordinate descent: infer states and
//! causes with frozen parameters over a mini-batch, then take one damped
//! gradient step on `A`, `B` and `C`.

use ndarray::{Array1, Array2, Axis, Zip};
use rayon::prelude::*;

use crate::data::PatchGroupSequence;
use crate::error::{ensure_len, Error, Result};
use crate::inference::{pool_states, unified_energy, JointSolver};
use crate::model::{normalize_columns, HyperParams, LayerDims, LayerParams, LayerState};
use crate::smoothing::alpha_star_unchecked;

/// Gradients of the batch-averaged layer energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub transition: Array2<f64>,
    pub invariance: Array2<f64>,
    pub dictionary: Array2<f64>,
}

impl ParamGradients {
    pub fn zeros(dims: LayerDims) -> Self {
        Self {
            transition: Array2::zeros((dims.state, dims.state)),
            invariance: Array2::zeros((dims.state, dims.causes)),
            dictionary: Array2::zeros((dims.input, dims.state)),
        }
    }

    pub fn norm(&self) -> f64 {
        [&self.transition, &self.invariance, &self.dictionary]
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// One inferred timestep of one group: inputs and the inferred variables.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub inputs: Vec<Array1<f64>>,
    pub state: LayerState,
}

/// Samples accumulated since the last parameter update.
#[derive(Debug, Clone, Default)]
pub struct BatchBuffer {
    samples: Vec<BatchSample>,
    capacity: usize,
}

impl BatchBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            samples: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, sample: BatchSample) -> Result<()> {
        if self.is_full() {
            return Err(Error::State(format!("batch buffer full ({} samples)", self.capacity)));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[BatchSample] {
        &self.samples
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }
}

/// Gradients of the batch-averaged unified energy with respect to `A`, `B`
/// and `C`, with the temporal term smoothed by `hyper.mu`:
///
/// ```text
/// dC  = Σ (Cx − y) xᵀ
/// dA  = −λ Σ α*(x − A x_prev) x_prevᵀ
/// dB_kj = −(γ0/2) Σ exp(−[Bu]_k) u_j s_k
/// ```
///
/// summed over group members and divided by the number of samples.
pub fn param_gradients(buffer: &BatchBuffer, params: &LayerParams, hyper: &HyperParams) -> Result<ParamGradients> {
    if buffer.is_empty() {
        return Err(Error::State("cannot compute gradients of an empty batch".into()));
    }
    let dims = params.dims;
    let mut grads = ParamGradients::zeros(dims);
    for sample in buffer.samples() {
        sample.state.validate(dims)?;
        ensure_len("sample input group", sample.inputs.len(), dims.group)?;
        for ((y, x), xp) in sample.inputs.iter().zip(&sample.state.states).zip(&sample.state.prev_states) {
            ensure_len("sample input", y.len(), dims.input)?;
            let r = params.dictionary.dot(x) - y;
            outer_add(&mut grads.dictionary, &r, x, 1.0);
            if hyper.lambda != 0.0 {
                let e = x - &params.transition.dot(xp);
                let alpha = alpha_star_unchecked(e.view(), hyper.mu);
                outer_add(&mut grads.transition, &alpha, xp, -hyper.lambda);
            }
        }
        let pooled = pool_states(&sample.state.states)?;
        let u = &sample.state.causes;
        let weights = Zip::from(&params.invariance.dot(u))
            .and(&pooled)
            .map_collect(|&bu, &s| (-bu).exp() * s);
        outer_add(&mut grads.invariance, &weights, u, -hyper.gamma0 / 2.0);
    }
    let scale = 1.0 / buffer.len() as f64;
    grads.transition *= scale;
    grads.invariance *= scale;
    grads.dictionary *= scale;
    Ok(grads)
}

fn outer_add(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>, scale: f64) {
    for (mut row, &ai) in m.axis_iter_mut(Axis(0)).zip(a) {
        if ai != 0.0 {
            row.scaled_add(scale * ai, b);
        }
    }
}

/// Damped gradient step followed by the structural projections: `B` is
/// clamped to be non-negative, then `C` and `B` are column-normalized.
///
/// With `s = hyper.param_smooth`, each matrix becomes
/// `s·θ + (1 − s)·(θ − learn_rate·grad)`.
pub fn apply_update(params: &LayerParams, grads: &ParamGradients, hyper: &HyperParams) -> Result<LayerParams> {
    let dims = params.dims;
    let expected = ParamGradients::zeros(dims);
    for (name, g, e) in [
        ("transition", &grads.transition, &expected.transition),
        ("invariance", &grads.invariance, &expected.invariance),
        ("dictionary", &grads.dictionary, &expected.dictionary),
    ] {
        crate::error::ensure_shape(name, g.dim(), e.dim())?;
    }
    let step = (1.0 - hyper.param_smooth) * hyper.learn_rate;
    let descend = |theta: &Array2<f64>, g: &Array2<f64>| -> Result<Array2<f64>> {
        let next = theta - &(g * step);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter after update".into()));
        }
        Ok(next)
    };
    let transition = descend(&params.transition, &grads.transition)?;
    let mut invariance = descend(&params.invariance, &grads.invariance)?;
    let mut dictionary = descend(&params.dictionary, &grads.dictionary)?;
    invariance.mapv_inplace(|v| v.max(0.0));
    normalize_columns(&mut invariance, Some(&params.invariance));
    normalize_columns(&mut dictionary, Some(&params.dictionary));
    Ok(LayerParams {
        dims,
        transition,
        invariance,
        dictionary,
    })
}

/// Per-batch training progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchReport {
    pub layer: usize,
    pub epoch: usize,
    pub batch: usize,
    /// Mean exact unified energy of the batch samples before the update.
    pub mean_energy: f64,
    /// Frobenius norm of the parameter change.
    pub param_change: f64,
    pub grad_norm: f64,
}

impl BatchReport {
    pub const TSV_HEADER: &'static str = "layer\tepoch\tbatch\tmean_energy\tparam_change";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.9e}\t{:.9e}",
            self.layer, self.epoch, self.batch, self.mean_energy, self.param_change
        )
    }
}

/// Summary returned by [`train_layer`].
#[derive(Debug, Clone)]
pub struct TrainedLayer {
    pub params: LayerParams,
    pub epochs_run: usize,
    pub reports: Vec<BatchReport>,
}

fn param_distance(a: &LayerParams, b: &LayerParams) -> f64 {
    let d = |x: &Array2<f64>, y: &Array2<f64>| (x - y).iter().map(|v| v * v).sum::<f64>();
    (d(&a.transition, &b.transition) + d(&a.invariance, &b.invariance) + d(&a.dictionary, &b.dictionary)).sqrt()
}

fn param_norm(a: &LayerParams) -> f64 {
    let n = |x: &Array2<f64>| x.iter().map(|v| v * v).sum::<f64>();
    (n(&a.transition) + n(&a.invariance) + n(&a.dictionary)).sqrt()
}

/// Greedy training of one layer on one or more replicated input streams
/// sharing the same parameters.
///
/// Each epoch walks the streams in windows of `batch_size` timesteps. Within
/// a window every stream is inferred sequentially (the states of one
/// timestep are the previous states of the next) with frozen parameters,
/// then one update is applied. Training stops after `hyper.epochs` epochs or
/// once the relative parameter change over an epoch drops below
/// `hyper.converge_tol`. `u_hat` is the fixed cause prior used during
/// inference (all zeros for bottom-up training, `None` for the plain
/// energy).
pub fn train_layer(
    streams: &[PatchGroupSequence],
    dims: LayerDims,
    hyper: &HyperParams,
    seed: u64,
    layer: usize,
    with_zero_prior: bool,
    mut observer: impl FnMut(&BatchReport),
) -> Result<TrainedLayer> {
    hyper.validate()?;
    let init = LayerParams::new(dims, seed)?;
    train_layer_from(streams, init, hyper, layer, with_zero_prior, &mut observer)
}

/// As [`train_layer`] starting from given parameters.
pub fn train_layer_from(
    streams: &[PatchGroupSequence],
    init: LayerParams,
    hyper: &HyperParams,
    layer: usize,
    with_zero_prior: bool,
    observer: &mut dyn FnMut(&BatchReport),
) -> Result<TrainedLayer> {
    hyper.validate()?;
    let dims = init.dims;
    let len = streams
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::State("no input streams".into()))?;
    for s in streams {
        if s.len() != len {
            return Err(Error::dim("input streams differ in length"));
        }
        if s.group_size() != dims.group || s.patch_len() != dims.input {
            return Err(Error::dim(format!(
                "stream carries groups of {} vectors of length {}, layer expects {} of length {}",
                s.group_size(),
                s.patch_len(),
                dims.group,
                dims.input
            )));
        }
    }
    if len == 0 {
        return Err(Error::State("input streams are empty".into()));
    }

    let zero_prior = Array1::zeros(dims.causes);
    let prior = with_zero_prior.then(|| zero_prior.view());
    let mut params = init;
    let mut reports = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..hyper.epochs.max(1) {
        epochs_run += 1;
        let epoch_start = params.clone();
        let mut prev: Vec<Vec<Array1<f64>>> = vec![vec![Array1::zeros(dims.state); dims.group]; streams.len()];
        for (batch, start) in (0..len).step_by(hyper.batch_size).enumerate() {
            let end = (start + hyper.batch_size).min(len);
            let solver = JointSolver::new(&params, hyper)?.with_layer_index(layer);
            let results: Vec<Result<(Vec<BatchSample>, Vec<Array1<f64>>, f64)>> = streams
                .par_iter()
                .zip(prev.par_iter())
                .map(|(stream, prev0)| {
                    let mut prev_states = prev0.clone();
                    let mut samples = Vec::with_capacity(end - start);
                    let mut energy = 0.0;
                    for t in start..end {
                        let inputs = stream.group(t);
                        let out = solver
                            .infer(inputs, &prev_states, prior)
                            .map_err(|e| Error::Training {
                                layer,
                                timestep: t,
                                source: Box::new(e),
                            })?;
                        energy += unified_energy(inputs, &out.state, &params, hyper, None)?;
                        prev_states = out.state.states.clone();
                        samples.push(BatchSample {
                            inputs: inputs.to_vec(),
                            state: out.state,
                        });
                    }
                    Ok((samples, prev_states, energy))
                })
                .collect();
            let mut buffer = BatchBuffer::new((end - start) * streams.len());
            let mut energy = 0.0;
            for (i, r) in results.into_iter().enumerate() {
                let (samples, last, e) = r?;
                prev[i] = last;
                energy += e;
                for s in samples {
                    buffer.push(s)?;
                }
            }
            let grads = param_gradients(&buffer, &params, hyper)?;
            let next = apply_update(&params, &grads, hyper)?;
            let report = BatchReport {
                layer,
                epoch,
                batch,
                mean_energy: energy / buffer.len() as f64,
                param_change: param_distance(&params, &next),
                grad_norm: grads.norm(),
            };
            observer(&report);
            reports.push(report);
            params = next;
        }
        let rel = param_distance(&epoch_start, &params) / param_norm(&epoch_start).max(1e-300);
        if rel < hyper.converge_tol {
            break;
        }
    }
    Ok(TrainedLayer {
        params,
        epochs_run,
        reports,
    })
}
