//! Layer parameters, hyperparameters, per-timestep layer state and the
//! versioned model file.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, ensure_shape, Error, Result};
use crate::hierarchy::{Network, Topology};
use crate::seed;

/// Dimensions of one layer: `state` (K), `input` (P), `causes` (D) and
/// `group` (N, number of patches pooled by one cause vector).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub state: usize,
    pub input: usize,
    pub causes: usize,
    pub group: usize,
}

impl LayerDims {
    pub fn new(state: usize, input: usize, causes: usize, group: usize) -> Result<Self> {
        let dims = Self {
            state,
            input,
            causes,
            group,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("state", self.state),
            ("input", self.input),
            ("causes", self.causes),
            ("group", self.group),
        ] {
            if v == 0 {
                return Err(Error::dim(format!("{name} dimension must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Parameters of a single dynamic-network layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub dims: LayerDims,
    /// State transition `A`, K x K.
    pub transition: Array2<f64>,
    /// Invariance matrix `B`, K x D, non-negative with unit-norm columns.
    pub invariance: Array2<f64>,
    /// Dictionary `C`, P x K, unit-norm columns.
    pub dictionary: Array2<f64>,
}

impl LayerParams {
    /// Fresh layer: `A = I`, Gaussian dictionary and uniform non-negative
    /// invariance matrix, both column-normalized.
    pub fn new(dims: LayerDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = seed::rng(seed);
        let LayerDims {
            state: k,
            input: p,
            causes: d,
            ..
        } = dims;
        let mut dictionary = Array2::from_shape_fn((p, k), |_| rng.sample::<f64, _>(StandardNormal));
        let mut invariance = Array2::from_shape_fn((k, d), |_| rng.random::<f64>());
        normalize_columns(&mut dictionary, None);
        normalize_columns(&mut invariance, None);
        Ok(Self {
            dims,
            transition: Array2::eye(k),
            invariance,
            dictionary,
        })
    }

    /// Builds from explicit matrices, checking shapes against `dims`.
    pub fn from_parts(
        dims: LayerDims,
        transition: Array2<f64>,
        invariance: Array2<f64>,
        dictionary: Array2<f64>,
    ) -> Result<Self> {
        let params = Self {
            dims,
            transition,
            invariance,
            dictionary,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let LayerDims {
            state: k,
            input: p,
            causes: d,
            ..
        } = self.dims;
        ensure_shape("transition", self.transition.dim(), (k, k))?;
        ensure_shape("invariance", self.invariance.dim(), (k, d))?;
        ensure_shape("dictionary", self.dictionary.dim(), (p, k))?;
        Ok(())
    }
}

/// Scales every column to unit Euclidean norm. Columns with (near) zero norm
/// are replaced by the matching column of `fallback`, or left untouched.
pub(crate) fn normalize_columns(m: &mut Array2<f64>, fallback: Option<&Array2<f64>>) {
    for (j, mut col) in m.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm > 1e-300 && norm.is_finite() {
            col.mapv_inplace(|v| v / norm);
        } else if let Some(fb) = fallback {
            col.assign(&fb.column(j));
        }
    }
}

/// Inference and learning controls for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Weight of the temporal term `‖x_t − A x_{t−1}‖₁`.
    pub lambda: f64,
    /// Sparsity scale `γ0`.
    pub gamma0: f64,
    /// ℓ1 weight on the causes.
    pub beta: f64,
    /// Nesterov smoothing parameter.
    pub mu: f64,
    /// Backtracking factor, > 1.
    pub eta: f64,
    /// Initial Lipschitz estimate for the state subproblems.
    pub lipschitz_x: f64,
    /// Initial Lipschitz estimate for the cause subproblem.
    pub lipschitz_u: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Reset momentum when a step increases the objective.
    pub restart: bool,
    pub learn_rate: f64,
    pub batch_size: usize,
    /// Exponential smoothing coefficient of the parameter trajectory.
    pub param_smooth: f64,
    pub epochs: usize,
    /// Relative parameter change between epochs below which training stops.
    pub converge_tol: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma0: 0.1,
            beta: 0.1,
            mu: 0.05,
            eta: 1.5,
            lipschitz_x: 1.0,
            lipschitz_u: 1.0,
            max_iters: 200,
            tol: 1e-6,
            restart: true,
            learn_rate: 0.01,
            batch_size: 100,
            param_smooth: 0.9,
            epochs: 10,
            converge_tol: 1e-3,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
            Ok(())
        };
        finite_nonneg("lambda", self.lambda)?;
        finite_nonneg("beta", self.beta)?;
        finite_nonneg("tol", self.tol)?;
        finite_nonneg("learn_rate", self.learn_rate)?;
        finite_nonneg("converge_tol", self.converge_tol)?;
        for (name, v) in [
            ("gamma0", self.gamma0),
            ("mu", self.mu),
            ("lipschitz_x", self.lipschitz_x),
            ("lipschitz_u", self.lipschitz_u),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.eta.is_finite() && self.eta > 1.0) {
            return Err(Error::param(format!("eta must be > 1, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.param_smooth) {
            return Err(Error::param(format!(
                "param_smooth must lie in [0, 1), got {}",
                self.param_smooth
            )));
        }
        if self.max_iters == 0 || self.batch_size == 0 {
            return Err(Error::param("max_iters and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// States of every group member plus the shared causes at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    /// `x_t^(n)`, one vector of length K per group member.
    pub states: Vec<Array1<f64>>,
    /// `u_t`, length D.
    pub causes: Array1<f64>,
    /// `x_{t−1}^(n)` the states were inferred against.
    pub prev_states: Vec<Array1<f64>>,
}

impl LayerState {
    pub fn zeros(dims: LayerDims) -> Self {
        let zero = Array1::zeros(dims.state);
        Self {
            states: vec![zero.clone(); dims.group],
            causes: Array1::zeros(dims.causes),
            prev_states: vec![zero; dims.group],
        }
    }

    pub fn validate(&self, dims: LayerDims) -> Result<()> {
        ensure_len("state group", self.states.len(), dims.group)?;
        ensure_len("previous state group", self.prev_states.len(), dims.group)?;
        for x in self.states.iter().chain(&self.prev_states) {
            ensure_len("state", x.len(), dims.state)?;
        }
        ensure_len("causes", self.causes.len(), dims.causes)
    }
}

pub const MODEL_VERSION: &str = "dpcn-1";

/// Serialized form of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub dims: LayerDims,
    pub hyper: HyperParams,
    pub transition: Vec<Vec<f64>>,
    pub invariance: Vec<Vec<f64>>,
    pub dictionary: Vec<Vec<f64>>,
}

/// Top-level model document: `{version, topology, layers}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub topology: Topology,
    pub layers: Vec<LayerRecord>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: String,
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(what: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<Array2<f64>> {
    ensure_len(what, rows.len(), shape.0)?;
    let mut flat = Vec::with_capacity(shape.0 * shape.1);
    for r in rows {
        ensure_len(what, r.len(), shape.1)?;
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec(shape, flat).map_err(|e| Error::dim(e.to_string()))
}

impl ModelFile {
    pub fn from_network(net: &Network) -> Result<Self> {
        for layer in &net.layers {
            for m in [
                &layer.params.transition,
                &layer.params.invariance,
                &layer.params.dictionary,
            ] {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("model contains non-finite values".into()));
                }
            }
        }
        Ok(Self {
            version: MODEL_VERSION.to_string(),
            topology: net.topology.clone(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    dims: l.params.dims,
                    hyper: l.hyper,
                    transition: to_rows(&l.params.transition),
                    invariance: to_rows(&l.params.invariance),
                    dictionary: to_rows(&l.params.dictionary),
                })
                .collect(),
        })
    }

    pub fn into_network(self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for rec in &self.layers {
            let d = rec.dims;
            d.validate()?;
            let params = LayerParams::from_parts(
                d,
                from_rows("transition", &rec.transition, (d.state, d.state))?,
                from_rows("invariance", &rec.invariance, (d.state, d.causes))?,
                from_rows("dictionary", &rec.dictionary, (d.input, d.state))?,
            )?;
            layers.push((params, rec.hyper));
        }
        Network::from_layers(self.topology, layers)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        if probe.version != MODEL_VERSION {
            return Err(Error::Version {
                found: probe.version,
                expected: MODEL_VERSION.to_string(),
            });
        }
        serde_json::from_str(text).map_err(|e| parse_error(text, &e))
    }
}

/// Converts serde_json's 1-based line/column position into a byte offset.
fn parse_error(text: &str, err: &serde_json::Error) -> Error {
    let (line, col) = (err.line(), err.column());
    let offset = if line == 0 {
        0
    } else {
        let start: usize = text
            .split_inclusive('\n')
            .take(line - 1)
            .map(str::len)
            .sum();
        (start + col.saturating_sub(1)).min(text.len())
    };
    Error::Parse {
        offset,
        message: err.to_string(),
    }
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = ModelFile::from_network(net)?.to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_json(&text)?.into_network()
}
