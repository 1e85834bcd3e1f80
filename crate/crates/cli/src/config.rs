//! Run configuration: a TOML file with one table per command, overridden
//! key by key from the command line.

use std::path::{Path, PathBuf};

use dpcn::eval::{BenchConfig, Method, SimSpec};
use dpcn::hierarchy::Topology;
use dpcn::{HyperParams, LayerDims};
use serde::{Deserialize, Serialize};

/// Configuration problems. Reported with exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every subsystem derives its own stream from it.
    pub seed: u64,
    /// Worker thread cap; `None` lets the pool pick.
    pub threads: Option<usize>,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub benchmark: BenchmarkConfig,
    pub rf: RfConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            generate: GenerateConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            benchmark: BenchmarkConfig::default(),
            rf: RfConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| bad(format!("{}: {}", path.display(), e.0)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub out: PathBuf,
    /// Corrupted copy; skipped when unset.
    pub noisy_out: Option<PathBuf>,
    pub labels_out: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub frames_per_class: usize,
    /// Glyph class of each segment: 0 square, 1 triangle, 2 disc.
    pub classes: Vec<u32>,
    pub max_speed: i64,
    /// Mean number of distractor glyphs per frame in the corrupted copy.
    pub noise_mean: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            out: "shapes.dpcv".into(),
            noisy_out: Some("shapes_noisy.dpcv".into()),
            labels_out: Some("labels.csv".into()),
            width: 32,
            height: 32,
            frames_per_class: 100,
            classes: vec![0, 1, 2],
            max_speed: 2,
            noise_mean: 1.5,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.frames_per_class == 0 || self.classes.is_empty() {
            return Err(bad("generate: need at least one class and one frame per class"));
        }
        if let Some(c) = self.classes.iter().find(|&&c| c > 2) {
            return Err(bad(format!("generate: class {c} out of range 0..=2")));
        }
        if !(self.noise_mean.is_finite() && self.noise_mean >= 0.0) {
            return Err(bad("generate: noise_mean must be finite and >= 0"));
        }
        if self.max_speed < 1 {
            return Err(bad("generate: max_speed must be >= 1"));
        }
        Ok(())
    }
}

/// Network geometry: a named preset or an explicit description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyChoice {
    Preset(String),
    Custom(Topology),
}

impl TopologyChoice {
    pub fn resolve(&self) -> Result<Topology, ConfigError> {
        let topo = match self {
            TopologyChoice::Preset(name) => match name.as_str() {
                "shapes" => Topology::shapes(),
                "natural" => Topology::natural_video(),
                other => return Err(bad(format!("train: unknown topology preset {other:?} (shapes, natural)"))),
            },
            TopologyChoice::Custom(t) => t.clone(),
        };
        topo.validate().map_err(|e| bad(format!("train: {e}")))?;
        Ok(topo)
    }
}

/// State and cause sizes of one layer; the input and group sizes follow
/// from the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSize {
    pub state: usize,
    pub causes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub video: PathBuf,
    pub model_out: PathBuf,
    /// Per-batch training log (TSV); skipped when unset.
    pub log_out: Option<PathBuf>,
    pub topology: TopologyChoice,
    /// Train only the bottom `layers` layers; all when unset.
    pub layers: Option<usize>,
    pub sizes: Vec<LayerSize>,
    /// One entry per layer.
    pub hyper: Vec<HyperParams>,
}

/// Layer settings tuned for the bouncing-shapes video.
pub fn shapes_hyper() -> Vec<HyperParams> {
    let bottom = HyperParams {
        lambda: 0.05,
        gamma0: 0.05,
        beta: 0.01,
        max_iters: 100,
        tol: 1e-4,
        learn_rate: 0.05,
        param_smooth: 0.5,
        epochs: 3,
        ..Default::default()
    };
    let top = HyperParams { gamma0: 0.2, ..bottom };
    vec![bottom, top]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            video: "shapes.dpcv".into(),
            model_out: "model.json".into(),
            log_out: None,
            topology: TopologyChoice::Preset("shapes".into()),
            layers: None,
            sizes: vec![LayerSize { state: 100, causes: 40 }, LayerSize { state: 60, causes: 3 }],
            hyper: shapes_hyper(),
        }
    }
}

/// A validated training plan.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub topology: Topology,
    pub dims: Vec<LayerDims>,
    pub hyper: Vec<HyperParams>,
}

impl TrainConfig {
    pub fn plan(&self) -> Result<TrainPlan, ConfigError> {
        let full = self.topology.resolve()?;
        let depth = self.layers.unwrap_or(full.depth());
        let topology = full.truncated(depth).map_err(|e| bad(format!("train: {e}")))?;
        if self.sizes.len() < depth {
            return Err(bad(format!("train: {} layer sizes given, {depth} layers needed", self.sizes.len())));
        }
        if self.hyper.len() < depth {
            return Err(bad(format!("train: {} hyper tables given, {depth} layers needed", self.hyper.len())));
        }
        let mut dims = Vec::with_capacity(depth);
        for l in 0..depth {
            let below = if l == 0 { 0 } else { self.sizes[l - 1].causes };
            let d = topology
                .layer_dims(l, self.sizes[l].state, self.sizes[l].causes, below)
                .map_err(|e| bad(format!("train: layer {}: {e}", l + 1)))?;
            dims.push(d);
        }
        let hyper = self.hyper[..depth].to_vec();
        for (l, h) in hyper.iter().enumerate() {
            h.validate().map_err(|e| bad(format!("train: layer {} hyper: {e}", l + 1)))?;
        }
        Ok(TrainPlan { topology, dims, hyper })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub model: PathBuf,
    pub video: PathBuf,
    pub out: PathBuf,
    pub top_down: bool,
    /// Per-frame dump of every layer's states and causes (JSON lines).
    pub states_out: Option<PathBuf>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            model: "model.json".into(),
            video: "shapes.dpcv".into(),
            out: "causes.csv".into(),
            top_down: false,
            states_out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub out: PathBuf,
    pub runs: usize,
    pub obs_dims: Vec<usize>,
    pub state_dim: usize,
    pub active: usize,
    pub steps: usize,
    pub obs_noise_var: f64,
    pub switch_mean: f64,
    pub steady_from: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub mu: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub kalman_grid: Vec<f64>,
    pub calibration_runs: usize,
    pub methods: Vec<String>,
    /// Adds wall-clock seconds to the CSV, which makes it non-reproducible.
    pub timing: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            out: "benchmark.csv".into(),
            runs: b.runs,
            obs_dims: b.obs_dims,
            state_dim: b.sim.state_dim,
            active: b.sim.active,
            steps: b.sim.steps,
            obs_noise_var: b.sim.obs_noise_var,
            switch_mean: b.sim.switch_mean,
            steady_from: b.steady_from,
            gamma: b.gamma,
            lambda: b.hyper.lambda,
            mu: b.hyper.mu,
            max_iters: b.hyper.max_iters,
            tol: b.hyper.tol,
            kalman_grid: b.kalman_grid,
            calibration_runs: b.calibration_runs,
            methods: b.methods.iter().map(|m| m.name().to_string()).collect(),
            timing: b.timing,
        }
    }
}

impl BenchmarkConfig {
    pub fn to_bench(&self, seed: u64) -> Result<BenchConfig, ConfigError> {
        let base = BenchConfig::default();
        let methods = self
            .methods
            .iter()
            .map(|name| {
                Method::ALL
                    .into_iter()
                    .find(|m| m.name() == name)
                    .ok_or_else(|| bad(format!("benchmark: unknown method {name:?} (dpcn, sparse_coding, kalman)")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if methods.is_empty() {
            return Err(bad("benchmark: no methods selected"));
        }
        if self.runs == 0 {
            return Err(bad("benchmark: runs must be >= 1"));
        }
        if self.obs_dims.is_empty() {
            return Err(bad("benchmark: obs_dims is empty"));
        }
        if self.steady_from >= self.steps {
            return Err(bad("benchmark: steady_from must be below steps"));
        }
        let sim = SimSpec {
            state_dim: self.state_dim,
            active: self.active,
            steps: self.steps,
            obs_noise_var: self.obs_noise_var,
            switch_mean: self.switch_mean,
            ..base.sim
        };
        for &p in &self.obs_dims {
            SimSpec { obs_dim: p, ..sim }
                .validate()
                .map_err(|e| bad(format!("benchmark: P = {p}: {e}")))?;
        }
        let hyper = HyperParams {
            lambda: self.lambda,
            mu: self.mu,
            max_iters: self.max_iters,
            tol: self.tol,
            ..base.hyper
        };
        hyper.validate().map_err(|e| bad(format!("benchmark: {e}")))?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(bad("benchmark: gamma must be finite and >= 0"));
        }
        if methods.contains(&Method::Kalman) && (self.kalman_grid.is_empty() || self.calibration_runs == 0) {
            return Err(bad("benchmark: kalman needs a non-empty kalman_grid and calibration_runs >= 1"));
        }
        Ok(BenchConfig {
            sim,
            obs_dims: self.obs_dims.clone(),
            runs: self.runs,
            steady_from: self.steady_from,
            gamma: self.gamma,
            hyper,
            kalman_grid: self.kalman_grid.clone(),
            calibration_runs: self.calibration_runs,
            methods,
            seed,
            timing: self.timing,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfConfig {
    pub model: PathBuf,
    /// 1-based layer index.
    pub layer: usize,
    /// Inclusive unit range `a..b`; all units when unset.
    pub units: Option<String>,
    pub out_dir: PathBuf,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            model: "model.json".into(),
            layer: 1,
            units: None,
            out_dir: "rf".into(),
        }
    }
}

/// Parses an inclusive `a..b` range, or a single index.
pub fn parse_units(s: &str) -> Result<(usize, usize), ConfigError> {
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| bad(format!("rf: bad unit range {s:?} (expected a..b)")))
    };
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
        None => {
            let a = parse(s)?;
            (a, a)
        }
    };
    if a > b {
        return Err(bad(format!("rf: empty unit range {s:?}")));
    }
    Ok((a, b))
}
