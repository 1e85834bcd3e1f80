//! Command-line frontend: `generate`, `train`, `infer`, `benchmark` and
//! `rf`. A TOML config holds the defaults; flags override single keys.
//!
//! Exit codes: 0 on success, 1 for usage or config errors, 2 for failures
//! while running. Error lines start with `error:`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_benchmark, cmd_generate, cmd_infer, cmd_rf, cmd_train, CliError, Log};
pub use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dpcn", version, about = "Hierarchical sparse predictive coding for video")]
pub struct Cli {
    /// TOML config file; flags override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Per-batch and per-file progress on stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a bouncing-shapes video, its labels and a corrupted copy.
    Generate(GenerateArgs),
    /// Train a network layer by layer and save the model.
    Train(TrainArgs),
    /// Write per-frame top-layer causes of a video.
    Infer(InferArgs),
    /// Compare sparse state estimators on simulated dynamics.
    Benchmark(BenchmarkArgs),
    /// Export cause receptive fields as PGM images.
    Rf(RfArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub noisy_out: Option<PathBuf>,
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub frames_per_class: Option<usize>,
    /// Comma-separated glyph classes, one per segment.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u32>>,
    #[arg(long)]
    pub max_speed: Option<i64>,
    #[arg(long)]
    pub noise_mean: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub log_out: Option<PathBuf>,
    /// Preset name: shapes or natural.
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Epoch count for every layer.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use top-down cause predictions. `--top-down` alone means true.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub top_down: Option<bool>,
    #[arg(long)]
    pub states_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated observation dimensions.
    #[arg(long, value_delimiter = ',')]
    pub obs_dims: Option<Vec<usize>>,
    /// Comma-separated subset of dpcn, sparse_coding, kalman.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub steady_from: Option<usize>,
    #[arg(long)]
    pub switch_mean: Option<f64>,
    #[arg(long)]
    pub obs_noise_var: Option<f64>,
    /// Record wall-clock seconds; output is then no longer reproducible.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub timing: Option<bool>,
}

#[derive(Debug, Args)]
pub struct RfArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// 1-based layer index.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Inclusive unit range `a..b`.
    #[arg(long)]
    pub units: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Loads the config file (or defaults) and applies the flag overrides.
pub fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cfg.threads == Some(0) {
        return Err(ConfigError("threads must be >= 1".into()));
    }
    match &cli.command {
        Command::Generate(a) => {
            let g = &mut cfg.generate;
            set(&mut g.out, a.out.clone());
            if a.noisy_out.is_some() {
                g.noisy_out = a.noisy_out.clone();
            }
            if a.labels_out.is_some() {
                g.labels_out = a.labels_out.clone();
            }
            set(&mut g.width, a.width);
            set(&mut g.height, a.height);
            set(&mut g.frames_per_class, a.frames_per_class);
            set(&mut g.classes, a.classes.clone());
            set(&mut g.max_speed, a.max_speed);
            set(&mut g.noise_mean, a.noise_mean);
            g.validate()?;
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            set(&mut t.video, a.video.clone());
            set(&mut t.model_out, a.model_out.clone());
            if a.log_out.is_some() {
                t.log_out = a.log_out.clone();
            }
            if let Some(name) = &a.topology {
                t.topology = config::TopologyChoice::Preset(name.clone());
            }
            if a.layers.is_some() {
                t.layers = a.layers;
            }
            if let Some(e) = a.epochs {
                t.hyper.iter_mut().for_each(|h| h.epochs = e);
            }
            t.plan()?;
        }
        Command::Infer(a) => {
            let i = &mut cfg.infer;
            set(&mut i.model, a.model.clone());
            set(&mut i.video, a.video.clone());
            set(&mut i.out, a.out.clone());
            set(&mut i.top_down, a.top_down);
            if a.states_out.is_some() {
                i.states_out = a.states_out.clone();
            }
        }
        Command::Benchmark(a) => {
            let b = &mut cfg.benchmark;
            set(&mut b.out, a.out.clone());
            set(&mut b.runs, a.runs);
            set(&mut b.obs_dims, a.obs_dims.clone());
            set(&mut b.methods, a.methods.clone());
            set(&mut b.steps, a.steps);
            set(&mut b.steady_from, a.steady_from);
            set(&mut b.switch_mean, a.switch_mean);
            set(&mut b.obs_noise_var, a.obs_noise_var);
            set(&mut b.timing, a.timing);
            b.to_bench(cfg.seed)?;
        }
        Command::Rf(a) => {
            let r = &mut cfg.rf;
            set(&mut r.model, a.model.clone());
            set(&mut r.layer, a.layer);
            if a.units.is_some() {
                r.units = a.units.clone();
            }
            set(&mut r.out_dir, a.out_dir.clone());
            if let Some(u) = &r.units {
                config::parse_units(u)?;
            }
        }
    }
    Ok(cfg)
}

fn section_toml(cfg: &RunConfig, command: &Command) -> String {
    #[derive(serde::Serialize)]
    struct Resolved<'a, T: serde::Serialize> {
        seed: u64,
        threads: Option<usize>,
        #[serde(flatten)]
        section: std::collections::BTreeMap<&'static str, &'a T>,
    }
    fn render<T: serde::Serialize>(cfg: &RunConfig, name: &'static str, t: &T) -> String {
        let r = Resolved {
            seed: cfg.seed,
            threads: cfg.threads,
            section: [(name, t)].into_iter().collect(),
        };
        toml::to_string(&r).expect("config serializes")
    }
    match command {
        Command::Generate(_) => render(cfg, "generate", &cfg.generate),
        Command::Train(_) => render(cfg, "train", &cfg.train),
        Command::Infer(_) => render(cfg, "infer", &cfg.infer),
        Command::Benchmark(_) => render(cfg, "benchmark", &cfg.benchmark),
        Command::Rf(_) => render(cfg, "rf", &cfg.rf),
    }
}

/// Runs a parsed command against a resolved config.
pub fn execute(cfg: &RunConfig, command: &Command, log: Log) -> Result<(), CliError> {
    match command {
        Command::Generate(_) => cmd_generate(cfg, log).map(drop),
        Command::Train(_) => cmd_train(cfg, log).map(drop),
        Command::Infer(_) => cmd_infer(cfg, log).map(drop),
        Command::Benchmark(_) => cmd_benchmark(cfg, log).map(drop),
        Command::Rf(_) => cmd_rf(cfg, log).map(drop),
    }
}

/// Full CLI entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Some(n) = cfg.threads {
        // Fails only if the global pool already exists, as in repeated
        // in-process runs; the first cap then stays in force.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let log = Log { verbose: cli.verbose };
    log.info(format!("resolved config:\n{}", section_toml(&cfg, &cli.command).trim_end()));
    match execute(&cfg, &cli.command, log) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
