//! The five workflows. Each takes a resolved [`RunConfig`] and writes its
//! artifacts; nothing here reads the environment or the clock unless the
//! config asks for timing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dpcn::data::{add_structured_noise, generate_shapes_video, load_video, save_video, write_labels_csv, ShapesSpec};
use dpcn::eval::benchmark_state_estimation;
use dpcn::hierarchy::{infer_sequence_full, receptive_field, receptive_field_filename, write_causes_csv, write_pgm};
use dpcn::learning::BatchReport;
use dpcn::seed::derive;
use dpcn::{load_model, save_model, train_network, Error, Network};
use ndarray::Array2;

use crate::config::{parse_units, ConfigError, RunConfig};

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage or configuration: exit code 1.
    Config(ConfigError),
    /// Failure while running: exit code 2.
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Runtime(e) => {
                write!(f, "{e}")?;
                let mut src = std::error::Error::source(e);
                while let Some(s) = src {
                    // thiserror already folds nested sources into the message
                    // for the variants that carry one; only add new text.
                    let msg = s.to_string();
                    if !e.to_string().contains(&msg) {
                        write!(f, ": {msg}")?;
                    }
                    src = s.source();
                }
                Ok(())
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Diagnostics sink. Everything goes to stderr so stdout stays parsable.
#[derive(Debug, Clone, Copy, Default)]
pub struct Log {
    pub verbose: bool,
}

impl Log {
    pub fn info(&self, msg: impl AsRef<str>) {
        eprintln!("{}", msg.as_ref());
    }

    pub fn debug(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

/// Paths written by [`cmd_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutputs {
    pub clean: PathBuf,
    pub noisy: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub frames: usize,
}

pub fn cmd_generate(cfg: &RunConfig, log: Log) -> CliResult<GenerateOutputs> {
    let g = &cfg.generate;
    g.validate()?;
    let spec = ShapesSpec {
        width: g.width,
        height: g.height,
        frames_per_class: g.frames_per_class,
        classes: g.classes.clone(),
        max_speed: g.max_speed,
        seed: derive(cfg.seed, "generate-shapes"),
    };
    let video = generate_shapes_video(&spec)?;
    ensure_parent(&g.out)?;
    save_video(&video, &g.out)?;
    log.debug(format!("wrote {} frames to {}", video.frame_count(), g.out.display()));
    if let Some(path) = &g.labels_out {
        ensure_parent(path)?;
        write_labels_csv(&video, path)?;
    }
    if let Some(path) = &g.noisy_out {
        let noisy = add_structured_noise(&video, g.noise_mean, derive(cfg.seed, "generate-noise"))?;
        ensure_parent(path)?;
        save_video(&noisy, path)?;
        log.debug(format!("wrote corrupted copy to {}", path.display()));
    }
    Ok(GenerateOutputs {
        clean: g.out.clone(),
        noisy: g.noisy_out.clone(),
        labels: g.labels_out.clone(),
        frames: video.frame_count(),
    })
}

/// Mean batch energy of each (layer, epoch), in training order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochEnergy {
    pub layer: usize,
    pub epoch: usize,
    pub mean_energy: f64,
}

fn epoch_energies(reports: &[BatchReport]) -> Vec<EpochEnergy> {
    let mut out: Vec<(EpochEnergy, usize)> = Vec::new();
    for r in reports {
        match out.last_mut() {
            Some((e, n)) if e.layer == r.layer && e.epoch == r.epoch => {
                e.mean_energy += r.mean_energy;
                *n += 1;
            }
            _ => out.push((
                EpochEnergy {
                    layer: r.layer,
                    epoch: r.epoch,
                    mean_energy: r.mean_energy,
                },
                1,
            )),
        }
    }
    out.into_iter()
        .map(|(mut e, n)| {
            e.mean_energy /= n as f64;
            e
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig, log: Log) -> CliResult<(Network, Vec<EpochEnergy>)> {
    let t = &cfg.train;
    let plan = t.plan()?;
    let video = load_video(&t.video)?;
    let mut reports = Vec::new();
    let net = train_network(
        &video,
        &plan.topology,
        &plan.dims,
        &plan.hyper,
        derive(cfg.seed, "train"),
        &mut |r: &BatchReport| {
            log.debug(r.to_tsv());
            reports.push(r.clone());
        },
    )?;
    let energies = epoch_energies(&reports);
    for e in &energies {
        log.info(format!(
            "layer {} epoch {} mean energy {:.6e}",
            e.layer + 1,
            e.epoch,
            e.mean_energy
        ));
    }
    if let Some(path) = &t.log_out {
        let mut s = String::from(BatchReport::TSV_HEADER);
        s.push('\n');
        for r in &reports {
            s.push_str(&r.to_tsv());
            s.push('\n');
        }
        ensure_parent(path)?;
        fs::write(path, s).map_err(|e| io_err(path, e))?;
    }
    ensure_parent(&t.model_out)?;
    save_model(&net, &t.model_out)?;
    Ok((net, energies))
}

/// Top-layer causes written by [`cmd_infer`], one row per frame.
pub fn cmd_infer(cfg: &RunConfig, log: Log) -> CliResult<Vec<Vec<f64>>> {
    let c = &cfg.infer;
    let net = load_model(&c.model)?;
    let video = load_video(&c.video)?;
    let (need_h, need_w) = net.topology.frame_extent();
    if !video.is_empty() && (video.width() < need_w || video.height() < need_h) {
        return Err(Error::Dimension(format!(
            "model needs {need_w}x{need_h} frames, video {} is {}x{}",
            c.video.display(),
            video.width(),
            video.height()
        ))
        .into());
    }
    let full = infer_sequence_full(&net, &video, c.top_down)?;
    let rows: Vec<Vec<f64>> = full
        .iter()
        .map(|frame| {
            frame
                .last()
                .expect("network has a layer")
                .iter()
                .flat_map(|s| s.causes.iter().copied())
                .collect()
        })
        .collect();
    ensure_parent(&c.out)?;
    let width = net.top_width();
    write_causes_csv(&Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j]), &c.out)?;
    log.debug(format!("wrote {} rows to {}", rows.len(), c.out.display()));
    if let Some(path) = &c.states_out {
        ensure_parent(path)?;
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (t, frame) in full.iter().enumerate() {
            let layers: Vec<Vec<serde_json::Value>> = frame
                .iter()
                .map(|blocks| {
                    blocks
                        .iter()
                        .map(|s| {
                            serde_json::json!({
                                "states": s.states.iter().map(|x| x.to_vec()).collect::<Vec<_>>(),
                                "causes": s.causes.to_vec(),
                            })
                        })
                        .collect()
                })
                .collect();
            let line = serde_json::json!({ "frame": t, "layers": layers });
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(rows)
}

pub fn cmd_benchmark(cfg: &RunConfig, log: Log) -> CliResult<dpcn::eval::BenchResult> {
    let b = &cfg.benchmark;
    let bench = b.to_bench(derive(cfg.seed, "benchmark"))?;
    let result = benchmark_state_estimation(&bench)?;
    for r in &result.rows {
        log.info(format!(
            "{:<13} P={:<4} rmse {:.4} ± {:.4}",
            r.method.name(),
            r.obs_dim,
            r.rmse_mean,
            r.rmse_std
        ));
    }
    ensure_parent(&b.out)?;
    fs::write(&b.out, result.to_csv()).map_err(|e| io_err(&b.out, e))?;
    Ok(result)
}

/// Writes one PGM per selected unit and returns the paths in unit order.
pub fn cmd_rf(cfg: &RunConfig, log: Log) -> CliResult<Vec<PathBuf>> {
    let r = &cfg.rf;
    let range = r.units.as_deref().map(parse_units).transpose()?;
    if r.layer == 0 {
        return Err(ConfigError("rf: layers are numbered from 1".into()).into());
    }
    let net = load_model(&r.model)?;
    if r.layer > net.depth() {
        return Err(Error::Index(format!("layer {} of a {}-layer model", r.layer, net.depth())).into());
    }
    let l = r.layer - 1;
    let causes = net.dims()[l].causes;
    let (a, b) = range.unwrap_or((0, causes - 1));
    if b >= causes {
        return Err(Error::Index(format!("unit {b} of layer {} with {causes} causes", r.layer)).into());
    }
    fs::create_dir_all(&r.out_dir).map_err(|e| io_err(&r.out_dir, e))?;
    let mut paths = Vec::with_capacity(b - a + 1);
    for u in a..=b {
        let img = receptive_field(&net, l, u)?;
        let path = r.out_dir.join(receptive_field_filename(l, u));
        write_pgm(&img, &path)?;
        paths.push(path);
    }
    log.debug(format!("wrote {} receptive fields to {}", paths.len(), r.out_dir.display()));
    Ok(paths)
}
