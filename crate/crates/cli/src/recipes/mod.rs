//! Experiment recipes. Each module exposes a pure `compute` step returning
//! typed results and a `run` step that writes CSV/SVG artifacts.

use std::path::PathBuf;

use eos_core::trainer::{self, TrainConfig, TrainOutcome, TrajectoryLog};
use eos_core::{Mlp, MlpObjective, MlpSpec};
use rayon::ThreadPool;

use crate::config::{ExperimentConfig, Recipe};
use crate::data::{self, ExperimentData};
use crate::error::{LabError, Result};
use crate::manifest::{unix_now, Artifact, ArtifactWriter, RunEntry, RunManifest};
use crate::svg::LineChart;

pub mod dln_phase_map;
pub mod driver_interventions;
pub mod landscape_movie;
pub mod lr_sweep;
pub mod progressive_flattening;
pub mod rotation_tracking;

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: ArtifactWriter,
    pub pool: ThreadPool,
    pub data: Option<ExperimentData>,
}

impl Context<'_> {
    pub fn data(&self) -> Result<&ExperimentData> {
        self.data
            .as_ref()
            .ok_or_else(|| LabError::config(format!("recipe {} needs a dataset", self.cfg.recipe)))
    }

    pub fn write_str(&self, rel: &str, text: &str) -> Result<Artifact> {
        self.out.write(rel, text.as_bytes())
    }

    /// Renders a chart built from CSVs already written.
    pub fn write_svg(&self, rel: &str, chart: &LineChart) -> Result<Artifact> {
        self.out.write(rel, chart.render().as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            output_dir: None,
        }
    }
}

/// Trains the configured MLP from its seeded initialization (or `init`).
pub fn train_mlp(
    data: &ExperimentData,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    init: Option<Vec<f64>>,
) -> Result<(Mlp, TrainOutcome)> {
    let mlp = Mlp::new(spec.clone())?;
    let obj = MlpObjective::new(&mlp, &data.train_batch)?;
    let init = init.unwrap_or_else(|| mlp.init_params());
    let out = trainer::train(&obj, init, cfg)?;
    Ok((mlp, out))
}

/// Keeps only probe epochs (and the final record) to bound CSV size.
pub fn thin_log(log: &TrajectoryLog) -> TrajectoryLog {
    let last = log.records.last().map(|r| r.epoch);
    let mut thin = log.clone();
    thin.records
        .retain(|r| r.sharpness.is_some() || Some(r.epoch) == last);
    thin
}

pub fn fmt_eta(eta: f64) -> String {
    format!("{eta:.6}").trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Dispatches `cfg.recipe` and writes `manifest.txt` next to the artifacts.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let started = unix_now();
    let out_dir = opts.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let out = ArtifactWriter::new(&out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| LabError::config(format!("worker pool: {e}")))?;
    let data = if cfg.recipe.needs_data() {
        let d = data::load(&cfg.dataset)?;
        for w in &d.warnings {
            eprintln!("warning: {w}");
        }
        Some(d)
    } else {
        None
    };
    let ctx = Context {
        cfg,
        out,
        pool,
        data,
    };
    let config_artifact = ctx.write_str("config.json", &cfg.to_json())?;
    let mut runs: Vec<RunEntry> = match cfg.recipe {
        Recipe::DlnPhaseMap => dln_phase_map::run(&ctx)?,
        Recipe::RotationTracking => rotation_tracking::run(&ctx)?,
        Recipe::LandscapeMovie => landscape_movie::run(&ctx)?,
        Recipe::ProgressiveFlattening => progressive_flattening::run(&ctx)?,
        Recipe::LrSweep => lr_sweep::run(&ctx)?,
        Recipe::DriverInterventions => driver_interventions::run(&ctx)?,
    };
    if let Some(first) = runs.first_mut() {
        first.artifacts.insert(0, config_artifact);
    }
    let mut metadata = vec![("workers".to_string(), opts.workers.max(1).to_string())];
    if let Some(d) = &ctx.data {
        metadata.extend(d.metadata.iter().cloned());
    }
    let manifest = RunManifest {
        recipe: cfg.recipe.to_string(),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        metadata,
        runs,
    };
    manifest.write(ctx.out.root())?;
    Ok(manifest)
}
