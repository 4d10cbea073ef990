//! JSON experiment configuration. Every field except `recipe` has a default;
//! `ExperimentConfig::schema_doc` prints them all.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eos_core::data_io::SubsetSpec;
use eos_core::spectral::AlphaMethod;
use eos_core::trainer::{PlateauStop, ProbeConfig, Schedule, SegmentOptions};
use eos_core::{MlpSpec, PolyLoss};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, PathContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    DlnPhaseMap,
    RotationTracking,
    LandscapeMovie,
    ProgressiveFlattening,
    LrSweep,
    DriverInterventions,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::DlnPhaseMap,
        Recipe::RotationTracking,
        Recipe::LandscapeMovie,
        Recipe::ProgressiveFlattening,
        Recipe::LrSweep,
        Recipe::DriverInterventions,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::DlnPhaseMap => "dln_phase_map",
            Recipe::RotationTracking => "rotation_tracking",
            Recipe::LandscapeMovie => "landscape_movie",
            Recipe::ProgressiveFlattening => "progressive_flattening",
            Recipe::LrSweep => "lr_sweep",
            Recipe::DriverInterventions => "driver_interventions",
        }
    }

    /// Whether the recipe trains the MLP on Fashion-MNIST.
    pub fn needs_data(self) -> bool {
        self != Recipe::DlnPhaseMap
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .ok_or_else(|| LabError::config(format!("unknown recipe `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding the four IDX files (raw or `.gz`).
    pub dir: PathBuf,
    pub subset: SubsetSpec,
    /// Optional `EOSD` cache prefix; `<prefix>.train.eosd` and
    /// `<prefix>.eval.eosd` are reused when present.
    pub cache: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/fashion-mnist-1200"),
            subset: SubsetSpec::default(),
            cache: None,
        }
    }
}

/// Learning rates for `lr_sweep`: an explicit list, or the geometric
/// sequence `start · factor^i` for at most `max_count` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub etas: Vec<f64>,
    pub start: f64,
    pub factor: f64,
    pub max_count: usize,
    /// Stop after the first learning rate at which every seed diverged.
    pub auto_stop: bool,
    /// Epoch cap per run; runs normally end at completion accuracy.
    pub max_epochs: usize,
    pub probe_every: usize,
    /// Learning rates compared on each side of the measured stability limit.
    pub compare: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            etas: Vec::new(),
            start: 0.01,
            factor: 1.1,
            max_count: 40,
            auto_stop: true,
            max_epochs: 20_000,
            probe_every: 50,
            compare: 3,
        }
    }
}

impl SweepConfig {
    /// The full candidate list (before any auto-stop).
    pub fn candidates(&self) -> Vec<f64> {
        if !self.etas.is_empty() {
            return self.etas.clone();
        }
        (0..self.max_count)
            .map(|i| self.start * self.factor.powi(i as i32))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlnConfig {
    pub init: [f64; 2],
    /// Coefficients of `x², x⁴, …`.
    pub loss: PolyLoss,
    pub etas: Vec<f64>,
    pub steps: usize,
    /// Samples of the `γ_β(η)` curve.
    pub gamma_points: usize,
    /// Upper end of the curve; defaults to `1.5 · η_eos`.
    pub gamma_eta_max: Option<f64>,
}

impl Default for DlnConfig {
    fn default() -> Self {
        Self {
            init: [-0.1, 10.0],
            loss: PolyLoss::quadratic(),
            etas: vec![0.001, 0.0095, 0.011, 0.013],
            steps: 3000,
            gamma_points: 400,
            gamma_eta_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    /// Probe period `T` for the similarity traces.
    pub period: usize,
    pub similarity_k: usize,
    /// The reduced rate is `reduction_factor · η`.
    pub reduction_factor: f64,
    /// Explicit reduction epochs. When empty, each of the first
    /// `auto_reductions` windows whose eigenvectors visibly rotate is cut
    /// at the first probe with subspace similarity below 0.9.
    pub reduction_epochs: Vec<usize>,
    pub auto_reductions: usize,
    /// Epochs simulated after each reduction.
    pub recovery_epochs: usize,
    /// Extra periods whose trace smoothness is compared (e.g. `[1, 2]`).
    pub compare_periods: Vec<usize>,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            period: 2,
            similarity_k: 3,
            reduction_factor: 0.2,
            reduction_epochs: Vec::new(),
            auto_reductions: 1,
            recovery_epochs: 40,
            compare_periods: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    /// Epochs to slice at; when empty, one stable→unstable→stable cycle
    /// starting after `after_epoch` is located automatically.
    pub checkpoint_epochs: Vec<usize>,
    pub after_epoch: usize,
    /// Spacing of automatically chosen epochs.
    pub stride: usize,
    /// Offsets are `max_offset · (i − c) / c` for `i = 0..count`, `c = count / 2`.
    pub max_offset: f64,
    pub offset_count: usize,
    pub with_sharpness: bool,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            checkpoint_epochs: Vec::new(),
            after_epoch: 100,
            stride: 2,
            max_offset: 0.25,
            offset_count: 21,
            with_sharpness: true,
        }
    }
}

impl LandscapeConfig {
    pub fn offsets(&self) -> Vec<f64> {
        let c = (self.offset_count / 2) as f64;
        (0..self.offset_count)
            .map(|i| if c == 0.0 { 0.0 } else { self.max_offset * (i as f64 - c) / c })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatteningConfig {
    pub eta0s: Vec<f64>,
    pub reduction_epochs: Vec<usize>,
    pub eta_small: f64,
    pub plateau: PlateauStop,
    /// Epoch cap after the reduction.
    pub max_epochs_after: usize,
    pub probe_every: usize,
}

impl Default for FlatteningConfig {
    fn default() -> Self {
        Self {
            eta0s: vec![0.03, 0.05, 0.08],
            reduction_epochs: vec![50, 100, 200],
            eta_small: 0.01,
            plateau: PlateauStop::default(),
            max_epochs_after: 1500,
            probe_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionsConfig {
    /// Epoch of the shared checkpoint all variants start from.
    pub start_epoch: usize,
    /// Epochs simulated per variant.
    pub window: usize,
    pub k: usize,
    /// Effective-stability variant uses `η_u = fraction · 2 / S(θ)`.
    pub stable_fraction: f64,
    /// Gradient-flow reference runs at `factor · η`.
    pub gradient_flow_factor: f64,
    /// Step size along the sharp directions in `restrict_to`; defaults to η.
    pub restrict_eta: Option<f64>,
    pub alpha: Option<AlphaMethod>,
}

impl Default for InterventionsConfig {
    fn default() -> Self {
        Self {
            start_epoch: 100,
            window: 80,
            k: 8,
            stable_fraction: 0.9,
            gradient_flow_factor: 0.1,
            restrict_eta: None,
            alpha: None,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_schedule() -> Schedule {
    Schedule::constant(0.03)
}

fn default_max_epochs() -> usize {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Network; the seed is replaced by each entry of `seeds`. Defaults to
    /// the 784→32×4→10 ReLU cross-entropy preset.
    #[serde(default)]
    pub model: Option<MlpSpec>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub segments: SegmentOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub dln: DlnConfig,
    #[serde(default)]
    pub rotation: RotationConfig,
    #[serde(default)]
    pub landscape: LandscapeConfig,
    #[serde(default)]
    pub flattening: FlatteningConfig,
    #[serde(default)]
    pub interventions: InterventionsConfig,
}

impl ExperimentConfig {
    pub fn new(recipe: Recipe) -> Self {
        serde_json::from_value(serde_json::json!({ "recipe": recipe })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            LabError::config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::ConfigInvalid(m) => LabError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_for_seed(&self, seed: u64) -> MlpSpec {
        let mut spec = self.model.clone().unwrap_or_else(|| MlpSpec::fmnist_default(seed));
        spec.seed = seed;
        spec
    }

    /// A fully-populated config for `recipe`, used as schema documentation.
    pub fn schema_doc(recipe: Recipe) -> String {
        let mut cfg = Self::new(recipe);
        cfg.model = Some(MlpSpec::fmnist_default(0));
        cfg.to_json()
    }

    /// Checks value ranges, reporting every problem with its field path.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                problems.push(format!("field `{field}`: {msg}"));
            }
        };
        let positive = |x: f64| x.is_finite() && x > 0.0;

        check(!self.output_dir.as_os_str().is_empty(), "output_dir", "must not be empty");
        check(!self.seeds.is_empty(), "seeds", "needs at least one seed");
        if let Err(e) = self.schedule.validate() {
            check(false, "schedule", &e.to_string());
        }
        if let Err(e) = self.probes.validate() {
            check(false, "probes", &e.to_string());
        }
        if let Some(m) = &self.model {
            if let Err(e) = m.validate() {
                check(false, "model", &e.to_string());
            }
        }
        check(
            self.segments.min_rise >= 0.0 && self.segments.min_rise.is_finite(),
            "segments.min_rise",
            "must be ≥ 0",
        );

        match self.recipe {
            Recipe::DlnPhaseMap => {
                let d = &self.dln;
                check(!d.etas.is_empty(), "dln.etas", "needs at least one learning rate");
                check(d.etas.iter().all(|&e| positive(e)), "dln.etas", "learning rates must be positive");
                check(d.steps > 0, "dln.steps", "must be positive");
                check(d.init.iter().all(|x| x.is_finite()), "dln.init", "must be finite");
                check(d.gamma_points >= 2, "dln.gamma_points", "needs at least 2 samples");
                check(
                    d.gamma_eta_max.is_none_or(positive),
                    "dln.gamma_eta_max",
                    "must be positive",
                );
            }
            Recipe::RotationTracking => {
                let r = &self.rotation;
                check(r.period >= 1, "rotation.period", "must be ≥ 1");
                check(r.similarity_k >= 1 && r.similarity_k <= 32, "rotation.similarity_k", "must be in 1..=32");
                check(
                    r.reduction_factor > 0.0 && r.reduction_factor < 1.0,
                    "rotation.reduction_factor",
                    "must be in (0, 1)",
                );
                check(r.compare_periods.iter().all(|&p| p >= 1), "rotation.compare_periods", "periods must be ≥ 1");
            }
            Recipe::LandscapeMovie => {
                let l = &self.landscape;
                check(l.offset_count % 2 == 1, "landscape.offset_count", "must be odd so the grid contains 0");
                check(positive(l.max_offset), "landscape.max_offset", "must be positive");
                check(l.stride >= 1, "landscape.stride", "must be ≥ 1");
            }
            Recipe::ProgressiveFlattening => {
                let f = &self.flattening;
                check(!f.eta0s.is_empty(), "flattening.eta0s", "needs at least one learning rate");
                check(f.eta0s.iter().all(|&e| positive(e)), "flattening.eta0s", "learning rates must be positive");
                check(!f.reduction_epochs.is_empty(), "flattening.reduction_epochs", "needs at least one epoch");
                check(positive(f.eta_small), "flattening.eta_small", "must be positive");
                check(f.probe_every >= 1, "flattening.probe_every", "must be ≥ 1");
                check(
                    f.plateau.window > 0 && f.plateau.window.is_multiple_of(f.probe_every.max(1)),
                    "flattening.plateau.window",
                    "must be a positive multiple of probe_every",
                );
            }
            Recipe::LrSweep => {
                let s = &self.sweep;
                check(s.etas.iter().all(|&e| positive(e)), "sweep.etas", "learning rates must be positive");
                if s.etas.is_empty() {
                    check(positive(s.start), "sweep.start", "must be positive");
                    check(s.factor.is_finite() && s.factor > 1.0, "sweep.factor", "must be > 1");
                    check(s.max_count >= 1, "sweep.max_count", "must be ≥ 1");
                }
                check(s.probe_every >= 1, "sweep.probe_every", "must be ≥ 1");
                check(s.compare >= 1, "sweep.compare", "must be ≥ 1");
            }
            Recipe::DriverInterventions => {
                let i = &self.interventions;
                check(i.k >= 1 && i.k <= 32, "interventions.k", "must be in 1..=32");
                check(i.window >= 3, "interventions.window", "must be ≥ 3 epochs");
                check(positive(i.stable_fraction), "interventions.stable_fraction", "must be positive");
                check(
                    i.gradient_flow_factor > 0.0 && i.gradient_flow_factor < 1.0,
                    "interventions.gradient_flow_factor",
                    "must be in (0, 1)",
                );
                check(i.restrict_eta.is_none_or(|e| e >= 0.0), "interventions.restrict_eta", "must be ≥ 0");
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::config(problems.join("; ")))
        }
    }
}
