//! Deterministic full-batch gradient descent with learning-rate schedules,
//! directional step-size interventions, spectral probes and phase segmentation.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::objective::Objective;
use crate::spectral::{
    self, eigvec_similarity, sharpening_factor, AlphaMethod, LanczosOptions, Spectrum,
};
use crate::{Error, Result};

/// `‖θ‖` beyond which a run counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e8;
/// Trailing window used for the mean oscillation parameters `θ*`.
pub const OSC_WINDOW: usize = 4;
pub const COMPLETION_ACCURACY: f64 = 0.9999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        eta0: f64,
    },
    /// Linear ramp `eta0 · (t + 1) / warmup_epochs`, then `eta0`.
    WarmupThenConstant {
        eta0: f64,
        warmup_epochs: usize,
    },
    /// `eta0` before `epoch`, `eta_small` from `epoch` on.
    ReduceAtEpoch {
        eta0: f64,
        eta_small: f64,
        epoch: usize,
    },
    /// Switches to `eta_small` for every step after the first epoch whose
    /// training accuracy reaches `accuracy`.
    ReduceAtTrainAcc {
        eta0: f64,
        eta_small: f64,
        accuracy: f64,
    },
}

impl Schedule {
    pub fn constant(eta0: f64) -> Self {
        Schedule::Constant { eta0 }
    }

    pub fn eta0(&self) -> f64 {
        match *self {
            Schedule::Constant { eta0 }
            | Schedule::WarmupThenConstant { eta0, .. }
            | Schedule::ReduceAtEpoch { eta0, .. }
            | Schedule::ReduceAtTrainAcc { eta0, .. } => eta0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64, name: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive and finite, got {x}")))
            }
        };
        positive(self.eta0(), "eta0")?;
        match *self {
            Schedule::Constant { .. } => Ok(()),
            Schedule::WarmupThenConstant { warmup_epochs, .. } => {
                if warmup_epochs == 0 {
                    Err(Error::InvalidInput("warmup_epochs must be at least 1".into()))
                } else {
                    Ok(())
                }
            }
            Schedule::ReduceAtEpoch { eta_small, .. } => positive(eta_small, "eta_small"),
            Schedule::ReduceAtTrainAcc {
                eta_small, accuracy, ..
            } => {
                positive(eta_small, "eta_small")?;
                if (0.0..=1.0).contains(&accuracy) {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!("accuracy trigger {accuracy} outside [0, 1]")))
                }
            }
        }
    }

    /// Step size for `epoch`; `triggered` reports whether an accuracy
    /// trigger fired at an earlier epoch.
    pub fn eta(&self, epoch: usize, triggered: bool) -> f64 {
        match *self {
            Schedule::Constant { eta0 } => eta0,
            Schedule::WarmupThenConstant {
                eta0,
                warmup_epochs,
            } => {
                if epoch < warmup_epochs {
                    eta0 * (epoch + 1) as f64 / warmup_epochs as f64
                } else {
                    eta0
                }
            }
            Schedule::ReduceAtEpoch {
                eta0,
                eta_small,
                epoch: at,
            } => {
                if epoch < at {
                    eta0
                } else {
                    eta_small
                }
            }
            Schedule::ReduceAtTrainAcc {
                eta0, eta_small, ..
            } => {
                if triggered {
                    eta_small
                } else {
                    eta0
                }
            }
        }
    }

    fn accuracy_trigger(&self) -> Option<f64> {
        match *self {
            Schedule::ReduceAtTrainAcc { accuracy, .. } => Some(accuracy),
            _ => None,
        }
    }
}

/// `θ − η g`.
pub fn gd_step(params: &[f64], gradient: &[f64], eta: f64) -> Result<Vec<f64>> {
    let out: Vec<f64> = params.iter().zip(gradient).map(|(p, g)| p - eta * g).collect();
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("gradient step".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionalMode {
    /// `θ − η_base·g_perp − η_u·g_sharp`.
    Suppress,
    /// `θ − η_u·g_sharp`: updates only along the sharp directions.
    RestrictTo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalEta {
    pub eta_base: f64,
    pub eta_unstable: f64,
    /// Number of top eigendirections treated as sharp.
    pub k: usize,
    pub mode: DirectionalMode,
}

impl DirectionalEta {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if !(self.eta_unstable >= 0.0 && self.eta_unstable.is_finite()) {
            return Err(Error::InvalidInput("eta_unstable must be ≥ 0".into()));
        }
        if !(self.eta_base > 0.0 && self.eta_base.is_finite()) {
            return Err(Error::InvalidInput("eta_base must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient step with separate step sizes along and across the top-`k`
/// eigenvectors of `spectrum` (assumed orthonormal).
pub fn directional_gd_step(
    params: &[f64],
    gradient: &[f64],
    spectrum: &Spectrum,
    cfg: &DirectionalEta,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spectrum.len() < cfg.k {
        return Err(Error::InvalidInput(format!(
            "need {} eigenvectors, spectrum has {}",
            cfg.k,
            spectrum.len()
        )));
    }
    if spectrum.dim() != params.len() {
        return Err(Error::DimensionMismatch {
            left: params.len(),
            right: spectrum.dim(),
        });
    }
    let mut sharp = vec![0.0; gradient.len()];
    for pair in &spectrum.pairs[..cfg.k] {
        linalg::axpy(linalg::dot(gradient, &pair.vector), &pair.vector, &mut sharp);
    }
    let out: Vec<f64> = match cfg.mode {
        DirectionalMode::Suppress => params
            .iter()
            .zip(gradient)
            .zip(&sharp)
            .map(|((p, g), s)| p - cfg.eta_base * (g - s) - cfg.eta_unstable * s)
            .collect(),
        DirectionalMode::RestrictTo => params
            .iter()
            .zip(&sharp)
            .map(|(p, s)| p - cfg.eta_unstable * s)
            .collect(),
    };
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("directional step".into()))
    }
}

/// `‖θ_current − mean(window)‖`, where the window ends with the current
/// parameters. A window shorter than two entries has distance zero.
pub fn oscillation_distance(window: &[&[f64]]) -> f64 {
    let Some(current) = window.last() else {
        return 0.0;
    };
    if window.len() < 2 {
        return 0.0;
    }
    let inv = 1.0 / window.len() as f64;
    let mut mean = vec![0.0; current.len()];
    for w in window {
        linalg::axpy(inv, w, &mut mean);
    }
    current
        .iter()
        .zip(&mean)
        .map(|(c, m)| (c - m) * (c - m))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Probe cadence in epochs.
    pub every: usize,
    /// Eigenpairs per probe; 1 tracks sharpness only.
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Eigenvectors compared against the baseline (`eigsim_1..`); 0 disables.
    pub similarity_k: usize,
    /// Epochs at which the similarity baseline is re-captured.
    pub snapshot_starts: Vec<usize>,
    pub alpha: Option<AlphaMethod>,
    pub alpha_step: f64,
    /// Keep each probe's spectrum (with eigenvectors) in the outcome.
    pub keep_spectra: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            every: 1,
            k: 1,
            tol: 1e-6,
            max_iter: 300,
            seed: 0,
            similarity_k: 0,
            snapshot_starts: Vec::new(),
            alpha: None,
            alpha_step: 1e-4,
            keep_spectra: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.every == 0 {
            return Err(Error::InvalidInput("probe cadence must be at least 1 epoch".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidInput("probe k must be at least 1".into()));
        }
        if self.similarity_k > self.k {
            return Err(Error::InvalidInput(format!(
                "similarity_k = {} exceeds probe k = {}",
                self.similarity_k, self.k
            )));
        }
        Ok(())
    }

    fn lanczos(&self, k: usize, epoch: usize) -> LanczosOptions {
        LanczosOptions {
            k,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            stream: epoch as u64,
            check_symmetry: epoch == 0,
        }
    }
}

/// How the sharp-direction step size is chosen during an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UnstableEta {
    Fixed { eta: f64 },
    /// `η_u = fraction · 2 / S(θ)`, refreshed with the spectrum.
    StableFraction { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intervention {
    pub mode: DirectionalMode,
    pub k: usize,
    pub eta_unstable: UnstableEta,
    pub start_epoch: usize,
    /// Exclusive; `None` keeps the intervention on until the end.
    #[serde(default)]
    pub end_epoch: Option<usize>,
}

impl Intervention {
    fn active(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch && self.end_epoch.is_none_or(|e| epoch < e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub max_epochs: usize,
    pub probes: ProbeConfig,
    /// Stop once training accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    pub intervention: Option<Intervention>,
    /// Epochs whose parameters are kept in the outcome.
    pub checkpoint_epochs: Vec<usize>,
    pub plateau: Option<PlateauStop>,
}

/// Stops a run once sharpness settles: at a probe epoch `t ≥ after_epoch +
/// window` with a probe at `t − window`, `|S(t) − S(t − window)| ≤ rel_tol · S(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauStop {
    pub window: usize,
    pub rel_tol: f64,
    pub after_epoch: usize,
}

impl Default for PlateauStop {
    fn default() -> Self {
        Self {
            window: 50,
            rel_tol: 0.01,
            after_epoch: 0,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::constant(0.01),
            max_epochs: 100,
            probes: ProbeConfig::default(),
            stop_at_train_acc: None,
            intervention: None,
            checkpoint_epochs: Vec::new(),
            plateau: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.probes.validate()?;
        if let Some(p) = &self.plateau {
            if p.window == 0 || p.window % self.probes.every != 0 {
                return Err(Error::InvalidInput(
                    "plateau window must be a positive multiple of the probe cadence".into(),
                ));
            }
            if !(p.rel_tol >= 0.0) {
                return Err(Error::InvalidInput("plateau tolerance must be ≥ 0".into()));
            }
        }
        if let Some(iv) = &self.intervention {
            if iv.k == 0 || iv.k > 32 {
                return Err(Error::InvalidInput("intervention k must be in 1..=32".into()));
            }
            match iv.eta_unstable {
                UnstableEta::Fixed { eta } if !(eta >= 0.0 && eta.is_finite()) => {
                    return Err(Error::InvalidInput("intervention eta must be ≥ 0".into()))
                }
                UnstableEta::StableFraction { fraction } if !(fraction >= 0.0 && fraction.is_finite()) => {
                    return Err(Error::InvalidInput("stable fraction must be ≥ 0".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Loss at the parameters entering this epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub sharpness: Option<f64>,
    pub grad_norm: f64,
    pub osc_dist: Option<f64>,
    pub alpha: Option<f64>,
    pub eigsim: Option<Vec<f64>>,
    pub subspace_sim: Option<f64>,
    /// Step size applied to leave this epoch's parameters (the base step
    /// size during an intervention).
    pub eta_used: f64,
    /// Top-`k` eigenvalues at probe epochs.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Ran to `max_epochs`.
    Finished,
    /// Reached the requested training accuracy.
    Completed,
    /// Sharpness stopped changing (see [`PlateauStop`]).
    Plateaued,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub status: RunStatus,
    /// Number of `eigsim_*` columns.
    pub similarity_k: usize,
    pub probe_every: usize,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.10e}")).unwrap_or_default()
}

impl TrajectoryLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,sharpness,grad_norm,osc_dist,alpha,");
        for i in 1..=self.similarity_k {
            let _ = write!(s, "eigsim_{i},");
        }
        s.push_str("subspace_sim,eta_used\n");
        for r in &self.records {
            let _ = write!(
                s,
                "{},{:.10e},{:.6},{},{:.10e},{},{},",
                r.epoch,
                r.loss,
                r.train_acc,
                opt(r.sharpness),
                r.grad_norm,
                opt(r.osc_dist),
                opt(r.alpha)
            );
            for i in 0..self.similarity_k {
                let v = r.eigsim.as_ref().and_then(|e| e.get(i).copied());
                let _ = write!(s, "{},", opt(v));
            }
            let _ = writeln!(s, "{},{:.10e}", opt(r.subspace_sim), r.eta_used);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// `(epoch, value)` for every probed sharpness.
    pub fn sharpness(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.sharpness.map(|s| (r.epoch, s)))
            .collect()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: TrajectoryLog,
    /// Parameters after the last successful step.
    pub params: Vec<f64>,
    pub checkpoints: Vec<(usize, Vec<f64>)>,
    /// Probe spectra, when `keep_spectra` is set.
    pub spectra: Vec<(usize, Spectrum)>,
}

/// Runs full-batch gradient descent from `init`.
///
/// Divergence (non-finite loss or `‖θ‖ > 1e8`) ends the run with
/// [`RunStatus::Diverged`]; the log up to that point is kept.
pub fn train(obj: &dyn Objective, init: Vec<f64>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.len() != obj.dim() {
        return Err(Error::DimensionMismatch {
            left: init.len(),
            right: obj.dim(),
        });
    }
    let probes = &cfg.probes;
    let mut params = init;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut spectra = Vec::new();
    let mut window: VecDeque<Vec<f64>> = VecDeque::with_capacity(OSC_WINDOW);
    let mut baseline: Option<Spectrum> = None;
    let mut warm: Option<Vec<f64>> = None;
    let mut triggered = false;
    let mut status = RunStatus::Finished;
    let acc_trigger = cfg.schedule.accuracy_trigger();
    let intervention_k = cfg.intervention.as_ref().map_or(0, |iv| iv.k);
    let mut sharpness_at: Vec<(usize, f64)> = Vec::new();

    for epoch in 0..=cfg.max_epochs {
        let eval = obj.evaluate(&params);
        let train_acc = eval.accuracy.unwrap_or(f64::NAN);
        let pnorm = linalg::norm(&params);
        if !eval.loss.is_finite() || !(pnorm <= DIVERGENCE_NORM) {
            status = RunStatus::Diverged { epoch };
            break;
        }
        if cfg.checkpoint_epochs.contains(&epoch) {
            checkpoints.push((epoch, params.clone()));
        }

        if window.len() == OSC_WINDOW {
            window.pop_front();
        }
        window.push_back(params.clone());
        let osc_dist = (window.len() == OSC_WINDOW).then(|| {
            let refs: Vec<&[f64]> = window.iter().map(|w| w.as_slice()).collect();
            oscillation_distance(&refs)
        });

        let active = cfg.intervention.as_ref().filter(|iv| iv.active(epoch));
        let probing = epoch % probes.every == 0;
        let need_k = if active.is_some() {
            intervention_k.max(if probing { probes.k } else { 0 })
        } else if probing {
            probes.k
        } else {
            0
        };
        let spectrum = if need_k > 0 && epoch < cfg.max_epochs || probing {
            let k = need_k.max(1).min(obj.dim());
            let op = obj.hessian_operator(&params);
            let s = spectral::top_k_eigen_lenient(&op, &probes.lanczos(k, epoch), warm.as_deref())?;
            warm = s.pairs.first().map(|p| p.vector.clone());
            Some(s)
        } else {
            None
        };

        let mut rec = StepRecord {
            epoch,
            loss: eval.loss,
            train_acc,
            sharpness: None,
            grad_norm: linalg::norm(&eval.gradient),
            osc_dist,
            alpha: None,
            eigsim: None,
            subspace_sim: None,
            eta_used: cfg.schedule.eta(epoch, triggered),
            lambdas: None,
        };

        if probing {
            let s = spectrum.as_ref().expect("probe epochs compute a spectrum");
            rec.sharpness = s.top();
            rec.lambdas = Some(s.lambdas().into_iter().take(probes.k).collect());
            if probes.similarity_k > 0 {
                if probes.snapshot_starts.contains(&epoch) {
                    baseline = Some(s.clone());
                }
                if let Some(b) = &baseline {
                    let kk = probes.similarity_k.min(s.len()).min(b.len());
                    if kk > 0 {
                        let sim = eigvec_similarity(b, s, kk)?;
                        rec.eigsim = Some(sim.per_vector);
                        rec.subspace_sim = Some(sim.subspace);
                    }
                }
            }
            if let Some(method) = probes.alpha {
                let one = probes.lanczos(1, epoch);
                match sharpening_factor(obj, &params, s, method, probes.alpha_step, &one) {
                    Ok(a) => rec.alpha = Some(a.alpha),
                    Err(Error::ZeroGradient(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if probes.keep_spectra {
                spectra.push((epoch, s.clone()));
            }
        }

        let mut plateaued = false;
        if let (Some(p), Some(sh)) = (&cfg.plateau, rec.sharpness) {
            if epoch >= p.after_epoch + p.window {
                let then = sharpness_at
                    .iter()
                    .rev()
                    .find(|(e, _)| *e == epoch - p.window)
                    .map(|&(_, s)| s);
                plateaued = then.is_some_and(|then| (sh - then).abs() <= p.rel_tol * sh.abs());
            }
            sharpness_at.push((epoch, sh));
        }
        let completed = cfg.stop_at_train_acc.is_some_and(|t| train_acc >= t);
        let done = epoch == cfg.max_epochs || completed || plateaued;
        if !done {
            if let Some(t) = acc_trigger {
                if train_acc >= t {
                    triggered = true;
                    rec.eta_used = cfg.schedule.eta(epoch, triggered);
                }
            }
        }
        let eta = rec.eta_used;
        records.push(rec);
        if done {
            if completed {
                status = RunStatus::Completed;
            } else if plateaued {
                status = RunStatus::Plateaued;
            }
            break;
        }

        let next = match active {
            Some(iv) => {
                let s = spectrum.as_ref().expect("interventions compute a spectrum");
                let eta_u = match iv.eta_unstable {
                    UnstableEta::Fixed { eta } => eta,
                    UnstableEta::StableFraction { fraction } => {
                        fraction * 2.0 / s.top().unwrap_or(f64::INFINITY).max(f64::MIN_POSITIVE)
                    }
                };
                let d = DirectionalEta {
                    eta_base: eta,
                    eta_unstable: eta_u,
                    k: iv.k.min(s.len()),
                    mode: iv.mode,
                };
                if d.mode == DirectionalMode::Suppress && d.eta_unstable == d.eta_base {
                    gd_step(&params, &eval.gradient, eta)
                } else {
                    directional_gd_step(&params, &eval.gradient, s, &d)
                }
            }
            None => gd_step(&params, &eval.gradient, eta),
        };
        match next {
            Ok(p) => params = p,
            Err(Error::NonFinite(_)) => {
                status = RunStatus::Diverged { epoch: epoch + 1 };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(TrainOutcome {
        log: TrajectoryLog {
            records,
            status,
            similarity_k: probes.similarity_k,
            probe_every: probes.every,
        },
        params,
        checkpoints,
        spectra,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    Stable,
    Unstable,
}

impl PhaseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseLabel::Stable => "stable",
            PhaseLabel::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegment {
    pub start_epoch: usize,
    /// Inclusive.
    pub end_epoch: usize,
    pub label: PhaseLabel,
    /// Largest raw `osc_dist` inside the segment.
    pub peak_osc: f64,
}

/// Turning-point detection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentOptions {
    /// Width of the centered moving average.
    pub smoothing: usize,
    /// Relative hysteresis: a trough only becomes a turning point once the
    /// smoothed signal climbs to `(1 + min_rise)` times it, and a peak once
    /// the signal falls below `peak / (1 + min_rise)`. Zero keeps every
    /// strict local extremum.
    pub min_rise: f64,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            smoothing: 3,
            min_rise: 0.1,
        }
    }
}

fn centered_average(values: &[f64], smoothing: usize) -> Vec<f64> {
    let n = values.len();
    let w = smoothing.max(1);
    let (left, right) = ((w - 1) / 2, w / 2);
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Splits a series at the turning points of its centered moving average;
/// rising runs are unstable, falling or flat runs stable.
///
/// A trough belongs to the stable run before it and a peak ends the unstable
/// run leading up to it. Plateaus resolve toward stable; the first point
/// takes the label of the run it starts.
pub fn segment_series(epochs: &[usize], values: &[f64], smoothing: usize) -> Result<Vec<PhaseSegment>> {
    segment_series_with(
        epochs,
        values,
        &SegmentOptions {
            smoothing,
            min_rise: 0.0,
        },
    )
}

pub fn segment_series_with(epochs: &[usize], values: &[f64], opts: &SegmentOptions) -> Result<Vec<PhaseSegment>> {
    let n = values.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    if epochs.len() != n {
        return Err(Error::DimensionMismatch {
            left: epochs.len(),
            right: n,
        });
    }
    if !(opts.min_rise >= 0.0 && opts.min_rise.is_finite()) {
        return Err(Error::InvalidInput("min_rise must be a finite value ≥ 0".into()));
    }
    let s = centered_average(values, opts.smoothing);
    let factor = 1.0 + opts.min_rise;

    // Indices where the label switches: the point after a confirmed trough
    // starts an unstable run, the point after a confirmed peak a stable one.
    let mut labels = vec![PhaseLabel::Stable; n];
    let mut rising = false;
    let mut ext = 0usize;
    let mut last_turn = 0usize;
    for i in 1..n {
        if rising {
            if s[i] > s[ext] {
                ext = i;
            } else if s[i] * factor <= s[ext] {
                labels[last_turn + 1..=ext].fill(PhaseLabel::Unstable);
                last_turn = ext;
                rising = false;
                ext = i;
            }
        } else if s[i] <= s[ext] {
            ext = i;
        } else if s[i] > s[ext] * factor {
            last_turn = ext;
            rising = true;
            ext = i;
        }
    }
    if rising {
        labels[last_turn + 1..=ext].fill(PhaseLabel::Unstable);
    }
    // The first point has no incoming interval; it joins the one after it.
    labels[0] = labels[1];

    let mut segments: Vec<PhaseSegment> = Vec::new();
    for i in 0..n {
        match segments.last_mut() {
            Some(seg) if seg.label == labels[i] => {
                seg.end_epoch = epochs[i];
                seg.peak_osc = seg.peak_osc.max(values[i]);
            }
            _ => segments.push(PhaseSegment {
                start_epoch: epochs[i],
                end_epoch: epochs[i],
                label: labels[i],
                peak_osc: values[i],
            }),
        }
    }
    Ok(segments)
}

/// Phase segmentation of a log's `osc_dist` column (probes without a value
/// are skipped), keeping every strict turning point.
pub fn segment_phases(log: &TrajectoryLog, smoothing: usize) -> Result<Vec<PhaseSegment>> {
    segment_phases_with(
        log,
        &SegmentOptions {
            smoothing,
            min_rise: 0.0,
        },
    )
}

pub fn segment_phases_with(log: &TrajectoryLog, opts: &SegmentOptions) -> Result<Vec<PhaseSegment>> {
    let (epochs, values): (Vec<usize>, Vec<f64>) = log
        .records
        .iter()
        .filter_map(|r| r.osc_dist.map(|d| (r.epoch, d)))
        .unzip();
    segment_series_with(&epochs, &values, opts)
}

pub fn segments_to_csv(segments: &[PhaseSegment]) -> String {
    let mut s = String::from("start,end,label,peak_osc\n");
    for seg in segments {
        let _ = writeln!(
            s,
            "{},{},{},{:.10e}",
            seg.start_epoch,
            seg.end_epoch,
            seg.label.as_str(),
            seg.peak_osc
        );
    }
    s
}

pub fn write_segments_csv(segments: &[PhaseSegment], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(segments_to_csv(segments).as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub offset: f64,
    pub loss: f64,
    pub sharpness: Option<f64>,
}

/// Loss (and optionally sharpness) at `θ + s·d̂` for each offset `s`.
pub fn landscape_slice(
    obj: &dyn Objective,
    params: &[f64],
    direction: &[f64],
    offsets: &[f64],
    sharpness: Option<&LanczosOptions>,
) -> Result<Vec<SliceRow>> {
    if direction.len() != params.len() {
        return Err(Error::DimensionMismatch {
            left: params.len(),
            right: direction.len(),
        });
    }
    let dnorm = linalg::norm(direction);
    if !(dnorm > 0.0 && dnorm.is_finite()) {
        return Err(Error::InvalidInput("slice direction must be nonzero".into()));
    }
    if offsets.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("offsets must be finite".into()));
    }
    let unit: Vec<f64> = direction.iter().map(|d| d / dnorm).collect();
    offsets
        .iter()
        .map(|&s| {
            let theta: Vec<f64> = params.iter().zip(&unit).map(|(p, u)| p + s * u).collect();
            let loss = obj.loss(&theta);
            let sharp = match sharpness {
                Some(opts) => {
                    let one = LanczosOptions { k: 1, ..opts.clone() };
                    let op = obj.hessian_operator(&theta);
                    spectral::top_k_eigen_lenient(&op, &one, None)?.top()
                }
                None => None,
            };
            Ok(SliceRow {
                offset: s,
                loss,
                sharpness: sharp,
            })
        })
        .collect()
}

pub fn slice_to_csv(rows: &[SliceRow]) -> String {
    let mut s = String::from("offset,loss,sharpness\n");
    for r in rows {
        let _ = writeln!(s, "{:.10e},{:.10e},{}", r.offset, r.loss, opt(r.sharpness));
    }
    s
}
