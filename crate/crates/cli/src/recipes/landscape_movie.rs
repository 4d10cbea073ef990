//! Loss and sharpness along the gradient direction at checkpoints through
//! one instability cycle.

use std::fmt::Write as _;

use eos_core::linalg;
use eos_core::spectral::LanczosOptions;
use eos_core::trainer::{self, PhaseLabel, ProbeConfig, SliceRow, TrainConfig, TrajectoryLog};
use eos_core::{MlpObjective, Objective};

use super::{Context, train_mlp};
use crate::config::ExperimentConfig;
use crate::data::ExperimentData;
use crate::error::{LabError, Result};
use crate::manifest::{RunEntry, RunOutcome};
use crate::svg::chart_from_csv;

/// Upper bound on automatically chosen frames.
pub const MAX_AUTO_FRAMES: usize = 40;

#[derive(Debug, Clone)]
pub struct Frame {
    pub epoch: usize,
    pub logged_loss: f64,
    pub logged_sharpness: Option<f64>,
    /// Offset of the previous epoch's parameters along this slice direction.
    pub prev_offset: Option<f64>,
    pub rows: Vec<SliceRow>,
}

#[derive(Debug, Clone)]
pub struct Movie {
    pub eta: f64,
    pub log: TrajectoryLog,
    pub frames: Vec<Frame>,
}

/// Epochs spanning the first stable→unstable→stable cycle whose unstable
/// phase starts at or after `after`.
pub fn cycle_epochs(segments: &[trainer::PhaseSegment], after: usize, stride: usize) -> Option<Vec<usize>> {
    let i = segments
        .iter()
        .position(|s| s.label == PhaseLabel::Unstable && s.start_epoch >= after)?;
    let next = segments.get(i + 1)?;
    let start = if i > 0 { segments[i - 1].start_epoch } else { segments[i].start_epoch };
    let end = next.end_epoch;
    let mut epochs: Vec<usize> = (start..=end).step_by(stride.max(1)).collect();
    if epochs.len() > MAX_AUTO_FRAMES {
        let n = epochs.len();
        epochs = (0..MAX_AUTO_FRAMES).map(|j| epochs[j * (n - 1) / (MAX_AUTO_FRAMES - 1)]).collect();
        epochs.dedup();
    }
    Some(epochs)
}

pub fn compute(data: &ExperimentData, cfg: &ExperimentConfig, seed: u64) -> Result<Movie> {
    let l = &cfg.landscape;
    let spec = cfg.model_for_seed(seed);
    let probes = ProbeConfig {
        k: 1,
        similarity_k: 0,
        ..cfg.probes.clone()
    };
    let epochs = if l.checkpoint_epochs.is_empty() {
        let scout = TrainConfig {
            schedule: cfg.schedule.clone(),
            max_epochs: cfg.max_epochs,
            probes: probes.clone(),
            ..Default::default()
        };
        let (_, out) = train_mlp(data, &spec, &scout, None)?;
        let segs = trainer::segment_phases_with(&out.log, &cfg.segments)?;
        cycle_epochs(&segs, l.after_epoch, l.stride).ok_or_else(|| LabError::MissingCheckpoints {
            epochs: Vec::new(),
            last_epoch: out.log.last().map_or(0, |r| r.epoch),
        })?
    } else {
        l.checkpoint_epochs.clone()
    };

    let mut keep: Vec<usize> = epochs.iter().flat_map(|&e| [e.saturating_sub(1), e]).collect();
    keep.sort_unstable();
    keep.dedup();
    let max_epoch = *epochs.iter().max().unwrap_or(&0);
    let tc = TrainConfig {
        schedule: cfg.schedule.clone(),
        max_epochs: max_epoch.max(1),
        probes: ProbeConfig { every: 1, ..probes },
        checkpoint_epochs: keep,
        ..Default::default()
    };
    let (mlp, out) = train_mlp(data, &spec, &tc, None)?;
    let missing: Vec<usize> = epochs
        .iter()
        .copied()
        .filter(|e| !out.checkpoints.iter().any(|(c, _)| c == e))
        .collect();
    if !missing.is_empty() {
        return Err(LabError::MissingCheckpoints {
            epochs: missing,
            last_epoch: out.log.last().map_or(0, |r| r.epoch),
        });
    }

    let obj = MlpObjective::new(&mlp, &data.train_batch)?;
    let lanczos = LanczosOptions {
        k: 1,
        tol: cfg.probes.tol,
        max_iter: cfg.probes.max_iter,
        seed: cfg.probes.seed,
        stream: 0,
        check_symmetry: false,
    };
    let offsets = l.offsets();
    let mut frames = Vec::new();
    for &epoch in &epochs {
        let params = &out.checkpoints.iter().find(|(c, _)| *c == epoch).unwrap().1;
        let grad = obj.gradient(params);
        if linalg::norm(&grad) == 0.0 {
            continue;
        }
        let rows = trainer::landscape_slice(&obj, params, &grad, &offsets, l.with_sharpness.then_some(&lanczos))?;
        let mut unit = grad.clone();
        linalg::normalize(&mut unit);
        let prev_offset = epoch.checked_sub(1).and_then(|p| out.checkpoints.iter().find(|(c, _)| *c == p)).map(|(_, prev)| {
            let diff: Vec<f64> = prev.iter().zip(params).map(|(a, b)| a - b).collect();
            linalg::dot(&diff, &unit)
        });
        let rec = out.log.records.iter().find(|r| r.epoch == epoch).expect("checkpointed epochs are logged");
        frames.push(Frame {
            epoch,
            logged_loss: rec.loss,
            logged_sharpness: rec.sharpness,
            prev_offset,
            rows,
        });
    }
    Ok(Movie {
        eta: cfg.schedule.eta0(),
        log: out.log,
        frames,
    })
}

pub fn run(ctx: &Context) -> Result<Vec<RunEntry>> {
    let cfg = ctx.cfg;
    let data = ctx.data()?;
    let mut entries = Vec::new();
    for &seed in &cfg.seeds {
        let id = format!("seed{seed}");
        let movie = match compute(data, cfg, seed) {
            Ok(m) => m,
            Err(e @ LabError::MissingCheckpoints { .. }) => return Err(e),
            Err(e) => {
                entries.push(RunEntry::error(id, &e));
                continue;
            }
        };
        let dir = format!("seed{seed}");
        let mut entry = RunEntry::new(&id, RunOutcome::from_status(&movie.log.status, false))
            .with_detail(format!("frames={}", movie.frames.len()));
        entry.artifacts.push(ctx.write_str(&format!("{dir}/trajectory.csv"), &movie.log.to_csv())?);
        let threshold = 2.0 / movie.eta;
        let mut markers = String::from("epoch,prev_offset,current_offset,logged_loss,logged_sharpness,threshold\n");
        for f in &movie.frames {
            let _ = writeln!(
                markers,
                "{},{},0,{:.17e},{},{:.17e}",
                f.epoch,
                f.prev_offset.map(|o| format!("{o:.17e}")).unwrap_or_default(),
                f.logged_loss,
                f.logged_sharpness.map(|s| format!("{s:.17e}")).unwrap_or_default(),
                threshold
            );
            let name = format!("{dir}/slice_e{:05}.csv", f.epoch);
            entry.artifacts.push(ctx.write_str(&name, &trainer::slice_to_csv(&f.rows))?);
            let mut loss = chart_from_csv(&ctx.out.path(&name), &format!("loss along gradient, epoch {}", f.epoch), "offset", &["loss"])?;
            loss.vlines.push((0.0, "current".into()));
            if let Some(p) = f.prev_offset {
                loss.vlines.push((p, "previous".into()));
            }
            entry.artifacts.push(ctx.write_svg(&format!("{dir}/slice_e{:05}_loss.svg", f.epoch), &loss)?);
            if ctx.cfg.landscape.with_sharpness {
                let mut sh = chart_from_csv(&ctx.out.path(&name), &format!("sharpness along gradient, epoch {}", f.epoch), "offset", &["sharpness"])?;
                sh.hlines.push((threshold, "2/eta".into()));
                sh.vlines.push((0.0, "current".into()));
                if let Some(p) = f.prev_offset {
                    sh.vlines.push((p, "previous".into()));
                }
                entry.artifacts.push(ctx.write_svg(&format!("{dir}/slice_e{:05}_sharpness.svg", f.epoch), &sh)?);
            }
        }
        entry.artifacts.push(ctx.write_str(&format!("{dir}/markers.csv"), &markers)?);
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use eos_core::trainer::PhaseSegment;

    fn seg(start: usize, end: usize, label: PhaseLabel) -> PhaseSegment {
        PhaseSegment {
            start_epoch: start,
            end_epoch: end,
            label,
            peak_osc: 0.0,
        }
    }

    #[test]
    fn cycle_spans_the_surrounding_stable_phases() {
        let segs = [
            seg(0, 40, PhaseLabel::Stable),
            seg(41, 60, PhaseLabel::Unstable),
            seg(61, 90, PhaseLabel::Stable),
            seg(91, 100, PhaseLabel::Unstable),
            seg(101, 130, PhaseLabel::Stable),
        ];
        assert_eq!(cycle_epochs(&segs, 50, 2).unwrap(), (61..=130).step_by(2).collect::<Vec<_>>());
        let all = cycle_epochs(&segs, 0, 1).unwrap();
        assert_eq!(all.len(), MAX_AUTO_FRAMES);
        assert_eq!((all[0], *all.last().unwrap()), (0, 90));
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn no_cycle_without_a_following_phase() {
        let segs = [seg(0, 40, PhaseLabel::Stable), seg(41, 60, PhaseLabel::Unstable)];
        assert_eq!(cycle_epochs(&segs, 0, 1), None);
        assert_eq!(cycle_epochs(&segs[..1], 0, 1), None);
    }
}
