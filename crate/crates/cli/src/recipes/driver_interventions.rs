//! Directional step-size interventions restarted from a shared checkpoint.
//! Removing the step along the sharp directions should remove the
//! oscillations; keeping only that step should keep them.

use std::fmt::Write as _;

use eos_core::trainer::{
    self, DirectionalMode, Intervention, PhaseLabel, PhaseSegment, ProbeConfig, Schedule, TrainConfig,
    TrajectoryLog, UnstableEta,
};

use super::{train_mlp, Context};
use crate::config::ExperimentConfig;
use crate::data::ExperimentData;
use crate::error::{LabError, Result};
use crate::manifest::{RunEntry, RunOutcome};
use crate::svg::LineChart;

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub schedule: Schedule,
    pub intervention: Option<Intervention>,
}

/// The variant set for base step size `eta` (all start at epoch 0 of the
/// restarted run).
pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let iv = &cfg.interventions;
    let eta = cfg.schedule.eta0();
    let with = |mode, eta_unstable| {
        Some(Intervention {
            mode,
            k: iv.k,
            eta_unstable,
            start_epoch: 0,
            end_epoch: None,
        })
    };
    vec![
        Variant {
            name: "baseline",
            schedule: Schedule::constant(eta),
            intervention: None,
        },
        Variant {
            name: "identity",
            schedule: Schedule::constant(eta),
            intervention: with(DirectionalMode::Suppress, UnstableEta::Fixed { eta }),
        },
        Variant {
            name: "suppress",
            schedule: Schedule::constant(eta),
            intervention: with(DirectionalMode::Suppress, UnstableEta::Fixed { eta: 0.0 }),
        },
        Variant {
            name: "effective",
            schedule: Schedule::constant(eta),
            intervention: with(
                DirectionalMode::Suppress,
                UnstableEta::StableFraction {
                    fraction: iv.stable_fraction,
                },
            ),
        },
        Variant {
            name: "restrict",
            schedule: Schedule::constant(eta),
            intervention: with(
                DirectionalMode::RestrictTo,
                UnstableEta::Fixed {
                    eta: iv.restrict_eta.unwrap_or(eta),
                },
            ),
        },
        Variant {
            name: "gradient_flow",
            schedule: Schedule::constant(iv.gradient_flow_factor * eta),
            intervention: None,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub name: &'static str,
    /// Epochs are absolute (offset by the checkpoint epoch).
    pub log: TrajectoryLog,
    pub params: Vec<f64>,
    pub segments: Vec<PhaseSegment>,
}

impl VariantRun {
    pub fn unstable_segments(&self) -> usize {
        self.segments.iter().filter(|s| s.label == PhaseLabel::Unstable).count()
    }
}

#[derive(Debug, Clone)]
pub struct InterventionResult {
    pub checkpoint_epoch: usize,
    pub runs: Vec<VariantRun>,
    /// Parameters and losses of `identity` equal `baseline` bit for bit.
    pub identity_matches: bool,
}

impl InterventionResult {
    pub fn get(&self, name: &str) -> Option<&VariantRun> {
        self.runs.iter().find(|r| r.name == name)
    }
}

pub fn compute(data: &ExperimentData, cfg: &ExperimentConfig, seed: u64) -> Result<InterventionResult> {
    let iv = &cfg.interventions;
    let spec = cfg.model_for_seed(seed);
    let start = iv.start_epoch;
    let warmup = TrainConfig {
        schedule: cfg.schedule.clone(),
        max_epochs: start,
        probes: ProbeConfig {
            every: cfg.probes.every.max(start.max(1)),
            k: 1,
            similarity_k: 0,
            ..cfg.probes.clone()
        },
        checkpoint_epochs: vec![start],
        ..Default::default()
    };
    let (_, pre) = train_mlp(data, &spec, &warmup, None)?;
    let init = match pre.checkpoints.into_iter().find(|(e, _)| *e == start) {
        Some((_, p)) => p,
        None => {
            return Err(LabError::MissingCheckpoints {
                epochs: vec![start],
                last_epoch: pre.log.last().map_or(0, |r| r.epoch),
            })
        }
    };

    let mut runs = Vec::new();
    for v in variants(cfg) {
        let tc = TrainConfig {
            schedule: v.schedule.clone(),
            max_epochs: iv.window,
            probes: ProbeConfig {
                similarity_k: 0,
                alpha: iv.alpha,
                ..cfg.probes.clone()
            },
            intervention: v.intervention.clone(),
            ..Default::default()
        };
        let (_, out) = train_mlp(data, &spec, &tc, Some(init.clone()))?;
        let mut log = out.log;
        for r in &mut log.records {
            r.epoch += start;
        }
        let segments = trainer::segment_phases_with(&log, &cfg.segments)?;
        runs.push(VariantRun {
            name: v.name,
            log,
            params: out.params,
            segments,
        });
    }
    let identity_matches = {
        let (b, i) = (&runs[0], &runs[1]);
        b.params == i.params
            && b.log.records.len() == i.log.records.len()
            && b.log.records.iter().zip(&i.log.records).all(|(x, y)| x.loss == y.loss)
    };
    Ok(InterventionResult {
        checkpoint_epoch: start,
        runs,
        identity_matches,
    })
}

fn eigen_csv(log: &TrajectoryLog) -> String {
    let k = log.records.iter().filter_map(|r| r.lambdas.as_ref().map(Vec::len)).max().unwrap_or(0);
    let mut s = String::from("epoch");
    for i in 1..=k {
        let _ = write!(s, ",lambda_{i}");
    }
    s.push('\n');
    for r in &log.records {
        if let Some(l) = &r.lambdas {
            let _ = write!(s, "{}", r.epoch);
            for i in 0..k {
                match l.get(i) {
                    Some(v) => {
                        let _ = write!(s, ",{v:.10e}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn run(ctx: &Context) -> Result<Vec<RunEntry>> {
    let cfg = ctx.cfg;
    let data = ctx.data()?;
    let results: Vec<(u64, Result<InterventionResult>)> = ctx.pool.install(|| {
        use rayon::prelude::*;
        cfg.seeds.par_iter().map(|&seed| (seed, compute(data, cfg, seed))).collect()
    });
    let mut entries = Vec::new();
    for (seed, res) in results {
        let res = match res {
            Ok(r) => r,
            Err(e) => {
                entries.push(RunEntry::error(format!("seed{seed}"), &e));
                continue;
            }
        };
        let dir = format!("seed{seed}");
        let eta = cfg.schedule.eta0();
        let mut summary = String::from("variant,status,unstable_segments,final_loss,final_sharpness\n");
        let mut chart = LineChart::new("sharpness under each intervention", "epoch", "sharpness");
        chart.hlines.push((2.0 / eta, "2/eta".into()));
        let mut osc = LineChart::new("oscillation distance under each intervention", "epoch", "osc_dist");
        for v in &res.runs {
            let id = format!("seed{seed}_{}", v.name);
            let outcome = RunOutcome::from_status(&v.log.status, false);
            let last = v.log.last();
            let final_sharpness = v.log.sharpness().last().map_or(f64::NAN, |p| p.1);
            let _ = writeln!(
                summary,
                "{},{},{},{:.10e},{:.10e}",
                v.name,
                outcome.as_str(),
                v.unstable_segments(),
                last.map_or(f64::NAN, |r| r.loss),
                final_sharpness
            );
            let mut entry = RunEntry::new(&id, outcome).with_detail(format!("unstable_segments={}", v.unstable_segments()));
            entry.artifacts.push(ctx.write_str(&format!("{dir}/{}.csv", v.name), &v.log.to_csv())?);
            entry.artifacts.push(ctx.write_str(
                &format!("{dir}/segments_{}.csv", v.name),
                &trainer::segments_to_csv(&v.segments),
            )?);
            entry.artifacts.push(ctx.write_str(&format!("{dir}/eigen_{}.csv", v.name), &eigen_csv(&v.log))?);
            chart.series.push(crate::svg::Series {
                name: v.name.into(),
                points: v.log.sharpness().into_iter().map(|(e, s)| (e as f64, s)).collect(),
            });
            osc.series.push(crate::svg::Series {
                name: v.name.into(),
                points: v
                    .log
                    .records
                    .iter()
                    .filter_map(|r| r.osc_dist.map(|d| (r.epoch as f64, d)))
                    .collect(),
            });
            entries.push(entry);
        }
        let mut head = RunEntry::new(format!("seed{seed}"), RunOutcome::Completed).with_detail(format!(
            "checkpoint_epoch={} identity_matches_baseline={}",
            res.checkpoint_epoch, res.identity_matches
        ));
        head.artifacts.push(ctx.write_str(&format!("{dir}/summary.csv"), &summary)?);
        head.artifacts.push(ctx.write_svg(&format!("{dir}/sharpness.svg"), &chart)?);
        head.artifacts.push(ctx.write_svg(&format!("{dir}/osc_dist.svg"), &osc)?);
        let at = entries.len() - res.runs.len();
        entries.insert(at, head);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Recipe;

    #[test]
    fn identity_variant_keeps_the_full_step() {
        let cfg = ExperimentConfig::new(Recipe::DriverInterventions);
        let vs = variants(&cfg);
        let names: Vec<&str> = vs.iter().map(|v| v.name).collect();
        assert_eq!(names, ["baseline", "identity", "suppress", "effective", "restrict", "gradient_flow"]);
        let eta = cfg.schedule.eta0();
        let id = vs[1].intervention.as_ref().unwrap();
        assert_eq!(id.eta_unstable, UnstableEta::Fixed { eta });
        assert_eq!(id.k, cfg.interventions.k);
        assert_eq!(vs[5].schedule, Schedule::constant(cfg.interventions.gradient_flow_factor * eta));
    }
}
