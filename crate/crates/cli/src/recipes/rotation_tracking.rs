//! Tracks how the sharpest eigenvectors rotate during instability windows,
//! and how they return once the learning rate is reduced.

use std::fmt::Write as _;

use eos_core::trainer::{self, PhaseSegment, ProbeConfig, Schedule, TrainConfig, TrajectoryLog};
use eos_core::MlpSpec;

use super::{Context, train_mlp};
use crate::analysis::{self, WindowTrace};
use crate::config::ExperimentConfig;
use crate::data::ExperimentData;
use crate::error::{LabError, Result};
use crate::manifest::{RunEntry, RunOutcome};
use crate::svg::LineChart;

/// Epochs after a reduction at which recovery is read off.
pub const RECOVERY_HORIZON: usize = 20;

/// Automatic reductions happen at the first probe whose subspace similarity
/// to the window baseline falls below this, i.e. while the rotation is under way.
pub const ROTATED: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct Reduction {
    pub epoch: usize,
    /// Start of the window whose spectrum is the baseline.
    pub baseline_epoch: usize,
    pub log: TrajectoryLog,
    /// Lowest similarity seen between the baseline and the reduction.
    pub min_before: f64,
    /// Similarity at the last probe within [`RECOVERY_HORIZON`] epochs.
    pub recovered: f64,
}

#[derive(Debug, Clone)]
pub struct PeriodTraces {
    pub period: usize,
    pub log: TrajectoryLog,
    pub traces: Vec<WindowTrace>,
}

impl PeriodTraces {
    pub fn mean_roughness(&self) -> f64 {
        let r: Vec<f64> = self
            .traces
            .iter()
            .filter(|t| t.similarity.len() >= 2)
            .map(|t| t.roughness())
            .collect();
        if r.is_empty() { 0.0 } else { analysis::mean(&r) }
    }
}

#[derive(Debug, Clone)]
pub struct RotationResult {
    pub baseline: TrajectoryLog,
    pub segments: Vec<PhaseSegment>,
    /// Instability windows, starts rounded down to the probe period.
    pub windows: Vec<(usize, usize)>,
    pub tracked: PeriodTraces,
    pub reductions: Vec<Reduction>,
    pub compared: Vec<PeriodTraces>,
}

fn tracked_run(
    data: &ExperimentData,
    spec: &MlpSpec,
    cfg: &ExperimentConfig,
    period: usize,
    windows: &[(usize, usize)],
) -> Result<PeriodTraces> {
    let r = &cfg.rotation;
    let probes = ProbeConfig {
        every: period,
        k: r.similarity_k.max(cfg.probes.k),
        similarity_k: r.similarity_k,
        snapshot_starts: windows.iter().map(|w| w.0 / period * period).collect(),
        ..cfg.probes.clone()
    };
    let tc = TrainConfig {
        schedule: cfg.schedule.clone(),
        max_epochs: cfg.max_epochs,
        probes,
        ..Default::default()
    };
    let (_, out) = train_mlp(data, spec, &tc, None)?;
    let rounded: Vec<(usize, usize)> = windows.iter().map(|&(s, e)| (s / period * period, e)).collect();
    let traces = analysis::window_traces(&out.log.records, &rounded);
    Ok(PeriodTraces {
        period,
        log: out.log,
        traces,
    })
}

pub fn compute(data: &ExperimentData, cfg: &ExperimentConfig, seed: u64) -> Result<RotationResult> {
    let r = &cfg.rotation;
    let spec = cfg.model_for_seed(seed);
    let base_cfg = TrainConfig {
        schedule: cfg.schedule.clone(),
        max_epochs: cfg.max_epochs,
        probes: ProbeConfig {
            k: 1,
            similarity_k: 0,
            ..cfg.probes.clone()
        },
        ..Default::default()
    };
    let (_, base) = train_mlp(data, &spec, &base_cfg, None)?;
    let segments = trainer::segment_phases_with(&base.log, &cfg.segments)?;
    let raw_windows = analysis::instability_windows(&segments);
    let period = r.period;
    let windows: Vec<(usize, usize)> = raw_windows.iter().map(|&(s, e)| (s / period * period, e)).collect();

    let tracked = tracked_run(data, &spec, cfg, period, &raw_windows)?;

    let reduction_epochs: Vec<usize> = if r.reduction_epochs.is_empty() {
        tracked
            .traces
            .iter()
            .filter_map(|t| t.similarity.iter().find(|p| p.1 < ROTATED).map(|p| p.0))
            .take(r.auto_reductions)
            .collect()
    } else {
        r.reduction_epochs.clone()
    };
    let eta0 = cfg.schedule.eta0();
    let mut reductions = Vec::new();
    for &epoch in &reduction_epochs {
        let baseline_epoch = windows
            .iter()
            .rev()
            .find(|(s, _)| *s <= epoch)
            .map(|w| w.0)
            .ok_or_else(|| LabError::config(format!("reduction epoch {epoch} precedes every instability window")))?;
        let tc = TrainConfig {
            schedule: Schedule::ReduceAtEpoch {
                eta0,
                eta_small: r.reduction_factor * eta0,
                epoch,
            },
            max_epochs: epoch + r.recovery_epochs,
            probes: ProbeConfig {
                every: period,
                k: r.similarity_k,
                similarity_k: r.similarity_k,
                snapshot_starts: vec![baseline_epoch],
                ..cfg.probes.clone()
            },
            ..Default::default()
        };
        let (_, out) = train_mlp(data, &spec, &tc, None)?;
        let sims: Vec<(usize, f64)> = out
            .log
            .records
            .iter()
            .filter_map(|rec| rec.subspace_sim.map(|s| (rec.epoch, s)))
            .collect();
        let min_before = sims
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min);
        let recovered = sims
            .iter()
            .rfind(|(e, _)| *e <= epoch + RECOVERY_HORIZON)
            .map_or(f64::NAN, |p| p.1);
        reductions.push(Reduction {
            epoch,
            baseline_epoch,
            log: out.log,
            min_before,
            recovered,
        });
    }

    let compared = r
        .compare_periods
        .iter()
        .filter(|&&p| p != period)
        .map(|&p| tracked_run(data, &spec, cfg, p, &raw_windows))
        .collect::<Result<Vec<_>>>()?;

    Ok(RotationResult {
        baseline: base.log,
        segments,
        windows,
        tracked,
        reductions,
        compared,
    })
}

fn windows_csv(traces: &[WindowTrace]) -> String {
    let mut s = String::from("window_start,window_end,peak_epoch,epoch,subspace_sim\n");
    for t in traces {
        for (e, v) in &t.similarity {
            let _ = writeln!(s, "{},{},{},{},{:.10}", t.start, t.end, t.peak_epoch, e, v);
        }
    }
    s
}

pub fn run(ctx: &Context) -> Result<Vec<RunEntry>> {
    let cfg = ctx.cfg;
    let data = ctx.data()?;
    let results: Vec<(u64, Result<RotationResult>)> = ctx.pool.install(|| {
        use rayon::prelude::*;
        cfg.seeds.par_iter().map(|&seed| (seed, compute(data, cfg, seed))).collect()
    });
    let mut entries = Vec::new();
    for (seed, res) in results {
        let id = format!("seed{seed}");
        let res = match res {
            Ok(r) => r,
            Err(e) => {
                entries.push(RunEntry::error(id, &e));
                continue;
            }
        };
        let dir = format!("seed{seed}");
        let mut entry = RunEntry::new(&id, RunOutcome::from_status(&res.baseline.status, false));
        entry.artifacts.push(ctx.write_str(&format!("{dir}/baseline.csv"), &res.baseline.to_csv())?);
        entry.artifacts.push(ctx.write_str(&format!("{dir}/segments.csv"), &trainer::segments_to_csv(&res.segments))?);
        let tname = format!("{dir}/tracked_T{}.csv", res.tracked.period);
        entry.artifacts.push(ctx.write_str(&tname, &res.tracked.log.to_csv())?);
        entry.artifacts.push(ctx.write_str(&format!("{dir}/windows.csv"), &windows_csv(&res.tracked.traces))?);
        let mut chart = crate::svg::chart_from_csv(
            &ctx.out.path(&tname),
            &format!("top-{} subspace similarity to window baseline", cfg.rotation.similarity_k),
            "epoch",
            &["subspace_sim"],
        )?;
        for (s, _) in &res.windows {
            chart.vlines.push((*s as f64, String::new()));
        }
        entry.artifacts.push(ctx.write_svg(&format!("{dir}/similarity.svg"), &chart)?);

        let mut rec_chart = LineChart::new("similarity after learning-rate reduction", "epoch", "subspace_sim");
        let mut summary = String::from("reduction_epoch,baseline_epoch,min_before,recovered\n");
        for red in &res.reductions {
            let name = format!("{dir}/reduction_e{}.csv", red.epoch);
            entry.artifacts.push(ctx.write_str(&name, &red.log.to_csv())?);
            let table = crate::svg::Table::read(&ctx.out.path(&name))?;
            let mut s = table.series("epoch", "subspace_sim")?;
            s.name = format!("reduce at {}", red.epoch);
            rec_chart.series.push(s);
            let _ = writeln!(summary, "{},{},{:.10},{:.10}", red.epoch, red.baseline_epoch, red.min_before, red.recovered);
        }
        entry.artifacts.push(ctx.write_str(&format!("{dir}/reductions.csv"), &summary)?);
        if !res.reductions.is_empty() {
            entry.artifacts.push(ctx.write_svg(&format!("{dir}/reductions.svg"), &rec_chart)?);
        }

        let mut smooth = String::from("period,mean_roughness\n");
        for p in std::iter::once(&res.tracked).chain(&res.compared) {
            let _ = writeln!(smooth, "{},{:.10}", p.period, p.mean_roughness());
        }
        for p in &res.compared {
            entry.artifacts.push(ctx.write_str(&format!("{dir}/tracked_T{}.csv", p.period), &p.log.to_csv())?);
        }
        entry.artifacts.push(ctx.write_str(&format!("{dir}/period_smoothness.csv"), &smooth)?);
        let worst = res.tracked.traces.iter().map(|t| t.max_rise()).fold(0.0, f64::max);
        entry.detail = format!("windows={} max_rise={worst:.4}", res.windows.len());
        entries.push(entry);
    }
    Ok(entries)
}
