//! Validation accuracy across a geometric learning-rate grid, compared on
//! either side of the measured stability limit.

use std::fmt::Write as _;

use eos_core::trainer::{ProbeConfig, RunStatus, Schedule, TrainConfig, TrajectoryLog, COMPLETION_ACCURACY};

use super::{fmt_eta, thin_log, train_mlp, Context};
use crate::analysis::{self, goldilocks_gap};
use crate::config::ExperimentConfig;
use crate::data::ExperimentData;
use crate::error::Result;
use crate::manifest::{RunEntry, RunOutcome};
use crate::svg::{LineChart, Series};

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub eta: f64,
    pub seed: u64,
    /// NaN for diverged runs.
    pub val_acc: f64,
    pub max_sharpness: f64,
    pub log: TrajectoryLog,
}

impl SweepRun {
    pub fn diverged(&self) -> bool {
        matches!(self.log.status, RunStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    /// `2 / mean max sharpness` over seeds at the smallest learning rate.
    pub stability_limit: f64,
    /// `(η, mean val accuracy over non-diverged seeds)`, sorted by η.
    pub points: Vec<(f64, f64)>,
    /// Means of the `compare` learning rates just below and just above the limit.
    pub gap: Option<(f64, f64)>,
}

pub fn run_one(data: &ExperimentData, cfg: &ExperimentConfig, eta: f64, seed: u64) -> Result<SweepRun> {
    let s = &cfg.sweep;
    let tc = TrainConfig {
        schedule: Schedule::constant(eta),
        max_epochs: s.max_epochs,
        probes: ProbeConfig {
            every: s.probe_every,
            k: 1,
            similarity_k: 0,
            ..cfg.probes.clone()
        },
        stop_at_train_acc: Some(COMPLETION_ACCURACY),
        ..Default::default()
    };
    let (mlp, out) = train_mlp(data, &cfg.model_for_seed(seed), &tc, None)?;
    let diverged = matches!(out.log.status, RunStatus::Diverged { .. });
    let val_acc = if diverged { f64::NAN } else { mlp.accuracy(&out.params, &data.eval_batch)? };
    let max_sharpness = out.log.sharpness().into_iter().map(|p| p.1).fold(f64::NAN, f64::max);
    Ok(SweepRun {
        eta,
        seed,
        val_acc,
        max_sharpness,
        log: out.log,
    })
}

/// Summarizes finished runs (any order).
pub fn summarize(mut runs: Vec<SweepRun>, compare: usize) -> SweepResult {
    runs.sort_by(|a, b| a.eta.total_cmp(&b.eta).then(a.seed.cmp(&b.seed)));
    let mut etas: Vec<f64> = runs.iter().map(|r| r.eta).collect();
    etas.dedup();
    let points: Vec<(f64, f64)> = etas
        .iter()
        .map(|&eta| {
            let accs: Vec<f64> = runs.iter().filter(|r| r.eta == eta && !r.diverged()).map(|r| r.val_acc).collect();
            (eta, if accs.is_empty() { f64::NAN } else { analysis::mean(&accs) })
        })
        .collect();
    let stability_limit = etas
        .first()
        .map(|&eta0| {
            let s: Vec<f64> = runs
                .iter()
                .filter(|r| r.eta == eta0 && r.max_sharpness.is_finite())
                .map(|r| r.max_sharpness)
                .collect();
            2.0 / analysis::mean(&s)
        })
        .unwrap_or(f64::NAN);
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.1.is_finite()).collect();
    let gap = goldilocks_gap(&finite, stability_limit, compare);
    SweepResult {
        runs,
        stability_limit,
        points,
        gap,
    }
}

pub fn compute(ctx: &Context) -> Result<SweepResult> {
    let cfg = ctx.cfg;
    let data = ctx.data()?;
    let mut runs = Vec::new();
    for eta in cfg.sweep.candidates() {
        let batch = ctx.pool.install(|| {
            use rayon::prelude::*;
            cfg.seeds
                .par_iter()
                .map(|&seed| run_one(data, cfg, eta, seed))
                .collect::<Result<Vec<_>>>()
        })?;
        let all_diverged = batch.iter().all(SweepRun::diverged);
        runs.extend(batch);
        if cfg.sweep.auto_stop && all_diverged {
            break;
        }
    }
    Ok(summarize(runs, cfg.sweep.compare))
}

pub fn run(ctx: &Context) -> Result<Vec<RunEntry>> {
    let res = compute(ctx)?;
    let mut summary_entry = RunEntry::new("summary", RunOutcome::Completed);
    let mut entries = Vec::new();
    let mut runs_csv = String::from("eta,seed,status,epochs,val_acc,max_sharpness\n");
    for r in &res.runs {
        let id = format!("eta{}_seed{}", fmt_eta(r.eta), r.seed);
        let outcome = RunOutcome::from_status(&r.log.status, true);
        let epochs = r.log.last().map_or(0, |x| x.epoch);
        let _ = writeln!(
            runs_csv,
            "{},{},{},{epochs},{:.6},{:.10e}",
            r.eta,
            r.seed,
            outcome.as_str(),
            r.val_acc,
            r.max_sharpness
        );
        let mut entry = RunEntry::new(&id, outcome).with_detail(format!("val_acc={:.4} epochs={epochs}", r.val_acc));
        entry.artifacts.push(ctx.write_str(&format!("runs/{id}.csv"), &thin_log(&r.log).to_csv())?);
        entries.push(entry);
    }
    let mut summary = String::from("eta,mean_val_acc,std_val_acc,diverged\n");
    for &(eta, acc) in &res.points {
        let accs: Vec<f64> = res.runs.iter().filter(|r| r.eta == eta && !r.diverged()).map(|r| r.val_acc).collect();
        let sd = if accs.is_empty() { f64::NAN } else { analysis::std_dev(&accs) };
        let div = res.runs.iter().filter(|r| r.eta == eta && r.diverged()).count();
        let _ = writeln!(summary, "{eta},{acc:.6},{sd:.6},{div}");
    }
    let mut limit = format!("stability_limit,below_mean,above_mean,compare\n{:.10e},", res.stability_limit);
    match res.gap {
        Some((b, a)) => {
            let _ = writeln!(limit, "{b:.6},{a:.6},{}", ctx.cfg.sweep.compare);
        }
        None => {
            let _ = writeln!(limit, ",,{}", ctx.cfg.sweep.compare);
        }
    }
    summary_entry.detail = match res.gap {
        Some((b, a)) => format!("limit={:.5} below={b:.4} above={a:.4}", res.stability_limit),
        None => format!("limit={:.5} too few learning rates on one side", res.stability_limit),
    };
    summary_entry.artifacts.push(ctx.write_str("runs.csv", &runs_csv)?);
    summary_entry.artifacts.push(ctx.write_str("summary.csv", &summary)?);
    summary_entry.artifacts.push(ctx.write_str("limit.csv", &limit)?);
    let mut chart = LineChart::new("validation accuracy vs learning rate", "eta", "val_acc");
    chart.log_x = true;
    chart.series.push(Series {
        name: "mean over seeds".into(),
        points: res.points.clone(),
    });
    chart.vlines.push((res.stability_limit, "stability limit".into()));
    summary_entry.artifacts.push(ctx.write_svg("val_acc.svg", &chart)?);
    entries.insert(0, summary_entry);
    Ok(entries)
}
