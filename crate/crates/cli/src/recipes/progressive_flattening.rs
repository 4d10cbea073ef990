//! Peak sharpness after a learning-rate reduction, over a grid of initial
//! learning rates and reduction epochs.

use std::fmt::Write as _;

use eos_core::trainer::{PlateauStop, ProbeConfig, RunStatus, Schedule, TrainConfig, TrajectoryLog};

use super::{fmt_eta, thin_log, train_mlp, Context};
use crate::analysis::spearman;
use crate::config::ExperimentConfig;
use crate::data::ExperimentData;
use crate::error::Result;
use crate::manifest::{RunEntry, RunOutcome};
use crate::svg::{LineChart, Series};

#[derive(Debug, Clone)]
pub struct Cell {
    pub eta0: f64,
    pub reduction_epoch: usize,
    /// Largest probed sharpness at or after the reduction; NaN if none.
    pub s_max: f64,
    pub log: TrajectoryLog,
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub seed: u64,
    /// Row-major: one row per reduction epoch, one column per `η₀`.
    pub cells: Vec<Cell>,
    pub eta0s: Vec<f64>,
    pub reduction_epochs: Vec<usize>,
}

impl Grid {
    pub fn get(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.eta0s.len() + col]
    }

    /// Spearman ρ of `S_max` against `η₀` for each reduction epoch.
    pub fn row_trends(&self) -> Vec<f64> {
        (0..self.reduction_epochs.len())
            .map(|r| {
                let s: Vec<f64> = (0..self.eta0s.len()).map(|c| self.get(r, c).s_max).collect();
                spearman(&self.eta0s, &s)
            })
            .collect()
    }

    /// Spearman ρ of `S_max` against the reduction epoch for each `η₀`.
    pub fn column_trends(&self) -> Vec<f64> {
        let epochs: Vec<f64> = self.reduction_epochs.iter().map(|&e| e as f64).collect();
        (0..self.eta0s.len())
            .map(|c| {
                let s: Vec<f64> = (0..self.reduction_epochs.len()).map(|r| self.get(r, c).s_max).collect();
                spearman(&epochs, &s)
            })
            .collect()
    }
}

pub fn run_cell(data: &ExperimentData, cfg: &ExperimentConfig, seed: u64, eta0: f64, reduction_epoch: usize) -> Result<Cell> {
    let f = &cfg.flattening;
    let tc = TrainConfig {
        schedule: Schedule::ReduceAtEpoch {
            eta0,
            eta_small: f.eta_small,
            epoch: reduction_epoch,
        },
        max_epochs: reduction_epoch + f.max_epochs_after,
        probes: ProbeConfig {
            every: f.probe_every,
            k: 1,
            similarity_k: 0,
            ..cfg.probes.clone()
        },
        plateau: Some(PlateauStop {
            after_epoch: reduction_epoch,
            ..f.plateau
        }),
        ..Default::default()
    };
    let (_, out) = train_mlp(data, &cfg.model_for_seed(seed), &tc, None)?;
    let s_max = out
        .log
        .sharpness()
        .into_iter()
        .filter(|(e, _)| *e >= reduction_epoch)
        .map(|p| p.1)
        .fold(f64::NAN, f64::max);
    Ok(Cell {
        eta0,
        reduction_epoch,
        s_max,
        log: out.log,
    })
}

pub fn compute(ctx: &Context, seed: u64) -> Result<Grid> {
    let cfg = ctx.cfg;
    let data = ctx.data()?;
    let f = &cfg.flattening;
    let jobs: Vec<(usize, f64)> = f
        .reduction_epochs
        .iter()
        .flat_map(|&r| f.eta0s.iter().map(move |&e| (r, e)))
        .collect();
    let cells = ctx.pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(r, e)| run_cell(data, cfg, seed, e, r))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Grid {
        seed,
        cells,
        eta0s: f.eta0s.clone(),
        reduction_epochs: f.reduction_epochs.clone(),
    })
}

pub fn run(ctx: &Context) -> Result<Vec<RunEntry>> {
    let mut entries = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let grid = match compute(ctx, seed) {
            Ok(g) => g,
            Err(e) => {
                entries.push(RunEntry::error(format!("seed{seed}"), &e));
                continue;
            }
        };
        let dir = format!("seed{seed}");
        let mut summary = RunEntry::new(format!("seed{seed}"), RunOutcome::Completed);
        let mut table = String::from("reduction_epoch,eta0,s_max,status,epochs\n");
        let mut chart = LineChart::new("peak sharpness after reduction", "reduction epoch", "S_max");
        for (c, &eta0) in grid.eta0s.iter().enumerate() {
            chart.series.push(Series {
                name: format!("eta0={}", fmt_eta(eta0)),
                points: (0..grid.reduction_epochs.len())
                    .map(|r| (grid.reduction_epochs[r] as f64, grid.get(r, c).s_max))
                    .collect(),
            });
        }
        for cell in &grid.cells {
            let status = match cell.log.status {
                RunStatus::Diverged { .. } => "diverged",
                RunStatus::Plateaued => "plateaued",
                RunStatus::Completed => "completed",
                RunStatus::Finished => "finished",
            };
            let epochs = cell.log.last().map_or(0, |r| r.epoch);
            let _ = writeln!(table, "{},{},{:.10e},{status},{epochs}", cell.reduction_epoch, cell.eta0, cell.s_max);
            let id = format!("seed{seed}_eta{}_r{}", fmt_eta(cell.eta0), cell.reduction_epoch);
            let mut entry = RunEntry::new(&id, RunOutcome::from_status(&cell.log.status, false))
                .with_detail(format!("s_max={:.4} status={status}", cell.s_max));
            entry
                .artifacts
                .push(ctx.write_str(&format!("{dir}/{id}.csv"), &thin_log(&cell.log).to_csv())?);
            entries.push(entry);
        }
        let mut trend = String::from("axis,value,spearman\n");
        let rows = grid.row_trends();
        let cols = grid.column_trends();
        for (r, rho) in grid.reduction_epochs.iter().zip(&rows) {
            let _ = writeln!(trend, "reduction_epoch,{r},{rho:.6}");
        }
        for (e, rho) in grid.eta0s.iter().zip(&cols) {
            let _ = writeln!(trend, "eta0,{e},{rho:.6}");
        }
        let ok = rows.iter().chain(&cols).all(|r| *r <= 0.0);
        summary.detail = format!("non_increasing={ok}");
        summary.artifacts.push(ctx.write_str(&format!("{dir}/smax_grid.csv"), &table)?);
        summary.artifacts.push(ctx.write_str(&format!("{dir}/trend.csv"), &trend)?);
        summary.artifacts.push(ctx.write_svg(&format!("{dir}/smax.svg"), &chart)?);
        entries.insert(entries.len() - grid.cells.len(), summary);
    }
    Ok(entries)
}
