//! Two-parameter DLN trajectories across learning rates, with the `γ_β(η)`
//! curve and its phase thresholds.

use std::fmt::Write as _;

use eos_core::dln_exact::{self, fmt17, Dln2State, Dln2Trajectory, PhaseThresholds};

use super::{fmt_eta, Context};
use crate::config::DlnConfig;
use crate::error::Result;
use crate::manifest::{Artifact, RunEntry, RunOutcome};
use crate::svg::{chart_from_csv, LineChart, Table};

#[derive(Debug, Clone)]
pub struct PhaseMap {
    pub thresholds: PhaseThresholds,
    pub trajectories: Vec<Dln2Trajectory>,
    /// `(η, γ_β)`; `None` at the asymptote.
    pub gamma_curve: Vec<(f64, Option<f64>)>,
}

pub fn compute(cfg: &DlnConfig) -> Result<PhaseMap> {
    let init = Dln2State::new(cfg.init[0], cfg.init[1]);
    let thresholds = dln_exact::thresholds(&init, &cfg.loss)?;
    let trajectories = cfg
        .etas
        .iter()
        .map(|&eta| dln_exact::trajectory(init, &cfg.loss, eta, cfg.steps))
        .collect::<eos_core::Result<Vec<_>>>()?;
    let eta_max = cfg.gamma_eta_max.unwrap_or(1.5 * thresholds.eta_eos);
    let gamma_curve = (1..=cfg.gamma_points)
        .map(|i| {
            let eta = eta_max * i as f64 / cfg.gamma_points as f64;
            (eta, dln_exact::gamma_beta_exact(&init, &cfg.loss, eta).ok())
        })
        .collect();
    Ok(PhaseMap {
        thresholds,
        trajectories,
        gamma_curve,
    })
}

/// Level sets `θ₁θ₂ = c` of the loss, sampled over the trajectories' θ₁ range.
fn contour_csv(map: &PhaseMap, init: Dln2State) -> String {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in map.trajectories.iter().flat_map(|t| &t.points) {
        lo = lo.min(p.state.theta1);
        hi = hi.max(p.state.theta1);
    }
    let levels: Vec<f64> = (0..6).map(|j| init.product() * 0.6f64.powi(j)).collect();
    let mut s = String::from("theta1");
    for j in 0..levels.len() {
        let _ = write!(s, ",contour_{}", j + 1);
    }
    s.push('\n');
    let n = 400;
    for i in 0..=n {
        let t1 = lo + (hi - lo) * i as f64 / n as f64;
        let _ = write!(s, "{}", fmt17(t1));
        for c in &levels {
            let t2 = c / t1;
            if t1 != 0.0 && t2.is_finite() {
                let _ = write!(s, ",{}", fmt17(t2));
            } else {
                s.push(',');
            }
        }
        s.push('\n');
    }
    s
}

pub fn run(ctx: &Context) -> Result<Vec<RunEntry>> {
    let cfg = &ctx.cfg.dln;
    let map = compute(cfg)?;
    let th = &map.thresholds;
    let init = Dln2State::new(cfg.init[0], cfg.init[1]);

    let mut summary = RunEntry::new("thresholds", RunOutcome::Completed).with_detail(format!(
        "eta_eos={} eta_gamma1={} eta_half={}",
        th.eta_eos, th.eta_gamma1, th.eta_half
    ));
    summary.artifacts.push(ctx.write_str(
        "thresholds.csv",
        &format!(
            "eta_half,eta_gamma1,eta_eos,eta_lambda,xi\n{},{},{},{},{}\n",
            fmt17(th.eta_half),
            fmt17(th.eta_gamma1),
            fmt17(th.eta_eos),
            fmt17(th.eta_lambda),
            fmt17(th.xi)
        ),
    )?);
    let mut gamma = String::from("eta,gamma_beta\n");
    for (eta, g) in &map.gamma_curve {
        let _ = writeln!(gamma, "{},{}", fmt17(*eta), g.map(fmt17).unwrap_or_default());
    }
    summary.artifacts.push(ctx.write_str("gamma_curve.csv", &gamma)?);
    let mut chart = chart_from_csv(&ctx.out.path("gamma_curve.csv"), "gamma_beta vs learning rate", "eta", &["gamma_beta"])?;
    let finite: Vec<f64> = map.gamma_curve.iter().filter_map(|p| p.1).collect();
    let cap = finite.iter().cloned().fold(0.0f64, f64::max).min(4.0);
    chart.y_range = Some((finite.iter().cloned().fold(f64::INFINITY, f64::min).max(-4.0), cap));
    chart.hlines.push((1.0, "gamma = 1".into()));
    chart.vlines.push((th.eta_half, "eta_half".into()));
    chart.vlines.push((th.eta_gamma1, "eta_gamma1".into()));
    chart.vlines.push((th.eta_eos, "eta_eos".into()));
    summary.artifacts.push(ctx.write_svg("gamma_curve.svg", &chart)?);

    let mut entries = vec![summary];
    let mut overlay = LineChart::new("trajectories over loss contours", "theta1", "theta2");
    let mut r2_chart = LineChart::new("R2 along each trajectory", "step", "R2");
    let contours = summary_contours(ctx, &map, init, &mut overlay)?;
    entries[0].artifacts.push(contours);
    for t in &map.trajectories {
        let name = format!("traj_eta{}.csv", fmt_eta(t.eta));
        let mut buf = Vec::new();
        t.write_csv(&mut buf)?;
        let artifact = ctx.out.write(&name, &buf)?;
        let table = Table::read(&ctx.out.path(&name))?;
        let mut s = table.series("theta1", "theta2")?;
        s.name = format!("eta={}", fmt_eta(t.eta));
        overlay.series.push(s);
        let mut r = table.series("step", "R2")?;
        r.name = format!("eta={}", fmt_eta(t.eta));
        r2_chart.series.push(r);
        let outcome = if t.diverged_at.is_some() { RunOutcome::Diverged } else { RunOutcome::Completed };
        let last = t.points.last().expect("trajectories record the initial state");
        let mut entry = RunEntry::new(format!("eta{}", fmt_eta(t.eta)), outcome)
            .with_detail(format!("final_loss={:e} steps={}", last.loss, last.step));
        entry.artifacts.push(artifact);
        entries.push(entry);
    }
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in &map.trajectories {
        for p in &t.points {
            y0 = y0.min(p.state.theta2);
            y1 = y1.max(p.state.theta2);
        }
    }
    let pad = 0.05 * (y1 - y0).max(1e-9);
    overlay.y_range = Some((y0 - pad, y1 + pad));
    entries[0].artifacts.push(ctx.write_svg("trajectories.svg", &overlay)?);
    entries[0].artifacts.push(ctx.write_svg("r2.svg", &r2_chart)?);
    Ok(entries)
}

fn summary_contours(ctx: &Context, map: &PhaseMap, init: Dln2State, overlay: &mut LineChart) -> Result<Artifact> {
    let artifact = ctx.write_str("contours.csv", &contour_csv(map, init))?;
    let table = Table::read(&ctx.out.path("contours.csv"))?;
    for name in table.header.iter().skip(1) {
        let mut s = table.series("theta1", name)?;
        s.name = name.replace('_', " ");
        overlay.series.push(s);
    }
    Ok(artifact)
}
