//! Closed-form analytics for the two-parameter diagonal linear network
//! `L(θ₁, θ₂) = z(θ₁θ₂)`.
//!
//! The sharpest Hessian eigenvector's alignment with the coordinate axes is
//! summarized by `R₂ = β + √(β² + 1)`, the ratio of its component along the
//! smaller-magnitude ("sharper") parameter to its component along the larger
//! one. One gradient step multiplies `β` by `γ_β`; `γ_β > 1` means the
//! eigenvector turns toward the sharper parameter, `γ_β < 1` away from it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::poly::PolyLoss;
use crate::{Error, Result};

/// Parameters above this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e150;

const ASYMPTOTE_EPS: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dln2State {
    pub theta1: f64,
    pub theta2: f64,
}

impl Dln2State {
    pub fn new(theta1: f64, theta2: f64) -> Self {
        Self { theta1, theta2 }
    }

    pub fn product(&self) -> f64 {
        self.theta1 * self.theta2
    }

    /// Relabels so that `theta2` has the larger magnitude.
    pub fn sharper_first(&self) -> Self {
        if self.theta1.abs() <= self.theta2.abs() {
            *self
        } else {
            Self::new(self.theta2, self.theta1)
        }
    }

    fn is_finite(&self) -> bool {
        self.theta1.is_finite() && self.theta2.is_finite()
    }
}

pub type Mat2 = [[f64; 2]; 2];

/// `[[z″θ₂², z″Θ + z′], [z″Θ + z′, z″θ₁²]]` at `Θ = θ₁θ₂`.
pub fn hessian(state: &Dln2State, loss: &PolyLoss) -> Mat2 {
    let t = state.product();
    let (d1, d2) = (loss.d1(t), loss.d2(t));
    let off = d2 * t + d1;
    [
        [d2 * state.theta2 * state.theta2, off],
        [off, d2 * state.theta1 * state.theta1],
    ]
}

/// One full-batch gradient step: `θ₁ -= η z′ θ₂`, `θ₂ -= η z′ θ₁`.
pub fn gd_step(state: &Dln2State, loss: &PolyLoss, eta: f64) -> Dln2State {
    let d1 = loss.d1(state.product());
    Dln2State::new(
        state.theta1 - eta * (d1 * state.theta2),
        state.theta2 - eta * (d1 * state.theta1),
    )
}

/// Eigenpairs of the 2×2 Hessian; defined at every state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenpairs {
    pub lambda1: f64,
    pub lambda2: f64,
    pub v1: [f64; 2],
    pub v2: [f64; 2],
}

pub fn eigenpairs(state: &Dln2State, loss: &PolyLoss) -> Eigenpairs {
    let t = state.product();
    let (d1, d2) = (loss.d1(t), loss.d2(t));
    let (t1, t2) = (state.theta1, state.theta2);
    let a = d2 * t2 * t2;
    let c = d2 * t1 * t1;
    let b = d2 * t + d1;
    // a - c = z''(θ₂² - θ₁²), factored to avoid cancellation.
    let diff = d2 * (t2 - t1) * (t2 + t1);
    let disc = diff.hypot(2.0 * b);
    let trace = a + c;
    // det = z''²Θ² - (z''Θ + z')² = -z'(z' + 2z''Θ); both terms share a sign.
    let det = -d1 * (d1 + 2.0 * d2 * t);
    let lambda1 = 0.5 * (trace + disc);
    let lambda2 = if lambda1 > 0.0 && trace >= 0.0 {
        det / lambda1
    } else {
        0.5 * (trace - disc)
    };

    let v1 = if b == 0.0 {
        if a >= c {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        }
    } else {
        // Two algebraically equal forms; keep the one with the larger norm.
        let p = [lambda1 - c, b];
        let q = [b, lambda1 - a];
        let (x, y) = if p[0].hypot(p[1]) >= q[0].hypot(q[1]) {
            (p[0], p[1])
        } else {
            (q[0], q[1])
        };
        let n = x.hypot(y);
        let (mut x, mut y) = (x / n, y / n);
        if x.abs() >= y.abs() && x < 0.0 || x.abs() < y.abs() && y < 0.0 {
            x = -x;
            y = -y;
        }
        [x, y]
    };
    let v2 = {
        let (x, y) = (-v1[1], v1[0]);
        if x.abs() >= y.abs() && x < 0.0 || x.abs() < y.abs() && y < 0.0 {
            [-x, -y]
        } else {
            [x, y]
        }
    };
    Eigenpairs {
        lambda1,
        lambda2,
        v1,
        v2,
    }
}

/// `β = |z″(θ₂² − θ₁²) / (2(z′ + z″Θ))|`.
pub fn beta(state: &Dln2State, loss: &PolyLoss) -> Result<f64> {
    let t = state.product();
    let (d1, d2) = (loss.d1(t), loss.d2(t));
    let denom = 2.0 * (d1 + d2 * t);
    if denom == 0.0 {
        return Err(Error::DegenerateState(format!(
            "z' + z''Θ = 0 at θ = ({}, {})",
            state.theta1, state.theta2
        )));
    }
    let (t1, t2) = (state.theta1, state.theta2);
    let b = (d2 * (t2 - t1) * (t2 + t1) / denom).abs();
    if !b.is_finite() {
        return Err(Error::DegenerateState(format!(
            "β overflows at θ = ({t1:e}, {t2:e})"
        )));
    }
    Ok(b)
}

/// `R₂ = β + √(β² + 1)`; strictly increasing, `R₂(0) = 1`.
pub fn r2_from_beta(beta: f64) -> f64 {
    beta + beta.hypot(1.0)
}

/// Signed ratio of sharpest-eigenvector coordinates,
/// `g(r₁, r₂) = (r₁ + √(r₁² + r₂²)) / r₂`, with `r₁ = θ₂² − θ₁²` and
/// `r₂ = 2(z′ + z″Θ)/z″`.
pub fn coordinate_ratio(r1: f64, r2: f64) -> f64 {
    (r1 + r1.hypot(r2)) / r2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dln2Eigen {
    pub lambda1: f64,
    pub lambda2: f64,
    pub v1: [f64; 2],
    pub v2: [f64; 2],
    pub beta: f64,
    pub r2: f64,
}

pub fn eigen(state: &Dln2State, loss: &PolyLoss) -> Result<Dln2Eigen> {
    let p = eigenpairs(state, loss);
    let beta = beta(state, loss)?;
    Ok(Dln2Eigen {
        lambda1: p.lambda1,
        lambda2: p.lambda2,
        v1: p.v1,
        v2: p.v2,
        beta,
        r2: r2_from_beta(beta),
    })
}

fn gamma_parts(state: &Dln2State, loss: &PolyLoss, eta: f64) -> Result<(f64, f64)> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    let (t1, t2) = (state.theta1, state.theta2);
    if t1 == 0.0 || t2 == 0.0 {
        return Err(Error::DegenerateState("γ_β needs θ₁θ₂ ≠ 0".into()));
    }
    let x = eta * loss.d1(state.product());
    let s = t1 / t2 + t2 / t1;
    let num = 1.0 - x * x;
    let den = 1.0 - s * x + x * x;
    if den.abs() < ASYMPTOTE_EPS {
        return Err(Error::AsymptoteHit { denominator: den });
    }
    Ok((num, den))
}

/// Closed-form one-step ratio `γ_β ≈ |(1 − η²z′²) / (1 − sηz′ + η²z′²)|`,
/// `s = θ₁/θ₂ + θ₂/θ₁`.
///
/// `s` and `z′` both change sign when one coordinate does, so the product
/// `sηz′` and hence `γ_β` are invariant to coordinate signs.
pub fn gamma_beta(state: &Dln2State, loss: &PolyLoss, eta: f64) -> Result<f64> {
    gamma_parts(state, loss, eta).map(|(n, d)| (n / d).abs())
}

/// Same as [`gamma_beta`] without the absolute value. Debugging aid only.
pub fn gamma_beta_signed(state: &Dln2State, loss: &PolyLoss, eta: f64) -> Result<f64> {
    gamma_parts(state, loss, eta).map(|(n, d)| n / d)
}

/// `β(after one gradient step) / β(before)`.
pub fn gamma_beta_exact(state: &Dln2State, loss: &PolyLoss, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    let before = beta(state, loss)?;
    if before == 0.0 {
        return Err(Error::DegenerateState(
            "β = 0 before the step (θ₁² = θ₂²)".into(),
        ));
    }
    let after = beta(&gd_step(state, loss, eta), loss)?;
    Ok(after / before)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    /// Stability limit along the sharper coordinate, `2|θ₁/(θ₂z′)|`;
    /// `2/(z″θ₂²)` for quadratic `z`.
    pub eta_eos: f64,
    /// Left asymptote of `γ_β` (sharper coordinate hits zero in one step).
    pub eta_half: f64,
    /// `γ_β = 1` crossing, `η_eos(1 − ξ)`.
    pub eta_gamma1: f64,
    /// `θ₁² / (θ₁² + θ₂²)` with `θ₁` the smaller-magnitude coordinate.
    pub xi: f64,
    /// `2/λ₁` of the full Hessian.
    pub eta_lambda: f64,
}

pub fn thresholds(state: &Dln2State, loss: &PolyLoss) -> Result<PhaseThresholds> {
    let s = state.sharper_first();
    let (t1, t2) = (s.theta1, s.theta2);
    if t1 == 0.0 {
        return Err(Error::DegenerateState("thresholds need θ₁θ₂ ≠ 0".into()));
    }
    if t1.abs() == t2.abs() {
        return Err(Error::DegenerateState(
            "thresholds need θ₁² ≠ θ₂² (no sharper coordinate)".into(),
        ));
    }
    let t = s.product();
    let d1 = loss.d1(t);
    if d1 == 0.0 {
        return Err(Error::DegenerateState("z'(Θ) = 0".into()));
    }
    let eta_half = (t1 / (t2 * d1)).abs();
    let sum_sq = t1 * t1 + t2 * t2;
    let xi = t1 * t1 / sum_sq;
    let eta_gamma1 = (2.0 * t / (d1 * sum_sq)).abs();
    let lambda1 = eigenpairs(&s, loss).lambda1;
    Ok(PhaseThresholds {
        eta_eos: 2.0 * eta_half,
        eta_half,
        eta_gamma1,
        xi,
        eta_lambda: 2.0 / lambda1,
    })
}

/// One recorded point of a two-parameter trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dln2Point {
    pub step: usize,
    pub state: Dln2State,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `None` where `β` is undefined or overflows (`Θ ≈ 0`).
    pub beta: Option<f64>,
    pub r2: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Dln2Trajectory {
    pub eta: f64,
    pub points: Vec<Dln2Point>,
    /// Step at which a coordinate exceeded [`DIVERGENCE_LIMIT`].
    pub diverged_at: Option<usize>,
}

fn record(step: usize, state: Dln2State, loss: &PolyLoss) -> Dln2Point {
    let p = eigenpairs(&state, loss);
    let beta = beta(&state, loss).ok();
    Dln2Point {
        step,
        state,
        lambda1: p.lambda1,
        lambda2: p.lambda2,
        beta,
        r2: beta.map(r2_from_beta).filter(|r| r.is_finite()),
        loss: loss.value(state.product()),
    }
}

/// Runs `steps` gradient steps from `init`, recording `steps + 1` points
/// (the initial state included).
pub fn trajectory(init: Dln2State, loss: &PolyLoss, eta: f64, steps: usize) -> Result<Dln2Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidInput("trajectory needs at least one step".into()));
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::InvalidInput(format!("bad learning rate {eta}")));
    }
    let mut points = Vec::with_capacity(steps + 1);
    let mut state = init;
    points.push(record(0, state, loss));
    let mut diverged_at = None;
    for step in 1..=steps {
        state = gd_step(&state, loss, eta);
        if !state.is_finite()
            || state.theta1.abs() > DIVERGENCE_LIMIT
            || state.theta2.abs() > DIVERGENCE_LIMIT
        {
            diverged_at = Some(step);
            break;
        }
        points.push(record(step, state, loss));
    }
    Ok(Dln2Trajectory {
        eta,
        points,
        diverged_at,
    })
}

impl Dln2Trajectory {
    /// CSV with header `step,theta1,theta2,product,loss,lambda1,beta,R2`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,theta1,theta2,product,loss,lambda1,beta,R2")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                p.step,
                fmt17(p.state.theta1),
                fmt17(p.state.theta2),
                fmt17(p.state.product()),
                fmt17(p.loss),
                fmt17(p.lambda1),
                p.beta.map(fmt17).unwrap_or_default(),
                p.r2.map(fmt17).unwrap_or_default(),
            )?;
        }
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}
