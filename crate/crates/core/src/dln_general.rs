//! `n`-parameter diagonal linear networks `L = z(θ₁⋯θₙ)` and additive sums
//! `L = z(Θ₁ + … + Θₘ)` of several of them.
//!
//! The sharpest eigenvector of a single DLN is approximated by the maximizer
//! of `Σ uⱼ/θⱼ` on the unit sphere, `u*ⱼ = ψ/θⱼ` with `ψ = (Σ θₖ⁻²)^(-1/2)`;
//! [`deviation`] measures how far the true eigenvector is from it.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dln_exact::fmt17;
use crate::linalg::{self, symmetric_eigen};
use crate::poly::PolyLoss;
use crate::{Error, Result};

/// Largest dimension accepted by the dense verification routines.
pub const MAX_DENSE_DIM: usize = 2048;

/// `max θ² / min θ²` at or above which a state counts as ill-conditioned.
pub const ILL_CONDITIONED: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlnNState {
    pub thetas: Vec<f64>,
}

impl DlnNState {
    pub fn new(thetas: Vec<f64>) -> Result<Self> {
        if thetas.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a DLN needs at least 2 parameters, got {}",
                thetas.len()
            )));
        }
        Ok(Self { thetas })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn product(&self) -> f64 {
        self.thetas.iter().product()
    }

    /// `max θ² / min θ²`.
    pub fn condition(&self) -> f64 {
        let sq = self.thetas.iter().map(|t| t * t);
        let max = sq.clone().fold(0.0, f64::max);
        let min = sq.fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            thetas: self.thetas.iter().map(|t| c * t).collect(),
        }
    }

    fn check_nonzero(&self) -> Result<()> {
        if let Some(j) = self.thetas.iter().position(|t| *t == 0.0) {
            return Err(Error::DegenerateState(format!("θ[{j}] = 0")));
        }
        Ok(())
    }

    fn index_of_min_abs(&self) -> usize {
        arg_by(&self.thetas, |a, b| a.abs() < b.abs())
    }

    fn index_of_max_abs(&self) -> usize {
        arg_by(&self.thetas, |a, b| a.abs() > b.abs())
    }
}

fn arg_by(xs: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if better(x, xs[best]) {
            best = i;
        }
    }
    best
}

/// `H_jk = D/(θⱼθₖ) − δⱼₖ z′Θ/θⱼ²` with `D = z″Θ² + z′Θ`.
pub fn hessian(state: &DlnNState, loss: &PolyLoss) -> Result<DMatrix<f64>> {
    state.check_nonzero()?;
    let t = state.product();
    let zt = loss.d1(t) * t;
    let d = loss.d2(t) * t * t + zt;
    let inv: Vec<f64> = state.thetas.iter().map(|x| 1.0 / x).collect();
    let n = state.len();
    Ok(DMatrix::from_fn(n, n, |j, k| {
        let base = d * inv[j] * inv[k];
        if j == k {
            (d - zt) * inv[j] * inv[j]
        } else {
            base
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxTopEigen {
    pub psi: f64,
    /// `u*ⱼ = ψ/θⱼ`, unit norm.
    pub u_star: Vec<f64>,
    /// `λ̂₁`. Computed as the Rayleigh quotient of `u*`, so equal to `rayleigh`.
    pub lambda_hat: f64,
    pub rayleigh: f64,
}

pub fn approx_top(state: &DlnNState, loss: &PolyLoss) -> Result<ApproxTopEigen> {
    let h = hessian(state, loss)?;
    let inv_sq: f64 = state.thetas.iter().map(|t| 1.0 / (t * t)).sum();
    let psi = 1.0 / inv_sq.sqrt();
    let u_star: Vec<f64> = state.thetas.iter().map(|t| psi / t).collect();
    let u = nalgebra::DVector::from_column_slice(&u_star);
    let rayleigh = u.dot(&(&h * &u));
    Ok(ApproxTopEigen {
        psi,
        u_star,
        lambda_hat: rayleigh,
        rayleigh,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    /// `εⱼ = uⱼ/u*ⱼ − 1` with `u` the dense top eigenvector aligned to `u*`.
    pub epsilons: Vec<f64>,
    /// `Σ u*ⱼ² εⱼ = u·u* − 1`.
    pub a: f64,
    /// Index of the largest `|θ|`.
    pub max_index: usize,
    /// `ε` at `max_index`.
    pub epsilon_max: f64,
    /// `z′Θ/(z″Θ²)`; exactly 1 for quadratic `z`.
    pub epsilon_ceiling: f64,
    pub lambda1: f64,
    pub lambda_hat: f64,
    pub ill_conditioned: bool,
    pub bound_ok: bool,
}

/// Slack used when checking the `A` and `ε` bounds.
pub const BOUND_TOL: f64 = 1e-9;

pub fn deviation(state: &DlnNState, loss: &PolyLoss) -> Result<DeviationReport> {
    deviation_with_tol(state, loss, BOUND_TOL)
}

pub fn deviation_with_tol(state: &DlnNState, loss: &PolyLoss, tol: f64) -> Result<DeviationReport> {
    if state.len() > MAX_DENSE_DIM {
        return Err(Error::InvalidInput(format!(
            "dense verification capped at n = {MAX_DENSE_DIM}, got {}",
            state.len()
        )));
    }
    let approx = approx_top(state, loss)?;
    let eig = symmetric_eigen(&hessian(state, loss)?)?;
    let mut u = eig.vectors[0].clone();
    if linalg::dot(&u, &approx.u_star) < 0.0 {
        linalg::scale(-1.0, &mut u);
    }
    let epsilons: Vec<f64> = u
        .iter()
        .zip(&approx.u_star)
        .map(|(ui, si)| ui / si - 1.0)
        .collect();
    let a: f64 = approx
        .u_star
        .iter()
        .zip(&epsilons)
        .map(|(s, e)| s * s * e)
        .sum();
    let t = state.product();
    let epsilon_ceiling = loss.d1(t) * t / (loss.d2(t) * t * t);
    let max_index = state.index_of_max_abs();
    let epsilon_max = epsilons[max_index];
    let ill_conditioned = state.condition() >= ILL_CONDITIONED;
    let mut bound_ok = (-2.0 - tol..=tol).contains(&a);
    if ill_conditioned {
        bound_ok &= epsilon_max > 0.0 && epsilon_max < epsilon_ceiling + tol;
    }
    Ok(DeviationReport {
        epsilons,
        a,
        max_index,
        epsilon_max,
        epsilon_ceiling,
        lambda1: eig.values[0],
        lambda_hat: approx.lambda_hat,
        ill_conditioned,
        bound_ok,
    })
}

/// `f(θ) = |θ|(λ̂ + z′Θ/θ²)`.
fn ratio_weight(theta: f64, lambda_hat: f64, zt: f64) -> f64 {
    theta.abs() * (lambda_hat + zt / (theta * theta))
}

/// `Rₙ(k) = f(θₖ)/f(θ_ref)` with `θ_ref` the smallest-magnitude coordinate
/// and `λ̂₁` from [`approx_top`]. `k` indexes the original coordinates and
/// must not be the reference.
pub fn ratio(state: &DlnNState, loss: &PolyLoss, k: usize) -> Result<f64> {
    let approx = approx_top(state, loss)?;
    ratio_with_lambda(state, loss, k, approx.lambda_hat)
}

/// [`ratio`] with an explicit `λ`. With the exact `λ₁` it equals the dense
/// coordinate ratio `|u₁,ref / u₁,k|`.
pub fn ratio_with_lambda(state: &DlnNState, loss: &PolyLoss, k: usize, lambda: f64) -> Result<f64> {
    state.check_nonzero()?;
    if k >= state.len() {
        return Err(Error::InvalidInput(format!("index {k} out of range")));
    }
    let r = state.index_of_min_abs();
    if k == r {
        return Err(Error::InvalidInput(format!(
            "index {k} is the reference (smallest |θ|) coordinate"
        )));
    }
    let t = state.product();
    let zt = loss.d1(t) * t;
    Ok(ratio_weight(state.thetas[k], lambda, zt) / ratio_weight(state.thetas[r], lambda, zt))
}

/// Several DLN groups feeding one loss, `L = z(Σ Θ_g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveDlnSpec {
    pub groups: Vec<DlnNState>,
    pub loss: PolyLoss,
}

impl AdditiveDlnSpec {
    pub fn new(groups: Vec<DlnNState>, loss: PolyLoss) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidInput("need at least one group".into()));
        }
        Ok(Self { groups, loss })
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(DlnNState::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated parameters.
    pub fn params(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.thetas.iter().copied()).collect()
    }

    /// `(group, offset within group)` for a flat index.
    pub fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (g, grp) in self.groups.iter().enumerate() {
            if index < grp.len() {
                return Some((g, index));
            }
            index -= grp.len();
        }
        None
    }

    fn set(&mut self, index: usize, value: f64) {
        let (g, o) = self.locate(index).expect("index in range");
        self.groups[g].thetas[o] = value;
    }

    fn get(&self, index: usize) -> f64 {
        let (g, o) = self.locate(index).expect("index in range");
        self.groups[g].thetas[o]
    }

    /// `z(Σ Θ_g)`.
    pub fn loss_value(&self) -> f64 {
        self.loss.value(self.groups.iter().map(DlnNState::product).sum())
    }
}

/// Block Hessian: `H(Θ_g)` blocks on the diagonal (with `z′`, `z″` taken at
/// the sum), cross blocks `z″ Θ_g Θ_h /(θ_p θ_q)`.
pub fn additive_hessian(spec: &AdditiveDlnSpec) -> Result<DMatrix<f64>> {
    for g in &spec.groups {
        g.check_nonzero()?;
    }
    let total: f64 = spec.groups.iter().map(DlnNState::product).sum();
    let (d1, d2) = (spec.loss.d1(total), spec.loss.d2(total));
    let mut owner = Vec::with_capacity(spec.len());
    let mut inv = Vec::with_capacity(spec.len());
    let mut prod = Vec::with_capacity(spec.groups.len());
    for (g, grp) in spec.groups.iter().enumerate() {
        prod.push(grp.product());
        for &t in &grp.thetas {
            owner.push(g);
            inv.push(1.0 / t);
        }
    }
    let n = inv.len();
    Ok(DMatrix::from_fn(n, n, |p, q| {
        let (gp, gq) = (owner[p], owner[q]);
        let cross = d2 * prod[gp] * prod[gq] * inv[p] * inv[q];
        if gp != gq {
            cross
        } else if p != q {
            cross + d1 * prod[gp] * inv[p] * inv[q]
        } else {
            cross
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityPoint {
    pub r: f64,
    /// `|u₁,i / u₁,j|` of the dense top eigenvector.
    pub ratio: f64,
    pub lambda1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityVerdict {
    pub points: Vec<MonotonicityPoint>,
    /// `ratio` strictly increasing along the grid.
    pub pass: bool,
}

impl MonotonicityVerdict {
    /// CSV with header `r,ratio,lambda1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "r,ratio,lambda1")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", fmt17(p.r), fmt17(p.ratio), fmt17(p.lambda1))?;
        }
        Ok(())
    }
}

/// Sweeps `|θⱼ| = r|θᵢ|` (sign of `θⱼ` kept) over `r_grid` and checks that the
/// dense top eigenvector's `|u₁,ᵢ / u₁,ⱼ|` strictly increases.
///
/// The ratio derivative is taken with every group output held fixed, so when
/// `θⱼ`'s group has another member (other than `θᵢ`) the one farthest from
/// `θⱼ` in magnitude absorbs the change and keeps that group's product
/// constant. Without this the sweep mostly measures the top eigenvector
/// migrating toward whichever group output is growing.
pub fn additive_ratio_monotonicity_check(
    spec: &AdditiveDlnSpec,
    i: usize,
    j: usize,
    r_grid: &[f64],
) -> Result<MonotonicityVerdict> {
    let n = spec.len();
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidInput(format!("bad index pair ({i}, {j}) for n = {n}")));
    }
    if n > MAX_DENSE_DIM {
        return Err(Error::InvalidInput(format!(
            "dense verification capped at n = {MAX_DENSE_DIM}, got {n}"
        )));
    }
    if r_grid.is_empty() || r_grid.iter().any(|r| !(*r >= 1.0)) {
        return Err(Error::InvalidInput("r grid values must be ≥ 1".into()));
    }
    if r_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("r grid must be strictly increasing".into()));
    }
    let mut work = spec.clone();
    let base = spec.get(i);
    let sign = if spec.get(j) < 0.0 { -1.0 } else { 1.0 };
    let partner = compensating_partner(spec, i, j);
    let mut points = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let target = sign * r * base.abs();
        if let Some(p) = partner {
            work.set(p, spec.get(p) * spec.get(j) / target);
        }
        work.set(j, target);
        let eig = symmetric_eigen(&additive_hessian(&work)?)?;
        let u = &eig.vectors[0];
        points.push(MonotonicityPoint {
            r,
            ratio: (u[i] / u[j]).abs(),
            lambda1: eig.values[0],
        });
    }
    let pass = points.windows(2).all(|w| w[1].ratio > w[0].ratio);
    Ok(MonotonicityVerdict { points, pass })
}

/// Member of `j`'s group, other than `i` and `j`, farthest from `|θⱼ|` on a log scale.
fn compensating_partner(spec: &AdditiveDlnSpec, i: usize, j: usize) -> Option<usize> {
    let (g, _) = spec.locate(j)?;
    let start: usize = spec.groups[..g].iter().map(DlnNState::len).sum();
    let tj = spec.get(j).abs().ln();
    (start..start + spec.groups[g].len())
        .filter(|&p| p != i && p != j)
        .max_by(|&a, &b| {
            let da = (spec.get(a).abs().ln() - tj).abs();
            let db = (spec.get(b).abs().ln() - tj).abs();
            da.total_cmp(&db)
        })
}
