//! Matrix-free Lanczos eigensolver, eigenvector similarity metrics and the
//! sharpening factor `α = −∇L·∇S`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVectorView, DVectorViewMut};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, canonicalize_sign};
use crate::objective::Objective;
use crate::{Error, Result};

/// A symmetric linear map on `ℝ^dim`.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

impl<T: SymmetricOperator + ?Sized> SymmetricOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        (**self).apply(v, out)
    }
}

impl<T: SymmetricOperator + ?Sized> SymmetricOperator for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        (**self).apply(v, out)
    }
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.nrows();
        let x = DVectorView::from_slice(v, n);
        let mut y = DVectorViewMut::from_slice(out, n);
        y.gemv(1.0, self, &x, 0.0);
    }
}

/// Wraps a closure `(v, out)` as an operator.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> SymmetricOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        (self.f)(v, out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda: f64,
    pub vector: Vec<f64>,
}

/// Top eigenpairs in descending order, with explicit residuals `‖Hv − λv‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub pairs: Vec<EigenPair>,
    pub residuals: Vec<f64>,
    /// Lanczos steps taken (one operator application each).
    pub iterations: usize,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.vector.len())
    }

    /// The sharpness `λ₁`.
    pub fn top(&self) -> Option<f64> {
        self.pairs.first().map(|p| p.lambda)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.lambda).collect()
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.pairs.iter().map(|p| p.vector.as_slice()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,lambda,residual\n");
        for (i, (p, r)) in self.pairs.iter().zip(&self.residuals).enumerate() {
            s.push_str(&format!("{},{:.16e},{:.6e}\n", i + 1, p.lambda, r));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanczosOptions {
    pub k: usize,
    /// A pair is accepted once `‖Hv − λv‖ ≤ tol · max(1, |λ|)`.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Second key of the start-vector generator, typically a step index.
    pub stream: u64,
    pub check_symmetry: bool,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            k: 8,
            tol: 1e-6,
            max_iter: 300,
            seed: 0,
            stream: 0,
            check_symmetry: true,
        }
    }
}

/// Re-orthogonalization acceptance ratio.
const KAPPA: f64 = std::f64::consts::FRAC_1_SQRT_2;
const MAX_K: usize = 32;
/// Consecutive failed restart draws before giving up.
const MAX_RESTART_ATTEMPTS: usize = 3;
const CHECK_EVERY: usize = 4;
const SYMMETRY_TOL: f64 = 1e-6;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    linalg::normalize(&mut v);
    v
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lanczos recurrence with full re-orthogonalization under the
/// Parlett-Kahan acceptance test.
struct Lanczos<'a> {
    op: &'a dyn SymmetricOperator,
    dim: usize,
    q: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    /// `beta[j]` couples `q[j]` and `q[j + 1]`; zero after a breakdown.
    beta: Vec<f64>,
    restarts: usize,
    exhausted: bool,
    rng: ChaCha8Rng,
}

impl<'a> Lanczos<'a> {
    fn new(op: &'a dyn SymmetricOperator, start: Option<&[f64]>, mut rng: ChaCha8Rng) -> Self {
        let dim = op.dim();
        let q0 = match start {
            Some(s) if s.len() == dim && s.iter().all(|x| x.is_finite()) && linalg::norm(s) > 0.0 => {
                let mut v = s.to_vec();
                linalg::normalize(&mut v);
                v
            }
            _ => random_unit(&mut rng, dim),
        };
        Self {
            op,
            dim,
            q: vec![q0],
            alpha: Vec::new(),
            beta: Vec::new(),
            restarts: 0,
            exhausted: false,
            rng,
        }
    }

    fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// Removes the components of `w` along the basis; returns the new norm.
    fn orthogonalize(&self, w: &mut [f64]) -> f64 {
        for qi in &self.q {
            let c = linalg::dot(qi, w);
            linalg::axpy(-c, qi, w);
        }
        linalg::norm(w)
    }

    /// Orthogonalizes twice at most; `None` when the vector lies in the span.
    fn parlett_kahan(&self, w: &mut [f64], mut pre: f64, floor: f64) -> Option<f64> {
        for _ in 0..2 {
            let post = self.orthogonalize(w);
            if post >= KAPPA * pre && post > floor {
                return Some(post);
            }
            pre = post;
        }
        None
    }

    fn step(&mut self) -> Result<()> {
        let j = self.q.len() - 1;
        let mut w = vec![0.0; self.dim];
        self.op.apply(&self.q[j], &mut w);
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("operator returned a non-finite vector".into()));
        }
        let scale = linalg::norm(&w);
        let a = linalg::dot(&self.q[j], &w);
        linalg::axpy(-a, &self.q[j], &mut w);
        if j > 0 {
            linalg::axpy(-self.beta[j - 1], &self.q[j - 1], &mut w);
        }
        self.alpha.push(a);
        if self.q.len() == self.dim {
            self.beta.push(0.0);
            self.exhausted = true;
            return Ok(());
        }
        let pre = linalg::norm(&w);
        let floor = 1e-12 * scale.max(f64::MIN_POSITIVE);
        if let Some(b) = self.parlett_kahan(&mut w, pre, floor) {
            linalg::scale(1.0 / b, &mut w);
            self.beta.push(b);
            self.q.push(w);
            return Ok(());
        }
        // Invariant subspace: continue from a fresh random direction.
        self.beta.push(0.0);
        for _ in 0..MAX_RESTART_ATTEMPTS {
            let mut r = random_unit(&mut self.rng, self.dim);
            if let Some(n) = self.parlett_kahan(&mut r, 1.0, 1e-12) {
                linalg::scale(1.0 / n, &mut r);
                self.q.push(r);
                self.restarts += 1;
                return Ok(());
            }
        }
        Err(Error::BreakdownLoop {
            restarts: MAX_RESTART_ATTEMPTS,
        })
    }

    /// Ritz values (descending) with eigenvectors of the tridiagonal matrix.
    fn ritz(&self) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let m = self.steps();
        let t = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                self.alpha[i]
            } else if i + 1 == j {
                self.beta[i]
            } else if j + 1 == i {
                self.beta[j]
            } else {
                0.0
            }
        });
        let eig = linalg::symmetric_eigen(&t)?;
        Ok((eig.values, eig.vectors))
    }

    fn ritz_vector(&self, s: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for (qj, sj) in self.q.iter().zip(s) {
            linalg::axpy(*sj, qj, &mut y);
        }
        linalg::normalize(&mut y);
        canonicalize_sign(&mut y);
        y
    }

    fn residual(&self, y: &[f64], lambda: f64) -> f64 {
        let mut hy = vec![0.0; self.dim];
        self.op.apply(y, &mut hy);
        linalg::axpy(-lambda, y, &mut hy);
        linalg::norm(&hy)
    }

    /// Builds the top-`k` spectrum; `Ok(None)` when a cheap residual estimate
    /// already rules out convergence.
    fn extract(&self, k: usize, tol: f64, force: bool) -> Result<(Spectrum, bool)> {
        let (values, vectors) = self.ritz()?;
        let m = self.steps();
        let k = k.min(m);
        let b_last = self.beta[m - 1];
        let estimates_ok = (0..k).all(|i| {
            (b_last * vectors[i][m - 1]).abs() <= tol * values[i].abs().max(1.0)
        });
        if !estimates_ok && !force {
            return Ok((
                Spectrum {
                    pairs: Vec::new(),
                    residuals: Vec::new(),
                    iterations: m,
                },
                false,
            ));
        }
        let mut pairs = Vec::with_capacity(k);
        let mut residuals = Vec::with_capacity(k);
        for i in 0..k {
            let y = self.ritz_vector(&vectors[i]);
            residuals.push(self.residual(&y, values[i]));
            pairs.push(EigenPair {
                lambda: values[i],
                vector: y,
            });
        }
        let ok = pairs
            .iter()
            .zip(&residuals)
            .all(|(p, r)| *r <= tol * p.lambda.abs().max(1.0));
        Ok((
            Spectrum {
                pairs,
                residuals,
                iterations: m,
            },
            ok,
        ))
    }
}

/// Probabilistic check that `uᵀ(Hv) = vᵀ(Hu)`.
pub fn check_symmetry(op: &dyn SymmetricOperator, rng: &mut ChaCha8Rng) -> Result<()> {
    let dim = op.dim();
    let r: Vec<Vec<f64>> = (0..3).map(|_| random_unit(rng, dim)).collect();
    let hr: Vec<Vec<f64>> = r
        .iter()
        .map(|x| {
            let mut out = vec![0.0; dim];
            op.apply(x, &mut out);
            out
        })
        .collect();
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        let uhv = linalg::dot(&r[i], &hr[j]);
        let vhu = linalg::dot(&r[j], &hr[i]);
        let scale = linalg::norm(&hr[i]).max(linalg::norm(&hr[j]));
        if !(uhv - vhu).abs().le(&(SYMMETRY_TOL * scale)) {
            return Err(Error::AsymmetricOperator { uhv, vhu });
        }
    }
    Ok(())
}

/// Top-`k` eigenpairs of a symmetric operator by Lanczos iteration.
///
/// `start` warm-starts the iteration (e.g. the previous top eigenvector);
/// otherwise the start vector is drawn from `(seed, stream)`.
pub fn top_k_eigen(
    op: &dyn SymmetricOperator,
    opts: &LanczosOptions,
    start: Option<&[f64]>,
) -> Result<Spectrum> {
    let dim = op.dim();
    if opts.k == 0 || opts.k > MAX_K {
        return Err(Error::InvalidInput(format!("k must be in 1..={MAX_K}, got {}", opts.k)));
    }
    if opts.k > dim {
        return Err(Error::InvalidInput(format!(
            "k = {} exceeds the operator dimension {dim}",
            opts.k
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("tol must be positive".into()));
    }
    let mut rng = rng_for(opts.seed, opts.stream);
    if opts.check_symmetry {
        check_symmetry(op, &mut rng)?;
    }
    let max_iter = opts.max_iter.max(opts.k);
    let mut lz = Lanczos::new(op, start, rng);
    loop {
        lz.step()?;
        let m = lz.steps();
        let last = lz.exhausted || m >= max_iter;
        if m < opts.k || !(last || m.is_multiple_of(CHECK_EVERY)) {
            continue;
        }
        let (spec, ok) = lz.extract(opts.k, opts.tol, last)?;
        if ok {
            return Ok(spec);
        }
        if last {
            return Err(Error::NotConverged {
                iterations: m,
                best: Box::new(spec),
            });
        }
    }
}

/// `top_k_eigen` that hands back the best-effort spectrum instead of
/// failing when the iteration budget runs out.
pub fn top_k_eigen_lenient(
    op: &dyn SymmetricOperator,
    opts: &LanczosOptions,
    start: Option<&[f64]>,
) -> Result<Spectrum> {
    match top_k_eigen(op, opts, start) {
        Err(Error::NotConverged { best, .. }) => Ok(*best),
        other => other,
    }
}

/// A Lanczos basis kept for diagnostics.
#[derive(Debug, Clone)]
pub struct KrylovBasis {
    pub vectors: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub restarts: usize,
}

impl KrylovBasis {
    /// `max |QᵀQ − I|` over the basis.
    pub fn orthogonality_drift(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.vectors.iter().enumerate() {
            for (j, b) in self.vectors.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((linalg::dot(a, b) - target).abs());
            }
        }
        worst
    }
}

/// Runs `steps` Lanczos iterations and returns the basis.
pub fn lanczos_basis(op: &dyn SymmetricOperator, steps: usize, seed: u64) -> Result<KrylovBasis> {
    let mut lz = Lanczos::new(op, None, rng_for(seed, 0));
    while lz.steps() < steps && !lz.exhausted {
        lz.step()?;
    }
    Ok(KrylovBasis {
        vectors: lz.q,
        alpha: lz.alpha,
        beta: lz.beta,
        restarts: lz.restarts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSimilarity {
    /// `|vᵃᵢ · vᵇᵢ|` for matched pairs.
    pub per_vector: Vec<f64>,
    /// Mean cosine of the principal angles between the two spans.
    pub subspace: f64,
    /// Principal-angle cosines, descending.
    pub cosines: Vec<f64>,
}

impl SubspaceSimilarity {
    /// Squared-sine Grassmann distance `Σ sin²θᵢ`.
    pub fn sin2_distance(&self) -> f64 {
        self.cosines.iter().map(|c| 1.0 - c * c).sum()
    }
}

/// Similarity of two orthonormal bases of equal size.
pub fn basis_similarity(a: &[&[f64]], b: &[&[f64]]) -> Result<SubspaceSimilarity> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "bases need equal nonzero size, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            left: dim,
            right: v.len(),
        });
    }
    let k = a.len();
    let gram = DMatrix::from_fn(k, k, |i, j| linalg::dot(a[i], b[j]));
    let mut cosines: Vec<f64> = gram
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    let per_vector = (0..k).map(|i| gram[(i, i)].abs().min(1.0)).collect();
    let subspace = cosines.iter().sum::<f64>() / k as f64;
    Ok(SubspaceSimilarity {
        per_vector,
        subspace,
        cosines,
    })
}

/// Compares the top-`k` eigenvectors of two spectra.
pub fn eigvec_similarity(a: &Spectrum, b: &Spectrum, k: usize) -> Result<SubspaceSimilarity> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    if k == 0 || k > a.len() || k > b.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} but the spectra hold {} and {} pairs",
            a.len(),
            b.len()
        )));
    }
    basis_similarity(&a.vectors()[..k], &b.vectors()[..k])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMethod {
    /// Re-solves for `S` at `θ ± h·u`, warm-started at `v₁`.
    FiniteDifference,
    /// Differentiates `v₁ᵀ H(θ) v₁` with `v₁` frozen.
    NestedHvp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeningFactor {
    pub alpha: f64,
    pub method: AlphaMethod,
    pub step: f64,
}

/// `α = −∇L·∇S`, estimated by a central difference of step `step` along the
/// normalized gradient.
pub fn sharpening_factor(
    obj: &dyn Objective,
    params: &[f64],
    spectrum: &Spectrum,
    method: AlphaMethod,
    step: f64,
    opts: &LanczosOptions,
) -> Result<SharpeningFactor> {
    let v1 = spectrum
        .pairs
        .first()
        .ok_or_else(|| Error::InvalidInput("spectrum has no top pair".into()))?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    let g = obj.gradient(params);
    let gnorm = linalg::norm(&g);
    if gnorm < 1e-12 {
        return Err(Error::ZeroGradient(gnorm));
    }
    let shifted = |sign: f64| -> Vec<f64> {
        params
            .iter()
            .zip(&g)
            .map(|(p, gi)| p + sign * step * gi / gnorm)
            .collect()
    };
    let (plus, minus) = (shifted(1.0), shifted(-1.0));
    let curvature = |theta: &[f64]| -> Result<f64> {
        match method {
            AlphaMethod::FiniteDifference => {
                let one = LanczosOptions {
                    k: 1,
                    check_symmetry: false,
                    ..opts.clone()
                };
                let op = obj.hessian_operator(theta);
                top_k_eigen_lenient(&op, &one, Some(&v1.vector))?
                    .top()
                    .ok_or_else(|| Error::EigensolveFailed("empty spectrum".into()))
            }
            AlphaMethod::NestedHvp => Ok(linalg::dot(&v1.vector, &obj.hvp(theta, &v1.vector))),
        }
    };
    let alpha = -gnorm * (curvature(&plus)? - curvature(&minus)?) / (2.0 * step);
    if !alpha.is_finite() {
        return Err(Error::NonFinite("sharpening factor".into()));
    }
    Ok(SharpeningFactor {
        alpha,
        method,
        step,
    })
}

/// Top-`k` spectrum of an objective's Hessian.
pub fn hessian_spectrum(
    obj: &dyn Objective,
    params: &[f64],
    opts: &LanczosOptions,
    start: Option<&[f64]>,
) -> Result<Spectrum> {
    let op = obj.hessian_operator(params);
    top_k_eigen(&op, opts, start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Quadratic, Scalar};
    use proptest::prelude::*;
    use rand::Rng;

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn diagonal_operator_top_two() {
        let mut d = vec![5.0, 3.0];
        d.extend((0..40).map(|i| 1.0 - i as f64 * 0.01));
        let op = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d));
        let opts = LanczosOptions {
            k: 2,
            tol: 1e-10,
            ..Default::default()
        };
        let s = top_k_eigen(&op, &opts, None).unwrap();
        assert!((s.pairs[0].lambda - 5.0).abs() < 1e-10);
        assert!((s.pairs[1].lambda - 3.0).abs() < 1e-10);
        assert!((s.pairs[0].vector[0] - 1.0).abs() < 1e-8);
        assert!((s.pairs[1].vector[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn dense_oracle_agreement() {
        let a = random_symmetric(120, 3);
        let dense = linalg::symmetric_eigen(&a).unwrap();
        let opts = LanczosOptions {
            k: 6,
            tol: 1e-10,
            ..Default::default()
        };
        let s = top_k_eigen(&a, &opts, None).unwrap();
        for i in 0..6 {
            assert!((s.pairs[i].lambda - dense.values[i]).abs() < 1e-8);
            let c = linalg::dot(&s.pairs[i].vector, &dense.vectors[i]).abs();
            assert!(c > 1.0 - 1e-8, "pair {i}: cosine {c}");
            assert!(s.residuals[i] <= 1e-10 * s.pairs[i].lambda.abs().max(1.0));
        }
    }

    #[test]
    fn identity_operator_restarts_through_breakdowns() {
        let op = DMatrix::<f64>::identity(30, 30);
        let opts = LanczosOptions {
            k: 4,
            tol: 1e-10,
            ..Default::default()
        };
        let s = top_k_eigen(&op, &opts, None).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.lambdas().iter().all(|l| (l - 1.0).abs() < 1e-12));
    }

    #[test]
    fn small_operators_are_solved_exactly() {
        let op = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let opts = LanczosOptions {
            k: 2,
            ..Default::default()
        };
        let s = top_k_eigen(&op, &opts, None).unwrap();
        assert!((s.lambdas()[0] - 3.0).abs() < 1e-12);
        assert!((s.lambdas()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_operator_is_rejected() {
        let mut a = random_symmetric(20, 1);
        a[(0, 1)] += 1.0;
        let err = top_k_eigen(&a, &LanczosOptions::default(), None).unwrap_err();
        assert!(matches!(err, Error::AsymmetricOperator { .. }));
    }

    #[test]
    fn budget_exhaustion_reports_best_effort() {
        let a = random_symmetric(200, 9);
        let opts = LanczosOptions {
            k: 8,
            tol: 1e-14,
            max_iter: 12,
            ..Default::default()
        };
        match top_k_eigen(&a, &opts, None) {
            Err(Error::NotConverged { iterations, best }) => {
                assert_eq!(iterations, 12);
                assert_eq!(best.len(), 8);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn invalid_k_is_rejected() {
        let a = random_symmetric(5, 0);
        for k in [0, 6, 33] {
            let opts = LanczosOptions {
                k,
                ..Default::default()
            };
            assert!(top_k_eigen(&a, &opts, None).is_err());
        }
    }

    #[test]
    fn basis_stays_orthonormal() {
        let a = random_symmetric(300, 5);
        let basis = lanczos_basis(&a, 200, 1).unwrap();
        assert_eq!(basis.alpha.len(), 200);
        assert!(basis.orthogonality_drift() < 1e-10);
    }

    #[test]
    fn similarity_trivial_cases() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        let same = basis_similarity(&[&e1], &[&e1]).unwrap();
        assert_eq!(same.per_vector, vec![1.0]);
        assert!((same.subspace - 1.0).abs() < 1e-15);
        let perp = basis_similarity(&[&e1], &[&e2]).unwrap();
        assert_eq!(perp.per_vector, vec![0.0]);
        assert!(perp.subspace.abs() < 1e-15);
    }

    #[test]
    fn similarity_of_planes_at_zero_and_sixty_degrees() {
        // span(e1, e2) versus span(e1, cos60·e2 + sin60·e3).
        let c = 0.5f64;
        let s = (1.0 - c * c).sqrt();
        let a1 = [1.0, 0.0, 0.0, 0.0];
        let a2 = [0.0, 1.0, 0.0, 0.0];
        let b1 = [1.0, 0.0, 0.0, 0.0];
        let b2 = [0.0, c, s, 0.0];
        let sim = basis_similarity(&[&a1, &a2], &[&b1, &b2]).unwrap();
        assert!((sim.subspace - 0.75).abs() < 1e-12);
        assert!((sim.sin2_distance() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rotation_within_span_keeps_subspace_similarity() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let f1 = [r, r, 0.0];
        let f2 = [-r, r, 0.0];
        let sim = basis_similarity(&[&e1, &e2], &[&f1, &f2]).unwrap();
        assert!(sim.per_vector.iter().all(|c| (c - r).abs() < 1e-12));
        assert!((sim.subspace - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_dimension_mismatch() {
        let a = Spectrum {
            pairs: vec![EigenPair {
                lambda: 1.0,
                vector: vec![1.0, 0.0],
            }],
            residuals: vec![0.0],
            iterations: 1,
        };
        let mut b = a.clone();
        b.pairs[0].vector.push(0.0);
        assert!(matches!(
            eigvec_similarity(&a, &b, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn alpha_of_a_quadratic_vanishes() {
        let q = Quadratic::new(random_symmetric(10, 2) + DMatrix::identity(10, 10) * 3.0);
        let theta = vec![0.3; 10];
        let opts = LanczosOptions {
            k: 1,
            tol: 1e-12,
            ..Default::default()
        };
        let s = hessian_spectrum(&q, &theta, &opts, None).unwrap();
        for m in [AlphaMethod::FiniteDifference, AlphaMethod::NestedHvp] {
            let a = sharpening_factor(&q, &theta, &s, m, 1e-4, &opts).unwrap();
            assert!(a.alpha.abs() < 1e-6, "{m:?}: {}", a.alpha);
        }
    }

    #[test]
    fn alpha_of_the_cubic() {
        let cubic = Scalar {
            f: |x: f64| x * x * x,
            df: |x: f64| 3.0 * x * x,
            d2f: |x: f64| 6.0 * x,
        };
        let opts = LanczosOptions {
            k: 1,
            ..Default::default()
        };
        let s = hessian_spectrum(&cubic, &[1.0], &opts, None).unwrap();
        assert!((s.top().unwrap() - 6.0).abs() < 1e-12);
        for m in [AlphaMethod::FiniteDifference, AlphaMethod::NestedHvp] {
            let a = sharpening_factor(&cubic, &[1.0], &s, m, 1e-4, &opts).unwrap();
            assert!((a.alpha + 18.0).abs() < 1e-6, "{m:?}: {}", a.alpha);
        }
    }

    #[test]
    fn alpha_needs_a_gradient() {
        let q = Quadratic::diagonal(&[1.0, 2.0]);
        let s = hessian_spectrum(&q, &[0.0, 0.0], &LanczosOptions { k: 1, ..Default::default() }, None).unwrap();
        let err = sharpening_factor(&q, &[0.0, 0.0], &s, AlphaMethod::NestedHvp, 1e-4, &LanczosOptions::default());
        assert!(matches!(err, Err(Error::ZeroGradient(_))));
    }

    #[test]
    fn spectrum_csv_layout() {
        let s = top_k_eigen(
            &DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0])),
            &LanczosOptions { k: 2, ..Default::default() },
            None,
        )
        .unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "index,lambda,residual");
        assert!(lines[1].starts_with("1,2.0000000000000000e0,"));
        assert_eq!(lines.len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn subspace_similarity_is_rotation_invariant(seed in 0u64..1000, angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let m = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let qa = m.qr().q();
            let m2 = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let qb = m2.qr().q();
            let cols = |q: &DMatrix<f64>| -> Vec<Vec<f64>> {
                (0..2).map(|j| q.column(j).iter().copied().collect()).collect()
            };
            let a = cols(&qa);
            let b = cols(&qb);
            let (c, s) = (angle.cos(), angle.sin());
            let rot: Vec<Vec<f64>> = vec![
                b[0].iter().zip(&b[1]).map(|(x, y)| c * x - s * y).collect(),
                b[0].iter().zip(&b[1]).map(|(x, y)| s * x + c * y).collect(),
            ];
            let s1 = basis_similarity(&refs(&a), &refs(&b)).unwrap();
            let s2 = basis_similarity(&refs(&a), &refs(&rot)).unwrap();
            let s3 = basis_similarity(&refs(&b), &refs(&a)).unwrap();
            prop_assert!((s1.subspace - s2.subspace).abs() < 1e-12);
            prop_assert!((s1.subspace - s3.subspace).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&s1.subspace));
        }

        #[test]
        fn top_eigenvalue_is_monotone_in_k(seed in 0u64..200) {
            let a = random_symmetric(60, seed);
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=5 {
                let opts = LanczosOptions { k, tol: 1e-8, seed, ..Default::default() };
                let s = top_k_eigen(&a, &opts, None).unwrap();
                // Converged values agree to rounding; only a real drop counts.
                prop_assert!(s.top().unwrap() >= prev - 1e-12 * prev.abs(), "k={}: {} < {}", k, s.top().unwrap(), prev);
                prev = s.top().unwrap();
            }
        }
    }
}
