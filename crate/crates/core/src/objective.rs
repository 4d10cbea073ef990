//! The loss-surface interface shared by the trainer and the spectral tools.

use nalgebra::DMatrix;

use crate::linalg;
use crate::spectral::{FnOperator, SymmetricOperator};

/// A twice-differentiable scalar loss over a flat parameter vector.
///
/// Implementations validate shapes up front, so these methods do not fail.
pub trait Objective {
    fn dim(&self) -> usize;

    fn loss(&self, params: &[f64]) -> f64;

    fn loss_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>);

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        self.loss_and_gradient(params).1
    }

    /// `v ↦ H(θ)v` at a fixed `θ`.
    fn hessian_operator<'a>(&'a self, params: &'a [f64]) -> Box<dyn SymmetricOperator + 'a>;

    fn hvp(&self, params: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.hessian_operator(params).apply(v, &mut out);
        out
    }

    /// Training accuracy, for objectives that classify.
    fn accuracy(&self, _params: &[f64]) -> Option<f64> {
        None
    }

    /// Loss, gradient and accuracy together; classifiers override this to
    /// share one forward pass.
    fn evaluate(&self, params: &[f64]) -> Evaluation {
        let (loss, gradient) = self.loss_and_gradient(params);
        Evaluation {
            loss,
            gradient,
            accuracy: self.accuracy(params),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub accuracy: Option<f64>,
}

/// `L(θ) = ½ (θ − c)ᵀ A (θ − c)` with symmetric `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>) -> Self {
        let n = a.nrows();
        Self {
            a,
            center: vec![0.0; n],
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(d)))
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn loss(&self, params: &[f64]) -> f64 {
        self.loss_and_gradient(params).0
    }

    fn loss_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let x: Vec<f64> = params.iter().zip(&self.center).map(|(p, c)| p - c).collect();
        let mut g = vec![0.0; x.len()];
        self.a.apply(&x, &mut g);
        (0.5 * linalg::dot(&x, &g), g)
    }

    fn hessian_operator<'a>(&'a self, _params: &'a [f64]) -> Box<dyn SymmetricOperator + 'a> {
        Box::new(&self.a)
    }
}

/// One-parameter objective given by closures for `L`, `L′`, `L″`.
pub struct Scalar<F, G, H> {
    pub f: F,
    pub df: G,
    pub d2f: H,
}

impl<F, G, H> Objective for Scalar<F, G, H>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
    H: Fn(f64) -> f64,
{
    fn dim(&self) -> usize {
        1
    }

    fn loss(&self, params: &[f64]) -> f64 {
        (self.f)(params[0])
    }

    fn loss_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        ((self.f)(params[0]), vec![(self.df)(params[0])])
    }

    fn hessian_operator<'a>(&'a self, params: &'a [f64]) -> Box<dyn SymmetricOperator + 'a> {
        let h = (self.d2f)(params[0]);
        Box::new(FnOperator::new(1, move |v: &[f64], out: &mut [f64]| out[0] = h * v[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_and_hvp() {
        let q = Quadratic::diagonal(&[2.0, 4.0]);
        let (l, g) = q.loss_and_gradient(&[1.0, 1.0]);
        assert_eq!(l, 3.0);
        assert_eq!(g, vec![2.0, 4.0]);
        assert_eq!(q.hvp(&[0.3, 0.1], &[1.0, -1.0]), vec![2.0, -4.0]);
    }

    #[test]
    fn half_squared_norm_has_identity_hessian() {
        let q = Quadratic::new(DMatrix::identity(5, 5));
        let v = [0.5, -1.0, 2.0, 0.0, 3.0];
        assert_eq!(q.hvp(&[1.0; 5], &v), v.to_vec());
    }
}
