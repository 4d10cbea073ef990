//! Even-degree convex polynomial losses on a scalar network output.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `z(x) = a2 x^2 + a4 x^4 + ... + a2q x^2q` with nonnegative coefficients.
///
/// Nonnegative even-monomial coefficients certify that `z` is convex with a
/// unique minimum `z(0) = 0`, and that `z'(x) * x >= 0` everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PolyLoss {
    /// `coeffs[i]` multiplies `x^(2i + 2)`.
    coeffs: Vec<f64>,
}

impl PolyLoss {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput(
                "polynomial loss coefficients must be finite and nonnegative".into(),
            ));
        }
        if !coeffs.iter().any(|c| *c > 0.0) {
            return Err(Error::InvalidInput(
                "polynomial loss needs at least one positive coefficient".into(),
            ));
        }
        Ok(Self { coeffs })
    }

    /// `z(x) = x^2`.
    pub fn quadratic() -> Self {
        Self { coeffs: vec![1.0] }
    }

    /// `z(x) = x^4`.
    pub fn quartic() -> Self {
        Self {
            coeffs: vec![0.0, 1.0],
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// Polynomial degree `2q`.
    pub fn degree(&self) -> usize {
        let last = self.coeffs.iter().rposition(|c| *c > 0.0).unwrap_or(0);
        2 * (last + 1)
    }

    pub fn is_quadratic(&self) -> bool {
        self.degree() == 2
    }

    pub fn value(&self, x: f64) -> f64 {
        let x2 = x * x;
        let mut pow = x2;
        let mut acc = 0.0;
        for &a in &self.coeffs {
            acc += a * pow;
            pow *= x2;
        }
        acc
    }

    pub fn d1(&self, x: f64) -> f64 {
        let x2 = x * x;
        let mut pow = x;
        let mut acc = 0.0;
        for (i, &a) in self.coeffs.iter().enumerate() {
            let k = (2 * i + 2) as f64;
            acc += k * a * pow;
            pow *= x2;
        }
        acc
    }

    pub fn d2(&self, x: f64) -> f64 {
        let x2 = x * x;
        let mut pow = 1.0;
        let mut acc = 0.0;
        for (i, &a) in self.coeffs.iter().enumerate() {
            let k = (2 * i + 2) as f64;
            acc += k * (k - 1.0) * a * pow;
            pow *= x2;
        }
        acc
    }
}

impl TryFrom<Vec<f64>> for PolyLoss {
    type Error = Error;

    fn try_from(coeffs: Vec<f64>) -> Result<Self> {
        Self::new(coeffs)
    }
}

impl From<PolyLoss> for Vec<f64> {
    fn from(p: PolyLoss) -> Self {
        p.coeffs
    }
}
