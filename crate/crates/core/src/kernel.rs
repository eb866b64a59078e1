//! Stationary covariance functions `K(x, x') = s * k(r)` with
//! `r^2 = sum_i ((x_i - x'_i) / l_i)^2`, and their input derivatives.
//!
//! All derivative forms are written through the radial profile
//! `g(r) = k'(r) / r` and `g'(r) / r`, both of which are finite at `r = 0`
//! for the RBF and Matern 5/2 families, so no 0/0 branch is needed:
//!
//! ```text
//! dK/dx_i           =  s * g(r) * h_i / l_i^2
//! d2K/dx_i dx'_j    = -s * [ (g'(r)/r) * h_i h_j / (l_i^2 l_j^2) + g(r) * delta_ij / l_i^2 ]
//! ```
//!
//! where `h = x - x'`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Matern52,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" | "se" => Ok(Self::Rbf),
            "matern52" | "matern5/2" | "matern" => Ok(Self::Matern52),
            other => Err(Error::InvalidParameter(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// Which linear functional acts on one argument of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Deriv {
    /// Point evaluation `f(x)`.
    Value,
    /// Partial derivative `df/dx_axis` (0-based).
    Partial(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelConfig {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let cfg = Self { family, variance, lengthscales };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn isotropic(family: KernelFamily, variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(family, variance, vec![lengthscale; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel variance must be positive, got {}", self.variance)));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter("kernel needs at least one lengthscale".into()));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!("lengthscales must be positive, got {l}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check_points(&self, x: &[f64], x2: &[f64]) -> Result<()> {
        self.validate()?;
        if x.len() != self.dim() || x2.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "kernel has {} lengthscales, points have {} and {} coordinates",
                self.dim(),
                x.len(),
                x2.len()
            )));
        }
        Ok(())
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim() {
            return Err(Error::InvalidParameter(format!("axis {axis} out of range for dimension {}", self.dim())));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_points(x, x2)?;
        Ok(self.value(x, x2))
    }

    /// `dK(x, x2)/dx_i`, differentiating the first argument.
    pub fn eval_d10(&self, axis: usize, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_points(x, x2)?;
        self.check_axis(axis)?;
        Ok(self.d10(axis, x, x2))
    }

    /// `d^2 K(x, x2) / dx_i dx2_j`.
    pub fn eval_d11(&self, i: usize, j: usize, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_points(x, x2)?;
        self.check_axis(i)?;
        self.check_axis(j)?;
        Ok(self.d11(i, j, x, x2))
    }

    fn r(&self, x: &[f64], x2: &[f64]) -> f64 {
        x.iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let t = (a - b) / l;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }

    fn profile(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Rbf => (-0.5 * r * r).exp(),
            KernelFamily::Matern52 => {
                let sr = SQRT5 * r;
                (1.0 + sr + sr * sr / 3.0) * (-sr).exp()
            }
        }
    }

    /// `(k'(r)/r, (d/dr)(k'(r)/r) / r)`
    fn profile_derivs(&self, r: f64) -> (f64, f64) {
        match self.family {
            KernelFamily::Rbf => {
                let e = (-0.5 * r * r).exp();
                (-e, e)
            }
            KernelFamily::Matern52 => {
                let e = (-SQRT5 * r).exp();
                (-(5.0 / 3.0) * (1.0 + SQRT5 * r) * e, (25.0 / 3.0) * e)
            }
        }
    }

    pub(crate) fn value(&self, x: &[f64], x2: &[f64]) -> f64 {
        self.variance * self.profile(self.r(x, x2))
    }

    pub(crate) fn d10(&self, i: usize, x: &[f64], x2: &[f64]) -> f64 {
        let (g, _) = self.profile_derivs(self.r(x, x2));
        let li = self.lengthscales[i];
        self.variance * g * (x[i] - x2[i]) / (li * li)
    }

    pub(crate) fn d11(&self, i: usize, j: usize, x: &[f64], x2: &[f64]) -> f64 {
        let (g, gp) = self.profile_derivs(self.r(x, x2));
        let li2 = self.lengthscales[i] * self.lengthscales[i];
        let lj2 = self.lengthscales[j] * self.lengthscales[j];
        let hi = x[i] - x2[i];
        let hj = x[j] - x2[j];
        let mut v = gp * hi * hj / (li2 * lj2);
        if i == j {
            v += g / li2;
        }
        -self.variance * v
    }

    /// `cov(left f(x), right f(x2))` for two point functionals.
    pub fn cov(&self, left: Deriv, x: &[f64], right: Deriv, x2: &[f64]) -> f64 {
        match (left, right) {
            (Deriv::Value, Deriv::Value) => self.value(x, x2),
            (Deriv::Partial(i), Deriv::Value) => self.d10(i, x, x2),
            (Deriv::Value, Deriv::Partial(j)) => self.d10(j, x2, x),
            (Deriv::Partial(i), Deriv::Partial(j)) => self.d11(i, j, x, x2),
        }
    }

    /// Gram matrix with entry `(r, c) = cov(left f(X_r), right f(X2_c))`.
    pub fn gram(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>, left: Deriv, right: Deriv) -> Result<DMatrix<f64>> {
        self.validate()?;
        if x.ncols() != self.dim() || x2.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "gram: kernel dimension {}, inputs have {} and {} columns",
                self.dim(),
                x.ncols(),
                x2.ncols()
            )));
        }
        for d in [left, right] {
            if let Deriv::Partial(a) = d {
                self.check_axis(a)?;
            }
        }
        let rows = rows_of(x);
        let rows2 = rows_of(x2);
        Ok(DMatrix::from_fn(rows.len(), rows2.len(), |r, c| self.cov(left, &rows[r], right, &rows2[c])))
    }
}

/// Rows of a point matrix as owned vectors.
pub fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}
