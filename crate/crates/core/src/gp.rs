//! Unconstrained GP regression: the training-data Cholesky factor, the
//! Gaussian predictive law, the marginal likelihood and multi-start MLE.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::{Deriv, KernelConfig};
use crate::linalg::{cholesky, col_sq_norms, solve_lower, solve_lower_transpose_vec, solve_lower_vec};
use crate::normal::LN_SQRT_2PI;
use crate::optim::NelderMead;
use crate::{Error, Result};

/// Smallest noise variance used when factorizing `K + sigma^2 I`.
pub const NUGGET_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TrainingSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidParameter("training set is empty".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!("{} inputs but {} observations", x.nrows(), y.len())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("training data contains non-finite values".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub kernel: KernelConfig,
    pub noise_var: f64,
    pub mean_const: f64,
    #[serde(default = "default_nugget")]
    pub nugget_floor: f64,
}

fn default_nugget() -> f64 {
    NUGGET_FLOOR
}

impl HyperParams {
    pub fn new(kernel: KernelConfig, noise_var: f64) -> Self {
        Self { kernel, noise_var, mean_const: 0.0, nugget_floor: NUGGET_FLOOR }
    }

    pub fn effective_noise(&self) -> f64 {
        self.noise_var.max(self.nugget_floor)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise_var >= 0.0) || !self.mean_const.is_finite() {
            return Err(Error::InvalidParameter(format!("noise variance must be >= 0, got {}", self.noise_var)));
        }
        Ok(())
    }
}

/// `L = chol(K_{X,X} + sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct DataFactor {
    pub l: DMatrix<f64>,
    pub noise: f64,
}

pub fn factor(train: &TrainingSet, hyper: &HyperParams) -> Result<DataFactor> {
    hyper.validate()?;
    if hyper.kernel.dim() != train.dim() {
        return Err(Error::Dimension(format!("kernel dimension {} vs data dimension {}", hyper.kernel.dim(), train.dim())));
    }
    let noise = hyper.effective_noise();
    let mut k = hyper.kernel.gram(&train.x, &train.x, Deriv::Value, Deriv::Value)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    Ok(DataFactor { l: cholesky(&k)?, noise })
}

/// Predictive mean and covariance of the latent `f(X*)` given the data.
pub fn predict(
    train: &TrainingSet,
    hyper: &HyperParams,
    factor: &DataFactor,
    xstar: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if xstar.ncols() != train.dim() {
        return Err(Error::Dimension(format!("prediction points have {} columns, expected {}", xstar.ncols(), train.dim())));
    }
    let k_xs = hyper.kernel.gram(&train.x, xstar, Deriv::Value, Deriv::Value)?;
    let v2 = solve_lower(&factor.l, &k_xs);
    let resid = train.y.add_scalar(-hyper.mean_const);
    let alpha = solve_lower_vec(&factor.l, &resid);
    let mean = (v2.transpose() * alpha).add_scalar(hyper.mean_const);
    let mut cov = hyper.kernel.gram(xstar, xstar, Deriv::Value, Deriv::Value)? - v2.transpose() * &v2;
    crate::linalg::symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Predictive mean and marginal variances only.
pub fn predict_diag(
    train: &TrainingSet,
    hyper: &HyperParams,
    factor: &DataFactor,
    xstar: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let k_xs = hyper.kernel.gram(&train.x, xstar, Deriv::Value, Deriv::Value)?;
    let v2 = solve_lower(&factor.l, &k_xs);
    let alpha = solve_lower_vec(&factor.l, &train.y.add_scalar(-hyper.mean_const));
    let mean = (v2.transpose() * alpha).add_scalar(hyper.mean_const);
    let var = col_sq_norms(&v2).map(|q| hyper.kernel.variance - q);
    Ok((mean, var))
}

/// `ln p(Y | theta)` under `N(mu, K + sigma^2 I)`.
pub fn log_marginal_likelihood(train: &TrainingSet, hyper: &HyperParams) -> Result<f64> {
    let f = factor(train, hyper)?;
    Ok(log_marginal_likelihood_with(train, hyper, &f))
}

pub fn log_marginal_likelihood_with(train: &TrainingSet, hyper: &HyperParams, f: &DataFactor) -> f64 {
    let z = solve_lower_vec(&f.l, &train.y.add_scalar(-hyper.mean_const));
    let log_det_half: f64 = f.l.diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * z.norm_squared() - log_det_half - train.len() as f64 * LN_SQRT_2PI
}

/// `K^{-1}(Y - mu)` via the factor (used by tests and diagnostics).
pub fn weights(train: &TrainingSet, hyper: &HyperParams, f: &DataFactor) -> DVector<f64> {
    let z = solve_lower_vec(&f.l, &train.y.add_scalar(-hyper.mean_const));
    solve_lower_transpose_vec(&f.l, &z)
}

/// Box for the MLE search, in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleBounds {
    pub variance: (f64, f64),
    pub lengthscale: Vec<(f64, f64)>,
    /// `None` keeps the initial noise variance fixed.
    pub noise_var: Option<(f64, f64)>,
}

impl MleBounds {
    pub fn uniform(dim: usize, variance: (f64, f64), lengthscale: (f64, f64), noise_var: Option<(f64, f64)>) -> Self {
        Self { variance, lengthscale: vec![lengthscale; dim], noise_var }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a > 0.0 && a <= b && b.is_finite();
        if self.lengthscale.len() != dim {
            return Err(Error::Dimension(format!("{} lengthscale bounds for dimension {dim}", self.lengthscale.len())));
        }
        if !ok(self.variance) || !self.lengthscale.iter().all(|b| ok(*b)) || !self.noise_var.is_none_or(ok) {
            return Err(Error::InvalidParameter("MLE bounds must be positive and ordered".into()));
        }
        Ok(())
    }

    fn log_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.variance.0.ln()];
        let mut hi = vec![self.variance.1.ln()];
        for (a, b) in &self.lengthscale {
            lo.push(a.ln());
            hi.push(b.ln());
        }
        if let Some((a, b)) = self.noise_var {
            lo.push(a.ln());
            hi.push(b.ln());
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone)]
pub struct MleOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_evals: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { restarts: 5, seed: 0, max_evals: 1500 }
    }
}

fn pack(h: &HyperParams, fit_noise: bool) -> Vec<f64> {
    let mut v = vec![h.kernel.variance.ln()];
    v.extend(h.kernel.lengthscales.iter().map(|l| l.ln()));
    if fit_noise {
        v.push(h.noise_var.max(1e-300).ln());
    }
    v
}

fn unpack(base: &HyperParams, theta: &[f64], fit_noise: bool) -> HyperParams {
    let d = base.kernel.dim();
    let mut h = base.clone();
    h.kernel.variance = theta[0].exp();
    h.kernel.lengthscales = theta[1..=d].iter().map(|t| t.exp()).collect();
    if fit_noise {
        h.noise_var = theta[d + 1].exp();
    }
    h
}

/// Maximizes the marginal likelihood over log-parameters with Nelder-Mead,
/// starting once from `init` and `restarts - 1` more times from a Latin
/// hypercube over the bound box. Deterministic given `opts.seed`.
pub fn mle_fit(train: &TrainingSet, init: &HyperParams, bounds: &MleBounds, opts: &MleOptions) -> Result<HyperParams> {
    init.validate()?;
    bounds.validate(train.dim())?;
    if opts.restarts == 0 {
        return Err(Error::InvalidParameter("restarts must be >= 1".into()));
    }
    let fit_noise = bounds.noise_var.is_some();
    let (lo, hi) = bounds.log_box();
    let mut starts = vec![pack(init, fit_noise)];
    if opts.restarts > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let boxes: Vec<(f64, f64)> = lo.iter().copied().zip(hi.iter().copied()).collect();
        let design = crate::bench::lhs_sample(opts.restarts - 1, &boxes, &mut rng);
        starts.extend(crate::kernel::rows_of(&design));
    }
    let nm = NelderMead { max_evals: opts.max_evals, initial_step: 0.7, ..Default::default() };
    let objective = |theta: &[f64]| -> f64 {
        let h = unpack(init, theta, fit_noise);
        match log_marginal_likelihood(train, &h) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let results: Vec<_> = starts.par_iter().map(|s| nm.minimize(objective, s, &lo, &hi)).collect();
    let best = results
        .iter()
        .filter(|m| m.f.is_finite())
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .ok_or_else(|| Error::Optimization("no start produced a finite likelihood".into()))?;
    Ok(unpack(init, &best.x, fit_noise))
}

/// `ln p(Y | theta) + ln p(C | Y, theta)` for an assembled constrained model.
/// Evaluation only; returns the likelihood and the Monte Carlo standard error
/// of the constraint term.
pub fn constrained_log_likelihood(
    model: &crate::cgp::ConstrainedGp,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<(f64, f64)> {
    let lml = log_marginal_likelihood_with(&model.train, &model.hyper, &model.data_factor);
    let (lp, se) = model.prob_constraint_given_data(n, rng)?;
    Ok((lml + lp, se))
}
