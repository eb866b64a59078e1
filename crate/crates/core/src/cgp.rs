//! The constrained posterior: Cholesky-based factors of the joint law of data
//! and virtual observations, posterior sampling, constraint probabilities and
//! moment summaries.
//!
//! Notation follows the code, not any particular write-up: `C` is the vector
//! of virtual observations (one per operator row), `r = Y - mu` the data
//! residual, `L` the data factor and `L1` the factor of the conditional
//! covariance of `C` given the data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::gp::{factor, DataFactor, HyperParams, TrainingSet};
use crate::kernel::Deriv;
use crate::linalg::{cholesky, col_sq_norms, min_eigenvalue, psd_sqrt, solve_lower, solve_lower_transpose, symmetrize};
use crate::linop::{MeanFunction, OperatorSet};
use crate::normal::interval_mass;
use crate::tmvn::{log_prob_box, sample_auto, sample_moments, truncnorm_moments_1d, Fallback, TmvnProblem};
use crate::{Error, Result};

/// Default variance of the virtual observation noise.
pub const SIGMA_V2_DEFAULT: f64 = 1e-6;

/// Quantities that depend on the data and the virtual sites but not on
/// prediction points.
#[derive(Debug, Clone)]
pub struct PosteriorFactors {
    /// `L \ K_{X,Xv} L^T`, `N x Nv`.
    pub v1: DMatrix<f64>,
    /// `L K_{Xv,X} (K + s2 I)^{-1}`, `Nv x N`.
    pub a1: DMatrix<f64>,
    /// Covariance of `C` given the data, `Nv x Nv`.
    pub b1: DMatrix<f64>,
    pub l1: DMatrix<f64>,
    /// Operator applied to the prior mean at the sites.
    pub prior_mean_v: DVector<f64>,
    /// Mean of `C` given the data.
    pub cond_mean_v: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ConstrainedGp {
    pub train: TrainingSet,
    pub hyper: HyperParams,
    pub opset: OperatorSet,
    pub sigma_v2: f64,
    pub data_factor: DataFactor,
    pub factors: PosteriorFactors,
    /// Cached draws of `C`, one per row (`k x Nv`).
    pub c_samples: Option<DMatrix<f64>>,
    /// Markov chain used for `C` when rejection is too slow.
    pub sampler: Fallback,
}

/// The law of `f(X*)` given data and constraints:
/// `base_mean + A (C - prior_mean_v) + N(0, sigma)`.
#[derive(Debug, Clone)]
pub struct PredictiveLaw {
    pub xstar: DMatrix<f64>,
    pub base_mean: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Data-only pieces, kept for inspection and oracle tests.
    pub a2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub b3: DMatrix<f64>,
}

/// Same structure as [`PredictiveLaw`] for the operator rows at a batch of
/// points. Rows are indexed `i * n_points + m` for sub-operator `i` at point `m`.
#[derive(Debug, Clone)]
pub struct ConstraintLaw {
    pub n_points: usize,
    pub n_ops: usize,
    pub base_mean: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: Option<DMatrix<f64>>,
    pub sigma_diag: DVector<f64>,
    pub a2: DMatrix<f64>,
    pub b2_diag: DVector<f64>,
    pub b3: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub v3: DMatrix<f64>,
}

/// Where the mean and covariance of `C` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSource {
    Samples,
    CorrelationFree,
}

/// How constraint probabilities at new points are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbMethod {
    /// Average of conditional Gaussian box probabilities over cached draws of `C`.
    Samples,
    /// One Gaussian box probability from moment-matched marginals.
    Gaussian(MomentSource),
}

/// Marginal posterior summaries at prediction points.
#[derive(Debug, Clone)]
pub struct MarginalSummary {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub p025: DVector<f64>,
    pub p975: DVector<f64>,
}

/// `M x k` view of a vector laid out as `i * M + m`.
pub fn by_point(v: &DVector<f64>, n_points: usize, n_ops: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_points, n_ops, |m, i| v[i * n_points + m])
}

impl ConstrainedGp {
    /// Factorizes everything that does not depend on prediction points.
    pub fn assemble(train: TrainingSet, hyper: HyperParams, opset: OperatorSet, sigma_v2: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidParameter("training set is empty".into()));
        }
        if !(sigma_v2 >= 0.0) || !sigma_v2.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma_v2 must be finite and >= 0, got {sigma_v2}")));
        }
        if opset.dim() != train.dim() {
            return Err(Error::Dimension(format!("operator dimension {} vs data dimension {}", opset.dim(), train.dim())));
        }
        let data_factor = factor(&train, &hyper)?;
        let factors = Self::site_factors(&train, &hyper, &opset, sigma_v2, &data_factor)?;
        Ok(Self { train, hyper, opset, sigma_v2, data_factor, factors, c_samples: None, sampler: Fallback::default() })
    }

    fn site_factors(
        train: &TrainingSet,
        hyper: &HyperParams,
        opset: &OperatorSet,
        sigma_v2: f64,
        data_factor: &DataFactor,
    ) -> Result<PosteriorFactors> {
        let l = &data_factor.l;
        let kxv = opset.cross_cov(&hyper.kernel, &train.x)?;
        let v1 = solve_lower(l, &kxv);
        let a1 = solve_lower_transpose(l, &v1).transpose();
        let mut b1 = opset.operator_cov(&hyper.kernel, sigma_v2)? - v1.transpose() * &v1;
        symmetrize(&mut b1);
        let l1 = cholesky(&b1).map_err(|_| Error::DegenerateConstraintCov { min_eigenvalue: min_eigenvalue(&b1) })?;
        let prior_mean_v = opset.apply_mean(&MeanFunction::Constant(hyper.mean_const))?;
        let resid = train.y.add_scalar(-hyper.mean_const);
        let cond_mean_v = &prior_mean_v + &a1 * &resid;
        let (lower, upper) = opset.bounds_at_sites()?;
        Ok(PosteriorFactors { v1, a1, b1, l1, prior_mean_v, cond_mean_v, lower, upper })
    }

    /// Replaces the operator set, reusing the data factor. Drops cached samples.
    pub fn with_opset(&self, opset: OperatorSet) -> Result<Self> {
        if opset.dim() != self.train.dim() {
            return Err(Error::Dimension(format!("operator dimension {} vs data dimension {}", opset.dim(), self.train.dim())));
        }
        let factors = Self::site_factors(&self.train, &self.hyper, &opset, self.sigma_v2, &self.data_factor)?;
        Ok(Self {
            train: self.train.clone(),
            hyper: self.hyper.clone(),
            opset,
            sigma_v2: self.sigma_v2,
            data_factor: self.data_factor.clone(),
            factors,
            c_samples: None,
            sampler: self.sampler,
        })
    }

    pub fn n_virtual(&self) -> usize {
        self.factors.prior_mean_v.len()
    }

    fn residual(&self) -> DVector<f64> {
        self.train.y.add_scalar(-self.hyper.mean_const)
    }

    /// The truncated Gaussian law of `C` given the data.
    pub fn constraint_prior_law(&self) -> Result<TmvnProblem> {
        let f = &self.factors;
        TmvnProblem::new(f.cond_mean_v.clone(), f.b1.clone(), f.lower.clone(), f.upper.clone())
    }

    /// Draws `k` samples of `C` and caches them.
    pub fn refresh_c_samples<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<()> {
        self.c_samples = Some(self.draw_c(k, rng)?);
        Ok(())
    }

    fn draw_c<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if self.n_virtual() == 0 {
            return Ok(DMatrix::zeros(k, 0));
        }
        let (s, _) = sample_auto(&self.constraint_prior_law()?, k, rng, self.sampler)?;
        Ok(s)
    }

    /// The first `k` cached draws, or `k` fresh ones when the cache is short.
    fn c_draws<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        match &self.c_samples {
            Some(c) if c.nrows() >= k => Ok(c.rows(0, k).into_owned()),
            _ => self.draw_c(k, rng),
        }
    }

    /// `C - prior_mean_v` for each draw, as columns (`Nv x k`).
    fn centered_draws(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = c.transpose();
        for mut col in t.column_iter_mut() {
            col -= &self.factors.prior_mean_v;
        }
        t
    }

    fn check_points(&self, xstar: &DMatrix<f64>) -> Result<()> {
        if xstar.ncols() != self.train.dim() {
            return Err(Error::Dimension(format!("prediction points have {} columns, expected {}", xstar.ncols(), self.train.dim())));
        }
        Ok(())
    }

    /// Everything needed to describe `f(X*)` given data and constraints.
    pub fn predictive_law(&self, xstar: &DMatrix<f64>) -> Result<PredictiveLaw> {
        self.check_points(xstar)?;
        let kern = &self.hyper.kernel;
        let l = &self.data_factor.l;
        let f = &self.factors;
        let kxs = kern.gram(&self.train.x, xstar, Deriv::Value, Deriv::Value)?;
        let v2 = solve_lower(l, &kxs);
        let a2 = solve_lower_transpose(l, &v2).transpose();
        let mut b2 = kern.gram(xstar, xstar, Deriv::Value, Deriv::Value)? - v2.transpose() * &v2;
        symmetrize(&mut b2);
        let b3 = self.opset.cross_cov(kern, xstar)? - v2.transpose() * &f.v1;
        let v3 = solve_lower(&f.l1, &b3.transpose());
        let a = solve_lower_transpose(&f.l1, &v3).transpose();
        let b = &a2 - &a * &f.a1;
        let mut sigma = &b2 - v3.transpose() * &v3;
        symmetrize(&mut sigma);
        let base_mean = (&b * self.residual()).add_scalar(self.hyper.mean_const);
        Ok(PredictiveLaw { xstar: xstar.clone(), base_mean, a, b, sigma, a2, b2, b3 })
    }

    /// Mean, `A` and marginal variances only.
    fn predictive_marginals(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
        self.check_points(xstar)?;
        let kern = &self.hyper.kernel;
        let l = &self.data_factor.l;
        let f = &self.factors;
        let kxs = kern.gram(&self.train.x, xstar, Deriv::Value, Deriv::Value)?;
        let v2 = solve_lower(l, &kxs);
        let a2 = solve_lower_transpose(l, &v2).transpose();
        let b3 = self.opset.cross_cov(kern, xstar)? - v2.transpose() * &f.v1;
        let v3 = solve_lower(&f.l1, &b3.transpose());
        let a = solve_lower_transpose(&f.l1, &v3).transpose();
        let b = &a2 - &a * &f.a1;
        let var = (col_sq_norms(&v2) + col_sq_norms(&v3)).map(|q| kern.variance - q);
        let base_mean = (&b * self.residual()).add_scalar(self.hyper.mean_const);
        Ok((base_mean, a, var))
    }

    /// `k` joint posterior draws of `f(X*)`, one per column (`M x k`).
    /// Uses the cached draws of `C` when at least `k` are available.
    pub fn sample_posterior<R: Rng + ?Sized>(&self, xstar: &DMatrix<f64>, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let law = self.predictive_law(xstar)?;
        let (q, _) = psd_sqrt(&law.sigma)?;
        let c = self.c_draws(k, rng)?;
        let m = xstar.nrows();
        let u = DMatrix::from_fn(m, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut out = &law.a * self.centered_draws(&c) + q * u;
        for mut col in out.column_iter_mut() {
            col += &law.base_mean;
        }
        Ok(out)
    }

    /// `k` joint draws of every operator row at `X*`, one draw per column.
    /// Rows are indexed `i * M + m` as in [`ConstraintLaw`].
    pub fn sample_constraint<R: Rng + ?Sized>(&self, xstar: &DMatrix<f64>, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let law = self.constraint_posterior(xstar, true)?;
        let sigma = law.sigma.as_ref().ok_or_else(|| Error::Dimension("missing operator covariance".into()))?;
        let (q, _) = psd_sqrt(sigma)?;
        let c = self.c_draws(k, rng)?;
        let u = DMatrix::from_fn(sigma.nrows(), k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut out = &law.a * self.centered_draws(&c) + q * u;
        for mut col in out.column_iter_mut() {
            col += &law.base_mean;
        }
        Ok(out)
    }

    /// Pointwise sample mean, variance and 2.5/97.5% quantiles of `f(X*)`
    /// from `k` draws of each marginal. Marginals are exact; the joint
    /// dependence between points is not simulated.
    pub fn posterior_marginal_summary<R: Rng + ?Sized>(&self, xstar: &DMatrix<f64>, k: usize, rng: &mut R) -> Result<MarginalSummary> {
        if k < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: k });
        }
        let (base, a, var) = self.predictive_marginals(xstar)?;
        let c = self.c_draws(k, rng)?;
        let centered = self.centered_draws(&c);
        let m = xstar.nrows();
        let mut out = MarginalSummary {
            mean: DVector::zeros(m),
            var: DVector::zeros(m),
            p025: DVector::zeros(m),
            p975: DVector::zeros(m),
        };
        let chunk = 64;
        let mut vals = vec![0.0; k];
        for start in (0..m).step_by(chunk) {
            let rows = chunk.min(m - start);
            let shift = a.rows(start, rows) * &centered;
            for r in 0..rows {
                let p = start + r;
                let sd = var[p].max(0.0).sqrt();
                for (j, v) in vals.iter_mut().enumerate() {
                    let s = if shift.ncols() > 0 { shift[(r, j)] } else { 0.0 };
                    *v = base[p] + s + sd * rng.sample::<f64, _>(StandardNormal);
                }
                let mean = vals.iter().sum::<f64>() / k as f64;
                out.mean[p] = mean;
                out.var[p] = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
                vals.sort_by(f64::total_cmp);
                out.p025[p] = crate::bench::quantile_sorted(&vals, 0.025);
                out.p975[p] = crate::bench::quantile_sorted(&vals, 0.975);
            }
        }
        Ok(out)
    }

    /// `ln p(C | Y)` and its standard error.
    pub fn prob_constraint_given_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(f64, f64)> {
        if self.n_virtual() == 0 {
            return Ok((0.0, 0.0));
        }
        log_prob_box(&self.constraint_prior_law()?, n, rng)
    }

    /// The law of every operator row at the points `xstar`.
    pub fn constraint_posterior(&self, xstar: &DMatrix<f64>, full_cov: bool) -> Result<ConstraintLaw> {
        self.check_points(xstar)?;
        let kern = &self.hyper.kernel;
        let l = &self.data_factor.l;
        let f = &self.factors;
        let blocks = self.opset.point_operator_blocks(kern, &self.train.x, xstar, full_cov)?;
        let v2 = solve_lower(l, &blocks.with_data.transpose());
        let a2 = solve_lower_transpose(l, &v2).transpose();
        let b2_diag = &blocks.prior_var - col_sq_norms(&v2);
        let b3 = &blocks.with_sites - v2.transpose() * &f.v1;
        let v3 = solve_lower(&f.l1, &b3.transpose());
        let a = solve_lower_transpose(&f.l1, &v3).transpose();
        let b = &a2 - &a * &f.a1;
        let sigma_diag = &b2_diag - col_sq_norms(&v3);
        let sigma = blocks.prior_cov.map(|pc| {
            let mut s = pc - v2.transpose() * &v2 - v3.transpose() * &v3;
            symmetrize(&mut s);
            s
        });
        let mean = MeanFunction::Constant(self.hyper.mean_const);
        let m = blocks.n_points;
        let prior_mean = (0..blocks.n_ops * m)
            .map(|r| mean.apply(self.opset.entries()[r / m].op, xstar.row(r % m).transpose().as_slice()))
            .collect::<Result<Vec<_>>>()?;
        let base_mean = DVector::from_vec(prior_mean) + &b * self.residual();
        Ok(ConstraintLaw {
            n_points: m,
            n_ops: blocks.n_ops,
            base_mean,
            a,
            b,
            sigma,
            sigma_diag,
            a2,
            b2_diag,
            b3,
            v2,
            v3,
        })
    }

    /// Mean and covariance of `C` given data and constraints.
    pub fn c_moments(&self, source: MomentSource) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let nv = self.n_virtual();
        if nv == 0 {
            return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
        }
        match source {
            MomentSource::Samples => {
                let c = self.c_samples.as_ref().ok_or(Error::MissingSamples)?;
                sample_moments(c)
            }
            MomentSource::CorrelationFree => {
                let f = &self.factors;
                let mut nu = DVector::zeros(nv);
                let mut gamma = DMatrix::zeros(nv, nv);
                for i in 0..nv {
                    let (m, v) = truncnorm_moments_1d(f.cond_mean_v[i], f.b1[(i, i)].sqrt(), f.lower[i], f.upper[i])?;
                    nu[i] = m;
                    gamma[(i, i)] = v;
                }
                Ok((nu, gamma))
            }
        }
    }

    /// Mean and covariance of `f(X*)` given data and constraints.
    pub fn posterior_moments(&self, xstar: &DMatrix<f64>, source: MomentSource) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let law = self.predictive_law(xstar)?;
        let (nu, gamma) = self.c_moments(source)?;
        let mean = &law.base_mean + &law.a * (nu - &self.factors.prior_mean_v);
        let mut cov = &law.sigma + &law.a * gamma * law.a.transpose();
        symmetrize(&mut cov);
        Ok((mean, cov))
    }

    /// Mean and variance of each operator row at each point, as `M x k` matrices.
    pub fn constraint_moments(&self, xstar: &DMatrix<f64>, source: MomentSource) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let law = self.constraint_posterior(xstar, false)?;
        let (nu, gamma) = self.c_moments(source)?;
        let mean = &law.base_mean + &law.a * (nu - &self.factors.prior_mean_v);
        let extra = (&law.a * gamma).component_mul(&law.a).column_sum();
        let var = (&law.sigma_diag + extra).map(|v| v.max(0.0));
        Ok((by_point(&mean, law.n_points, law.n_ops), by_point(&var, law.n_points, law.n_ops)))
    }

    /// Probability that each operator row lies within its bounds widened by
    /// `margin`, per point and sub-operator (`M x k`). Without virtual sites
    /// the law is Gaussian and the probability is exact for every method.
    pub fn constraint_prob_pointwise(&self, xstar: &DMatrix<f64>, margin: f64, method: ProbMethod) -> Result<DMatrix<f64>> {
        let law = self.constraint_posterior(xstar, false)?;
        let (m, k) = (law.n_points, law.n_ops);
        let mut bounds = Vec::with_capacity(k * m);
        for e in self.opset.entries() {
            for p in 0..m {
                let (a, b) = e.bounds.eval(xstar.row(p).transpose().as_slice())?;
                bounds.push((a - margin, b + margin));
            }
        }
        let box_prob = |mu: f64, var: f64, (a, b): (f64, f64)| -> f64 {
            if a == f64::NEG_INFINITY && b == f64::INFINITY {
                return 1.0;
            }
            let sd = var.max(0.0).sqrt();
            if sd == 0.0 {
                return if mu >= a && mu <= b { 1.0 } else { 0.0 };
            }
            interval_mass((a - mu) / sd, (b - mu) / sd)
        };
        let mut probs = DVector::zeros(k * m);
        if self.n_virtual() == 0 {
            for r in 0..k * m {
                probs[r] = box_prob(law.base_mean[r], law.sigma_diag[r], bounds[r]);
            }
            return Ok(by_point(&probs, m, k));
        }
        match method {
            ProbMethod::Samples => {
                let c = self.c_samples.as_ref().ok_or(Error::MissingSamples)?;
                let shifts = &law.a * self.centered_draws(c);
                let ns = shifts.ncols();
                for r in 0..k * m {
                    if bounds[r].0 == f64::NEG_INFINITY && bounds[r].1 == f64::INFINITY {
                        probs[r] = 1.0;
                        continue;
                    }
                    let mut acc = 0.0;
                    for s in 0..ns {
                        acc += box_prob(law.base_mean[r] + shifts[(r, s)], law.sigma_diag[r], bounds[r]);
                    }
                    probs[r] = acc / ns as f64;
                }
            }
            ProbMethod::Gaussian(source) => {
                let (nu, gamma) = self.c_moments(source)?;
                let mean = &law.base_mean + &law.a * (nu - &self.factors.prior_mean_v);
                let extra = (&law.a * gamma).component_mul(&law.a).column_sum();
                for r in 0..k * m {
                    probs[r] = box_prob(mean[r], law.sigma_diag[r] + extra[r], bounds[r]);
                }
            }
        }
        Ok(by_point(&probs, m, k))
    }
}

/// Mode of a one-dimensional sample: the maximizer of a Gaussian kernel
/// density estimate (Silverman bandwidth) over a 512-point grid.
pub fn posterior_mode_1d(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::TooFewSamples { needed: 100, got: n });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    if hi - lo == 0.0 {
        return Ok(lo);
    }
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = crate::bench::quantile_sorted(&sorted, 0.75) - crate::bench::quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    let grid = 512;
    let mut best = (f64::NEG_INFINITY, lo);
    for g in 0..grid {
        let x = lo + (hi - lo) * g as f64 / (grid - 1) as f64;
        // samples farther than 8h contribute nothing measurable
        let from = sorted.partition_point(|v| *v < x - 8.0 * h);
        let to = sorted.partition_point(|v| *v <= x + 8.0 * h);
        let dens: f64 = sorted[from..to].iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum();
        if dens > best.0 {
            best = (dens, x);
        }
    }
    Ok(best.1)
}
