//! Truncated (multivariate) normal distributions: univariate sampling and
//! moments, rejection, Gibbs and exact HMC samplers for box-truncated Gaussians, a
//! GHK-style estimator of box probabilities, and sample moments.
//!
//! Multivariate samples are returned as `n x d` matrices, one draw per row.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::linalg::cholesky;
use crate::normal::{log_interval_mass, log_pdf};
use crate::{Error, Result};

/// `N(mean, cov)` restricted to the box `[lower, upper]`.
#[derive(Debug, Clone)]
pub struct TmvnProblem {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl TmvnProblem {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) || lower.len() != d || upper.len() != d {
            return Err(Error::Dimension(format!(
                "tmvn: mean {d}, cov {:?}, bounds {} / {}",
                cov.shape(),
                lower.len(),
                upper.len()
            )));
        }
        if let Some(i) = (0..d).find(|&i| !(lower[i] < upper[i])) {
            return Err(Error::EmptyInterval { lower: lower[i], upper: upper[i] });
        }
        Ok(Self { mean, cov, lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|v| *v == f64::NEG_INFINITY) && self.upper.iter().all(|v| *v == f64::INFINITY)
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }
}

// ---------------------------------------------------------------------------
// univariate

const MAX_REJECTIONS: usize = 10_000_000;

/// Standard normal restricted to `[a, b]`.
fn std_truncnorm<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return rng.sample(StandardNormal);
    }
    if b <= 0.0 && a < b {
        // mirror the lower-tail case onto the upper tail
        return -std_truncnorm(-b, -a, rng);
    }
    if a <= 0.0 {
        // interval contains the mode
        if b - a < 2.506_628_274_631_000_5 {
            for _ in 0..MAX_REJECTIONS {
                let z = a + (b - a) * rng.random::<f64>();
                if rng.random::<f64>() <= (-0.5 * z * z).exp() {
                    return z;
                }
            }
        } else {
            for _ in 0..MAX_REJECTIONS {
                let z: f64 = rng.sample(StandardNormal);
                if z >= a && z <= b {
                    return z;
                }
            }
        }
        return 0.5 * (a.max(-1e300) + b.min(1e300));
    }
    // a > 0: upper tail
    if (b - a) * (b + a) <= 2.0 {
        for _ in 0..MAX_REJECTIONS {
            let z = a + (b - a) * rng.random::<f64>();
            if rng.random::<f64>() <= (0.5 * (a * a - z * z)).exp() {
                return z;
            }
        }
        return a;
    }
    // translated-exponential proposal with the optimal rate
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    for _ in 0..MAX_REJECTIONS {
        let e: f64 = Exp1.sample(rng);
        let z = a + e / lambda;
        if z <= b && rng.random::<f64>() <= (-0.5 * (z - lambda) * (z - lambda)).exp() {
            return z;
        }
    }
    a
}

/// One draw from `N(mu, sigma^2)` truncated to `[a, b]`.
pub fn sample_truncnorm_1d<R: Rng + ?Sized>(mu: f64, sigma: f64, a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidParameter(format!("truncnorm needs finite mu and sigma > 0, got ({mu}, {sigma})")));
    }
    if !(a < b) {
        return Err(Error::EmptyInterval { lower: a, upper: b });
    }
    let z = std_truncnorm((a - mu) / sigma, (b - mu) / sigma, rng);
    Ok((mu + sigma * z).clamp(a, b))
}

/// `(delta, t)` of the continued fraction `1/R(x) = x + delta`, with
/// `delta = 1/(x + t)` and `t = 2/(x + 3/(x + ...))`, where `R` is the Mills ratio.
fn mills_tail_terms(x: f64) -> (f64, f64) {
    let mut t = 0.0;
    for k in (2..=120).rev() {
        t = k as f64 / (x + t);
    }
    (1.0 / (x + t), t)
}

/// Mean and variance of the standard normal truncated to `[a, b]`.
fn std_truncnorm_moments(a: f64, b: f64) -> Result<(f64, f64)> {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return Ok((0.0, 1.0));
    }
    if a > 3.0 && (b == f64::INFINITY || log_pdf(b) - log_pdf(a) < -40.0) {
        let (delta, t) = mills_tail_terms(a);
        return Ok((a + delta, (delta * (t - delta)).max(0.0)));
    }
    if b < -3.0 && (a == f64::NEG_INFINITY || log_pdf(a) - log_pdf(b) < -40.0) {
        let (delta, t) = mills_tail_terms(-b);
        return Ok((-(-b + delta), (delta * (t - delta)).max(0.0)));
    }
    let log_z = log_interval_mass(a, b);
    if !log_z.is_finite() {
        return Err(Error::EmptyInterval { lower: a, upper: b });
    }
    let ra = if a.is_finite() { (log_pdf(a) - log_z).exp() } else { 0.0 };
    let rb = if b.is_finite() { (log_pdf(b) - log_z).exp() } else { 0.0 };
    let ara = if a.is_finite() { a * ra } else { 0.0 };
    let brb = if b.is_finite() { b * rb } else { 0.0 };
    let mean = ra - rb;
    let var = 1.0 + ara - brb - mean * mean;
    Ok((mean, var.max(0.0)))
}

/// Closed-form mean and variance of `N(mu, sigma^2)` truncated to `[a, b]`.
pub fn truncnorm_moments_1d(mu: f64, sigma: f64, a: f64, b: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("truncnorm needs sigma > 0, got {sigma}")));
    }
    if !(a < b) {
        return Err(Error::EmptyInterval { lower: a, upper: b });
    }
    let (m, v) = std_truncnorm_moments((a - mu) / sigma, (b - mu) / sigma)?;
    Ok((mu + sigma * m, sigma * sigma * v))
}

// ---------------------------------------------------------------------------
// multivariate samplers

#[derive(Debug, Clone)]
pub struct RejectionOutput {
    pub samples: DMatrix<f64>,
    pub acceptance_rate: f64,
    pub tries: usize,
}

/// Plain rejection from `N(mean, cov)`. The acceptance rate estimates the box probability.
pub fn sample_rejection<R: Rng + ?Sized>(problem: &TmvnProblem, n: usize, rng: &mut R, max_tries: usize) -> Result<RejectionOutput> {
    let d = problem.dim();
    let l = cholesky(&problem.cov)?;
    let mut out = DMatrix::zeros(n, d);
    let mut accepted = 0;
    let mut tries = 0;
    let mut u = DVector::zeros(d);
    while accepted < n {
        if tries >= max_tries {
            return Err(Error::RejectionExhausted { tries, accepted });
        }
        tries += 1;
        for v in u.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = &problem.mean + &l * &u;
        if problem.contains(x.as_slice()) {
            out.row_mut(accepted).copy_from(&x.transpose());
            accepted += 1;
        }
    }
    Ok(RejectionOutput { samples: out, acceptance_rate: accepted as f64 / tries.max(1) as f64, tries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GibbsOptions {
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        Self { burn_in: 1000, thin: 10 }
    }
}

/// A point inside the box near the bulk of the distribution: the sequential
/// truncated means of the reordered factor, mapped back. Falls back to a
/// coordinatewise point when that fails.
fn central_start(problem: &TmvnProblem) -> DVector<f64> {
    if let Ok((order, l, y)) = genz_order(problem) {
        let v = &l * DVector::from_vec(y);
        let mut x = problem.mean.clone();
        for (k, &i) in order.iter().enumerate() {
            x[i] += v[k];
        }
        if problem.contains(x.as_slice()) {
            return x;
        }
    }
    feasible_start(problem)
}

fn feasible_start(problem: &TmvnProblem) -> DVector<f64> {
    DVector::from_fn(problem.dim(), |i, _| {
        let (m, a, b) = (problem.mean[i], problem.lower[i], problem.upper[i]);
        let sd = problem.cov[(i, i)].max(0.0).sqrt();
        if m > a && m < b {
            return m;
        }
        let width = if (b - a).is_finite() { 0.5 * (b - a) } else { f64::INFINITY };
        let step = width.min(0.1 * sd.max(1e-12));
        if m <= a {
            a + step
        } else {
            b - step
        }
    })
}

/// Systematic-scan Gibbs sampler over the univariate full conditionals of
/// the whitened vector `z`, where `X = mean + L z` and `L L^T = cov`. The box
/// on `X` becomes linear constraints on `z`, each full conditional a
/// standard normal truncated to an interval. Each retained draw is separated
/// by `thin` sweeps (a value of 0 means 1).
pub fn sample_gibbs<R: Rng + ?Sized>(problem: &TmvnProblem, n: usize, rng: &mut R, opts: GibbsOptions) -> Result<DMatrix<f64>> {
    let d = problem.dim();
    let l = cholesky(&problem.cov)?;
    let mut x = central_start(problem);
    let mut z = crate::linalg::solve_lower_vec(&l, &(&x - &problem.mean));
    let thin = opts.thin.max(1);
    let mut out = DMatrix::zeros(n, d);
    let sweeps = opts.burn_in + n * thin;
    let mut kept = 0;
    for sweep in 0..sweeps {
        for j in 0..d {
            let zj = z[j];
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in j..d {
                let c = l[(i, j)];
                if c == 0.0 {
                    continue;
                }
                let rest = x[i] - c * zj;
                let (t1, t2) = ((problem.lower[i] - rest) / c, (problem.upper[i] - rest) / c);
                let (a, b) = if c > 0.0 { (t1, t2) } else { (t2, t1) };
                lo = lo.max(a);
                hi = hi.min(b);
            }
            // rounding can empty an interval that holds the current value
            let t = if lo < hi { std_truncnorm(lo, hi, rng) } else { zj };
            let delta = t - zj;
            if delta != 0.0 {
                for i in j..d {
                    x[i] += l[(i, j)] * delta;
                }
                z[j] = t;
            }
        }
        if sweep >= opts.burn_in && (sweep - opts.burn_in + 1).is_multiple_of(thin) && kept < n {
            for j in 0..d {
                out[(kept, j)] = x[j].clamp(problem.lower[j], problem.upper[j]);
            }
            kept += 1;
        }
    }
    Ok(out)
}

/// Exact Hamiltonian Monte Carlo for the truncated law. In whitened
/// coordinates `z` (`X = mean + L z`) the trajectories between wall hits are
/// `z0 cos t + v0 sin t`; at a wall the velocity is reflected. The state is
/// tracked as `p = L z` and `q = L v`, so the walls are the box faces and a
/// reflection off coordinate `i` only needs column `i` of the covariance.
/// Each draw follows one trajectory of length `pi/2`, after `burn_in`
/// trajectories.
pub fn sample_hmc<R: Rng + ?Sized>(problem: &TmvnProblem, n: usize, rng: &mut R, burn_in: usize) -> Result<DMatrix<f64>> {
    const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
    const MAX_BOUNCES: usize = 100_000;
    let d = problem.dim();
    let l = cholesky(&problem.cov)?;
    // a wall is `sign * p_i + gap >= 0`
    let mut walls: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..d {
        if problem.lower[i].is_finite() {
            walls.push((i, 1.0, problem.mean[i] - problem.lower[i]));
        }
        if problem.upper[i].is_finite() {
            walls.push((i, -1.0, problem.upper[i] - problem.mean[i]));
        }
    }
    let mut p = central_start(problem) - &problem.mean;
    let mut out = DMatrix::zeros(n, d);
    let mut u = DVector::zeros(d);
    for it in 0..burn_in + n {
        for v in u.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut q = &l * &u;
        let mut left = std::f64::consts::FRAC_PI_2;
        let mut last: Option<usize> = None;
        for _ in 0..MAX_BOUNCES {
            let mut hit: Option<(f64, usize)> = None;
            for (k, &(i, sign, gap)) in walls.iter().enumerate() {
                let (fa, fb) = (sign * p[i], sign * q[i]);
                let r = fa.hypot(fb);
                if r <= gap {
                    continue;
                }
                let phi = fb.atan2(fa);
                let base = (-gap / r).acos();
                for cand in [phi + base, phi - base] {
                    let mut t = cand.rem_euclid(TWO_PI);
                    if last == Some(k) && t < 1e-9 {
                        t += TWO_PI;
                    }
                    if t < left && hit.is_none_or(|(h, _)| t < h) {
                        hit = Some((t, k));
                    }
                }
            }
            let t = hit.map_or(left, |(t, _)| t);
            let (c, s) = (t.cos(), t.sin());
            for j in 0..d {
                let (pj, qj) = (p[j], q[j]);
                p[j] = pj * c + qj * s;
                q[j] = qj * c - pj * s;
            }
            left -= t;
            match hit {
                Some((_, k)) => {
                    let i = walls[k].0;
                    let scale = 2.0 * q[i] / problem.cov[(i, i)];
                    for j in 0..d {
                        q[j] -= scale * problem.cov[(j, i)];
                    }
                    last = Some(k);
                }
                None => break,
            }
        }
        if it >= burn_in {
            for j in 0..d {
                out[(it - burn_in, j)] = (problem.mean[j] + p[j]).clamp(problem.lower[j], problem.upper[j]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Rejection,
    Gibbs,
    Hmc,
}

/// Markov chain sampler used when rejection is too wasteful.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    Gibbs(GibbsOptions),
    /// Exact HMC with the given number of burn-in trajectories.
    Hmc { burn_in: usize },
}

impl Default for Fallback {
    fn default() -> Self {
        Fallback::Hmc { burn_in: 50 }
    }
}

/// Rejection when a 100-draw pilot accepts at least 10%, the fallback
/// chain otherwise.
pub fn sample_auto<R: Rng + ?Sized>(problem: &TmvnProblem, n: usize, rng: &mut R, fallback: Fallback) -> Result<(DMatrix<f64>, SamplerKind)> {
    if problem.dim() == 0 {
        return Ok((DMatrix::zeros(n, 0), SamplerKind::Rejection));
    }
    let pilot_tries = 100;
    let l = cholesky(&problem.cov)?;
    let mut hits = 0;
    let mut u = DVector::zeros(problem.dim());
    for _ in 0..pilot_tries {
        for v in u.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = &problem.mean + &l * &u;
        if problem.contains(x.as_slice()) {
            hits += 1;
        }
    }
    if hits as f64 / pilot_tries as f64 >= 0.1 {
        let budget = 40 * n + 1000;
        match sample_rejection(problem, n, rng, budget) {
            Ok(r) => return Ok((r.samples, SamplerKind::Rejection)),
            Err(Error::RejectionExhausted { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    match fallback {
        Fallback::Gibbs(opts) => Ok((sample_gibbs(problem, n, rng, opts)?, SamplerKind::Gibbs)),
        Fallback::Hmc { burn_in } => Ok((sample_hmc(problem, n, rng, burn_in)?, SamplerKind::Hmc)),
    }
}

// ---------------------------------------------------------------------------
// box probability

/// Cholesky factor built with dynamic variable reordering: at each step the
/// remaining coordinate with the smallest conditional interval mass (given
/// the truncated means of the coordinates already placed) goes next.
/// Returns the order, the factor of the permuted covariance and the
/// sequential truncated means in whitened coordinates.
fn genz_order(problem: &TmvnProblem) -> Result<(Vec<usize>, DMatrix<f64>, Vec<f64>)> {
    let d = problem.dim();
    let mut order: Vec<usize> = (0..d).collect();
    let mut cov = problem.cov.clone();
    let mut lo: Vec<f64> = (0..d).map(|i| problem.lower[i] - problem.mean[i]).collect();
    let mut hi: Vec<f64> = (0..d).map(|i| problem.upper[i] - problem.mean[i]).collect();
    let mut l = DMatrix::<f64>::zeros(d, d);
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut best = (i, f64::INFINITY);
        for j in i..d {
            let s2 = cov[(j, j)] - (0..i).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
            if !(s2 > 0.0) {
                continue;
            }
            let s = s2.sqrt();
            let shift: f64 = (0..i).map(|k| l[(j, k)] * y[k]).sum();
            let m = log_interval_mass((lo[j] - shift) / s, (hi[j] - shift) / s);
            if m < best.1 {
                best = (j, m);
            }
        }
        let j = best.0;
        if j != i {
            order.swap(i, j);
            cov.swap_rows(i, j);
            cov.swap_columns(i, j);
            lo.swap(i, j);
            hi.swap(i, j);
            l.swap_rows(i, j);
        }
        let s2 = cov[(i, i)] - (0..i).map(|k| l[(i, k)] * l[(i, k)]).sum::<f64>();
        if !(s2 > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: i });
        }
        let lii = s2.sqrt();
        l[(i, i)] = lii;
        for r in i + 1..d {
            let dot: f64 = (0..i).map(|k| l[(r, k)] * l[(i, k)]).sum();
            l[(r, i)] = (cov[(r, i)] - dot) / lii;
        }
        let shift: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        y[i] = std_truncnorm_moments((lo[i] - shift) / lii, (hi[i] - shift) / lii).map_or(0.0, |(m, _)| m);
    }
    Ok((order, l, y))
}

/// GHK estimate of `ln P(lower <= X <= upper)` for `X ~ N(mean, cov)`,
/// returned with its delta-method standard error in the log domain.
pub fn log_prob_box<R: Rng + ?Sized>(problem: &TmvnProblem, n: usize, rng: &mut R) -> Result<(f64, f64)> {
    if problem.is_unbounded() || problem.dim() == 0 {
        return Ok((0.0, 0.0));
    }
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let d = problem.dim();
    let (order, l, _) = genz_order(problem)?;
    let lo: Vec<f64> = order.iter().map(|&i| problem.lower[i] - problem.mean[i]).collect();
    let hi: Vec<f64> = order.iter().map(|&i| problem.upper[i] - problem.mean[i]).collect();

    let mut logw = vec![0.0; n];
    let mut z = vec![0.0; d];
    for w in logw.iter_mut() {
        let mut acc = 0.0;
        for i in 0..d {
            let mut shift = 0.0;
            for j in 0..i {
                shift += l[(i, j)] * z[j];
            }
            let lii = l[(i, i)];
            let a = (lo[i] - shift) / lii;
            let b = (hi[i] - shift) / lii;
            let lm = log_interval_mass(a, b);
            acc += lm;
            if !lm.is_finite() {
                break;
            }
            z[i] = std_truncnorm(a, b, rng);
        }
        *w = acc;
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::WeightsUnderflow);
    }
    let scaled: Vec<f64> = logw.iter().map(|w| (w - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { scaled.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let se = var.sqrt() / (mean * (n as f64).sqrt());
    Ok((max + mean.ln(), se))
}

/// Empirical mean and unbiased covariance of row-wise samples.
pub fn sample_moments(samples: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}
