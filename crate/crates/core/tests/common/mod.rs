//! Shared helpers for the integration tests: random instances and
//! direct-inversion formulas for the constrained posterior.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use cgp::gp::{HyperParams, TrainingSet};
use cgp::kernel::{Deriv, KernelConfig, KernelFamily};
use cgp::tmvn::TmvnProblem;
use cgp::linop::{BoundPair, OperatorSet, SubOperator};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub struct Instance {
    pub train: TrainingSet,
    pub hyper: HyperParams,
    pub opset: OperatorSet,
    pub sigma_v2: f64,
    pub xstar: DMatrix<f64>,
}

fn random_points<R: Rng>(n: usize, dim: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| rng.random::<f64>())
}

/// A well-conditioned random problem with mixed value and derivative rows.
pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let dim = rng.random_range(1..=3);
    let n = rng.random_range(1..=8);
    let family = if rng.random::<bool>() { KernelFamily::Rbf } else { KernelFamily::Matern52 };
    let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(0.4..1.2)).collect();
    let kernel = KernelConfig::new(family, rng.random_range(0.5..2.0), ls).unwrap();
    let mut hyper = HyperParams::new(kernel, rng.random_range(1e-3..1e-1));
    hyper.mean_const = rng.random_range(-1.0..1.0);
    let x = random_points(n, dim, rng);
    let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let train = TrainingSet::new(x, y).unwrap();

    let n_ops = rng.random_range(1..=3);
    let mut opset = OperatorSet::new(dim);
    for _ in 0..n_ops {
        let op = if rng.random::<bool>() { SubOperator::Identity } else { SubOperator::Partial(rng.random_range(0..dim)) };
        opset.push(op, BoundPair::lower_only(-1.0)).unwrap();
    }
    let nv = rng.random_range(1..=6);
    for _ in 0..nv {
        let e = rng.random_range(0..n_ops);
        let p: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        opset.add_site(e, p).unwrap();
    }
    let xstar = random_points(rng.random_range(1..=5), dim, rng);
    Instance { train, hyper, opset, sigma_v2: rng.random_range(1e-3..1e-1), xstar }
}

/// Covariance between rows described by `(deriv, point)` pairs.
pub fn cov_rows(k: &KernelConfig, left: &[(Deriv, Vec<f64>)], right: &[(Deriv, Vec<f64>)]) -> DMatrix<f64> {
    DMatrix::from_fn(left.len(), right.len(), |i, j| k.cov(left[i].0, &left[i].1, right[j].0, &right[j].1))
}

pub fn value_rows(x: &DMatrix<f64>) -> Vec<(Deriv, Vec<f64>)> {
    (0..x.nrows()).map(|i| (Deriv::Value, x.row(i).iter().copied().collect())).collect()
}

pub fn site_rows(ops: &OperatorSet) -> Vec<(Deriv, Vec<f64>)> {
    ops.rows().map(|(e, x)| (ops.entries()[e].op.deriv(), x.to_vec())).collect()
}

/// Operator rows at points, laid out `i * M + m`.
pub fn point_rows(ops: &OperatorSet, x: &DMatrix<f64>) -> Vec<(Deriv, Vec<f64>)> {
    let mut out = Vec::new();
    for e in ops.entries() {
        for m in 0..x.nrows() {
            out.push((e.op.deriv(), x.row(m).iter().copied().collect()));
        }
    }
    out
}

/// Conditional law pieces computed with explicit inverses.
pub struct DirectLaw {
    pub a1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub cond_mean_v: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub base_mean: DVector<f64>,
}

/// `target` rows are the quantities predicted; `prior_mean` their prior means.
pub fn direct_law(inst: &Instance, target: &[(Deriv, Vec<f64>)], prior_mean: &DVector<f64>) -> DirectLaw {
    let k = &inst.hyper.kernel;
    let x = value_rows(&inst.train.x);
    let v = site_rows(&inst.opset);
    let n = x.len();
    let kxx = cov_rows(k, &x, &x) + DMatrix::identity(n, n) * inst.hyper.noise_var;
    let kinv = kxx.try_inverse().unwrap();
    let kxv = cov_rows(k, &x, &v);
    let kvv = cov_rows(k, &v, &v) + DMatrix::identity(v.len(), v.len()) * inst.sigma_v2;
    let ktx = cov_rows(k, target, &x);
    let ktv = cov_rows(k, target, &v);
    let ktt = cov_rows(k, target, target);

    let a1 = kxv.transpose() * &kinv;
    let b1 = &kvv - kxv.transpose() * &kinv * &kxv;
    let b1inv = b1.clone().try_inverse().unwrap();
    let cross = &ktv - &ktx * &kinv * &kxv;
    let a = &cross * &b1inv;
    let b = &ktx * &kinv - &a * &a1;
    let sigma = &ktt - &ktx * &kinv * ktx.transpose() - &a * cross.transpose();

    let mu = inst.hyper.mean_const;
    let resid = inst.train.y.add_scalar(-mu);
    let prior_v = DVector::from_iterator(v.len(), v.iter().map(|(d, _)| if *d == Deriv::Value { mu } else { 0.0 }));
    let cond_mean_v = prior_v + &a1 * &resid;
    let base_mean = prior_mean + &b * &resid;
    DirectLaw { a1, b1, cond_mean_v, a, b, sigma, base_mean }
}

/// Largest elementwise difference relative to the larger of 1 and the reference's largest entry.
pub fn rel_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    assert_eq!(got.shape(), want.shape());
    let scale = want.amax().max(1.0);
    (got - want).amax() / scale
}

pub fn rel_err_vec(got: &DVector<f64>, want: &DVector<f64>) -> f64 {
    rel_err(&DMatrix::from_column_slice(got.len(), 1, got.as_slice()), &DMatrix::from_column_slice(want.len(), 1, want.as_slice()))
}

/// Worst relative error between the Cholesky-based model and the direct formulas for one instance.
pub fn oracle_error(inst: &Instance) -> f64 {
    use cgp::cgp::ConstrainedGp;
    let model = ConstrainedGp::assemble(inst.train.clone(), inst.hyper.clone(), inst.opset.clone(), inst.sigma_v2).unwrap();
    let mu = inst.hyper.mean_const;

    let f_rows = value_rows(&inst.xstar);
    let direct = direct_law(inst, &f_rows, &DVector::from_element(f_rows.len(), mu));
    let law = model.predictive_law(&inst.xstar).unwrap();
    let mut worst: f64 = 0.0;
    for (g, w) in [
        (&model.factors.a1, &direct.a1),
        (&model.factors.b1, &direct.b1),
        (&law.a, &direct.a),
        (&law.b, &direct.b),
        (&law.sigma, &direct.sigma),
    ] {
        worst = worst.max(rel_err(g, w));
    }
    worst = worst.max(rel_err_vec(&model.factors.cond_mean_v, &direct.cond_mean_v));
    worst = worst.max(rel_err_vec(&law.base_mean, &direct.base_mean));

    let c_rows = point_rows(&inst.opset, &inst.xstar);
    let c_mean = DVector::from_iterator(c_rows.len(), c_rows.iter().map(|(d, _)| if *d == Deriv::Value { mu } else { 0.0 }));
    let direct = direct_law(inst, &c_rows, &c_mean);
    let claw = model.constraint_posterior(&inst.xstar, true).unwrap();
    for (g, w) in [(&claw.a, &direct.a), (&claw.b, &direct.b), (claw.sigma.as_ref().unwrap(), &direct.sigma)] {
        worst = worst.max(rel_err(g, w));
    }
    worst = worst.max(rel_err_vec(&claw.base_mean, &direct.base_mean));
    worst = worst.max(rel_err_vec(&claw.sigma_diag, &direct.sigma.diagonal()));
    worst
}

// ---------------------------------------------------------------------------
// kernel finite differences

const FD_STEP: f64 = 1e-5;

fn shifted(x: &[f64], axis: usize, h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[axis] += h;
    y
}

/// Relative error with a floor so that values near zero are compared absolutely.
fn rel_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

/// Compares analytic kernel derivatives with central differences: first
/// derivatives within 1e-5, mixed second derivatives within 1e-4 (relative,
/// with a floor for values near zero).
pub fn kernel_fd_check(family: KernelFamily, var: f64, ls: Vec<f64>, x: Vec<f64>, x2: Vec<f64>) -> Result<(), String> {
    let k = KernelConfig::new(family, var, ls.clone()).unwrap();
    let d = x.len();
    let lmin = ls.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor1 = 1e-3 * var / lmin;
    let floor2 = 1e-3 * var / (lmin * lmin);
    for i in 0..d {
        let fd = (k.cov(Deriv::Value, &shifted(&x, i, FD_STEP), Deriv::Value, &x2) - k.cov(Deriv::Value, &shifted(&x, i, -FD_STEP), Deriv::Value, &x2)) / (2.0 * FD_STEP);
        let an = k.cov(Deriv::Partial(i), &x, Deriv::Value, &x2);
        if !(rel_floor(an, fd, floor1) < 1e-5) {
            return Err(format!("d/dx{i}: {an} vs {fd}"));
        }
        let fd2 = (k.cov(Deriv::Value, &x, Deriv::Value, &shifted(&x2, i, FD_STEP)) - k.cov(Deriv::Value, &x, Deriv::Value, &shifted(&x2, i, -FD_STEP))) / (2.0 * FD_STEP);
        let an2 = k.cov(Deriv::Value, &x, Deriv::Partial(i), &x2);
        if !(rel_floor(an2, fd2, floor1) < 1e-5) {
            return Err(format!("d/dx'{i}: {an2} vs {fd2}"));
        }
        for j in 0..d {
            let fd = (k.cov(Deriv::Partial(i), &x, Deriv::Value, &shifted(&x2, j, FD_STEP))
                - k.cov(Deriv::Partial(i), &x, Deriv::Value, &shifted(&x2, j, -FD_STEP)))
                / (2.0 * FD_STEP);
            let an = k.cov(Deriv::Partial(i), &x, Deriv::Partial(j), &x2);
            if !(rel_floor(an, fd, floor2) < 1e-4) {
                return Err(format!("d2/dx{i}dx'{j}: {an} vs {fd}"));
            }
        }
    }
    // symmetry of the cross terms
    for i in 0..d {
        let a = k.cov(Deriv::Partial(i), &x, Deriv::Value, &x2);
        let b = k.cov(Deriv::Value, &x2, Deriv::Partial(i), &x);
        if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
            return Err(format!("cross term {i} not symmetric: {a} vs {b}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// truncated normal oracles

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mean and variance of `N(mu, sigma^2)` on `[a, b]` by quadrature; infinite
/// ends are cut at 12 standard deviations.
pub fn quad_moments(mu: f64, sigma: f64, a: f64, b: f64) -> (f64, f64) {
    let lo = a.max(mu - 12.0 * sigma);
    let hi = b.min(mu + 12.0 * sigma);
    let dens = |x: f64| (-0.5 * ((x - mu) / sigma).powi(2)).exp();
    let n = 20_000;
    let z = simpson(dens, lo, hi, n);
    let m = simpson(|x| x * dens(x), lo, hi, n) / z;
    let v = simpson(|x| (x - m).powi(2) * dens(x), lo, hi, n) / z;
    (m, v)
}

/// Batch-means standard error of each column's mean.
pub fn batch_se(s: &DMatrix<f64>) -> DVector<f64> {
    let batches = 50;
    let len = s.nrows() / batches;
    DVector::from_fn(s.ncols(), |j, _| {
        let means: Vec<f64> = (0..batches).map(|b| s.column(j).rows(b * len, len).mean()).collect();
        let m = means.iter().sum::<f64>() / batches as f64;
        let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (v / batches as f64).sqrt()
    })
}

/// Small truncated laws with mixed finite and infinite bounds, `d <= 3`.
pub fn tmvn_problems() -> Vec<TmvnProblem> {
    let inf = f64::INFINITY;
    vec![
        TmvnProblem::new(
            DVector::from_vec(vec![0.3]),
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_vec(vec![-0.5]),
            DVector::from_vec(vec![2.0]),
        )
        .unwrap(),
        TmvnProblem::new(
            DVector::from_vec(vec![0.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 1.5]),
            DVector::from_vec(vec![0.0, -inf]),
            DVector::from_vec(vec![inf, 1.0]),
        )
        .unwrap(),
        TmvnProblem::new(
            DVector::from_vec(vec![0.2, -0.1, 0.4]),
            DMatrix::from_row_slice(3, 3, &[1.0, -0.4, 0.3, -0.4, 1.2, 0.2, 0.3, 0.2, 0.8]),
            DVector::from_vec(vec![-1.0, -inf, 0.0]),
            DVector::from_vec(vec![1.0, 0.5, inf]),
        )
        .unwrap(),
    ]
}

