//! Stacked linear operators `L = [L_1, ..., L_k]` with per-sub-operator bounds
//! and virtual observation sites, and assembly of the operator-transformed
//! covariance blocks.
//!
//! Row ordering everywhere is entry-major: all sites of entry 0, then all
//! sites of entry 1, and so on.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::kernel::{Deriv, KernelConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubOperator {
    Identity,
    /// `d/dx_axis`, 0-based axis.
    Partial(usize),
}

impl SubOperator {
    pub fn deriv(self) -> Deriv {
        match self {
            SubOperator::Identity => Deriv::Value,
            SubOperator::Partial(a) => Deriv::Partial(a),
        }
    }
}

impl fmt::Display for SubOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubOperator::Identity => write!(f, "f"),
            SubOperator::Partial(a) => write!(f, "df/dx{a}"),
        }
    }
}

pub type BoundFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One side of an interval constraint: a constant (possibly infinite) or a
/// function of the input point.
#[derive(Clone)]
pub enum Bound {
    Const(f64),
    Func(BoundFn),
}

impl Bound {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Bound::Const(c) => *c,
            Bound::Func(f) => f(x),
        }
    }
}

impl fmt::Debug for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Const(c) => write!(f, "Const({c})"),
            Bound::Func(_) => write!(f, "Func(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundPair {
    pub lower: Bound,
    pub upper: Bound,
}

impl BoundPair {
    pub fn constant(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::InvalidParameter(format!("bounds must satisfy lower < upper, got [{lower}, {upper}]")));
        }
        Ok(Self { lower: Bound::Const(lower), upper: Bound::Const(upper) })
    }

    pub fn lower_only(lower: f64) -> Self {
        Self { lower: Bound::Const(lower), upper: Bound::Const(f64::INFINITY) }
    }

    pub fn upper_only(upper: f64) -> Self {
        Self { lower: Bound::Const(f64::NEG_INFINITY), upper: Bound::Const(upper) }
    }

    pub fn unbounded() -> Self {
        Self { lower: Bound::Const(f64::NEG_INFINITY), upper: Bound::Const(f64::INFINITY) }
    }

    pub fn functions(lower: Bound, upper: Bound) -> Self {
        Self { lower, upper }
    }

    /// `(a(x), b(x))`; errors when `a(x) >= b(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (a, b) = (self.lower.eval(x), self.upper.eval(x));
        if !(a < b) {
            return Err(Error::InvalidParameter(format!("bounds violate a(x) < b(x) at {x:?}: [{a}, {b}]")));
        }
        Ok((a, b))
    }

    pub fn is_vacuous(&self) -> bool {
        matches!((&self.lower, &self.upper), (Bound::Const(a), Bound::Const(b)) if *a == f64::NEG_INFINITY && *b == f64::INFINITY)
    }
}

/// Prior mean functions. Only the affine family has closed-form derivatives.
#[derive(Clone)]
pub enum MeanFunction {
    Constant(f64),
    Affine { intercept: f64, slope: Vec<f64> },
    Custom(BoundFn),
}

impl MeanFunction {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            MeanFunction::Constant(c) => *c,
            MeanFunction::Affine { intercept, slope } => intercept + slope.iter().zip(x).map(|(s, v)| s * v).sum::<f64>(),
            MeanFunction::Custom(f) => f(x),
        }
    }

    pub fn apply(&self, op: SubOperator, x: &[f64]) -> Result<f64> {
        match (op, self) {
            (SubOperator::Identity, _) => Ok(self.value(x)),
            (SubOperator::Partial(_), MeanFunction::Constant(_)) => Ok(0.0),
            (SubOperator::Partial(a), MeanFunction::Affine { slope, .. }) => slope
                .get(a)
                .copied()
                .ok_or_else(|| Error::Dimension(format!("mean slope has {} entries, axis {a}", slope.len()))),
            (SubOperator::Partial(_), MeanFunction::Custom(_)) => {
                Err(Error::Unsupported("derivative of a custom mean function; use a constant or affine mean".into()))
            }
        }
    }
}

impl fmt::Debug for MeanFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanFunction::Constant(c) => write!(f, "Constant({c})"),
            MeanFunction::Affine { intercept, slope } => write!(f, "Affine({intercept}, {slope:?})"),
            MeanFunction::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OperatorEntry {
    pub op: SubOperator,
    pub bounds: BoundPair,
    pub sites: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct OperatorSet {
    dim: usize,
    entries: Vec<OperatorEntry>,
}

impl OperatorSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn with_entry(mut self, op: SubOperator, bounds: BoundPair) -> Result<Self> {
        self.push(op, bounds)?;
        Ok(self)
    }

    pub fn push(&mut self, op: SubOperator, bounds: BoundPair) -> Result<usize> {
        if let SubOperator::Partial(a) = op {
            if a >= self.dim {
                return Err(Error::InvalidParameter(format!("partial derivative axis {a} out of range for dimension {}", self.dim)));
            }
        }
        self.entries.push(OperatorEntry { op, bounds, sites: Vec::new() });
        Ok(self.entries.len() - 1)
    }

    pub fn add_site(&mut self, entry: usize, x: Vec<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!("site has {} coordinates, expected {}", x.len(), self.dim)));
        }
        let e = self
            .entries
            .get_mut(entry)
            .ok_or_else(|| Error::InvalidParameter(format!("no operator entry {entry}")))?;
        e.bounds.eval(&x)?;
        e.sites.push(x);
        Ok(())
    }

    /// Adds `x` as a site of every entry.
    pub fn add_site_all(&mut self, x: &[f64]) -> Result<()> {
        for i in 0..self.entries.len() {
            self.add_site(i, x.to_vec())?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[OperatorEntry] {
        &self.entries
    }

    pub fn n_ops(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total virtual observation count `N_v = sum_i S_i`.
    pub fn n_virtual(&self) -> usize {
        self.entries.iter().map(|e| e.sites.len()).sum()
    }

    pub fn site_counts(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.sites.len()).collect()
    }

    /// `(entry index, site)` pairs in canonical row order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.sites.iter().map(move |s| (i, s.as_slice())))
    }

    /// `a(X^v)`, `b(X^v)` materialized in row order.
    pub fn bounds_at_sites(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.n_virtual();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for (r, (i, x)) in self.rows().enumerate() {
            let (a, b) = self.entries[i].bounds.eval(x)?;
            lo[r] = a;
            hi[r] = b;
        }
        Ok((lo, hi))
    }

    /// `L mu(X^v)`: concatenated `L_i mu(X^{v,i})`.
    pub fn apply_mean(&self, mean: &MeanFunction) -> Result<DVector<f64>> {
        let vals = self
            .rows()
            .map(|(i, x)| mean.apply(self.entries[i].op, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    fn check_kernel(&self, kernel: &KernelConfig) -> Result<()> {
        kernel.validate()?;
        if kernel.dim() != self.dim {
            return Err(Error::Dimension(format!("kernel dimension {} vs operator dimension {}", kernel.dim(), self.dim)));
        }
        Ok(())
    }

    /// `K_{X, X^v} L^T`, an `N x N_v` matrix.
    pub fn cross_cov(&self, kernel: &KernelConfig, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_kernel(kernel)?;
        if x.ncols() != self.dim {
            return Err(Error::Dimension(format!("inputs have {} columns, expected {}", x.ncols(), self.dim)));
        }
        let pts = crate::kernel::rows_of(x);
        let rows: Vec<(usize, &[f64])> = self.rows().collect();
        Ok(DMatrix::from_fn(pts.len(), rows.len(), |n, s| {
            let (i, site) = rows[s];
            kernel.cov(Deriv::Value, &pts[n], self.entries[i].op.deriv(), site)
        }))
    }

    /// `L K_{X^v, X^v} L^T + sigma_v2 I`.
    pub fn operator_cov(&self, kernel: &KernelConfig, sigma_v2: f64) -> Result<DMatrix<f64>> {
        self.check_kernel(kernel)?;
        if !(sigma_v2 >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma_v2 must be non-negative, got {sigma_v2}")));
        }
        let rows: Vec<(usize, &[f64])> = self.rows().collect();
        let n = rows.len();
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            let (i, xs) = rows[s];
            for t in 0..=s {
                let (j, xt) = rows[t];
                let v = kernel.cov(self.entries[i].op.deriv(), xs, self.entries[j].op.deriv(), xt);
                m[(s, t)] = v;
                m[(t, s)] = v;
            }
            m[(s, s)] += sigma_v2;
        }
        Ok(m)
    }

    /// Blocks needed to predict `L f` at the points `xstar`.
    ///
    /// Rows are indexed `(entry i, point m)` as `i * M + m`.
    pub fn point_operator_blocks(
        &self,
        kernel: &KernelConfig,
        x_train: &DMatrix<f64>,
        xstar: &DMatrix<f64>,
        full_cov: bool,
    ) -> Result<PointBlocks> {
        self.check_kernel(kernel)?;
        if x_train.ncols() != self.dim || xstar.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "point blocks: expected {} columns, got {} (train) and {} (points)",
                self.dim,
                x_train.ncols(),
                xstar.ncols()
            )));
        }
        let m = xstar.nrows();
        let k = self.entries.len();
        let pts = crate::kernel::rows_of(xstar);
        let train = crate::kernel::rows_of(x_train);
        let sites: Vec<(usize, &[f64])> = self.rows().collect();
        let ops: Vec<Deriv> = self.entries.iter().map(|e| e.op.deriv()).collect();

        let with_data = DMatrix::from_fn(k * m, train.len(), |r, n| kernel.cov(ops[r / m], &pts[r % m], Deriv::Value, &train[n]));
        let with_sites = DMatrix::from_fn(k * m, sites.len(), |r, s| {
            let (j, xs) = sites[s];
            kernel.cov(ops[r / m], &pts[r % m], ops[j], xs)
        });
        let prior_var = DVector::from_fn(k * m, |r, _| kernel.cov(ops[r / m], &pts[r % m], ops[r / m], &pts[r % m]));
        let prior_cov = full_cov.then(|| {
            DMatrix::from_fn(k * m, k * m, |r, c| kernel.cov(ops[r / m], &pts[r % m], ops[c / m], &pts[c % m]))
        });
        Ok(PointBlocks { n_points: m, n_ops: k, with_data, with_sites, prior_var, prior_cov })
    }
}

/// Operator-transformed covariance blocks at prediction points.
#[derive(Debug, Clone)]
pub struct PointBlocks {
    pub n_points: usize,
    pub n_ops: usize,
    /// `L K_{x*, X}`, `(k M) x N`.
    pub with_data: DMatrix<f64>,
    /// `L K_{x*, X^v} L^T`, `(k M) x N_v`.
    pub with_sites: DMatrix<f64>,
    /// `diag(L K_{x*, x*} L^T)`.
    pub prior_var: DVector<f64>,
    /// Full `L K_{x*, x*} L^T` when requested.
    pub prior_cov: Option<DMatrix<f64>>,
}
