use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::linop::{Bound, BoundPair, OperatorSet, SubOperator};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// 1D monotone and bounded test function

/// `(atan(20x - 10) - atan(-10)) / 3`
pub fn example1_f(x: f64) -> f64 {
    ((20.0 * x - 10.0).atan() - (-10.0f64).atan()) / 3.0
}

/// Upper bound `ln(30x + 1)/3 + 0.1` of the 1D test function.
pub fn example1_upper(x: f64) -> f64 {
    (30.0 * x + 1.0).ln() / 3.0 + 0.1
}

/// The seven inputs `0.1 + 1/(i+1)`, `i = 1..=7`.
pub fn example1_design() -> Vec<f64> {
    (1..=7).map(|i| 0.1 + 1.0 / (i as f64 + 1.0)).collect()
}

/// Entry 0: `0 <= f <= ln(30x+1)/3 + 0.1`; entry 1: `f' >= 0`.
pub fn example1_opset() -> OperatorSet {
    let upper: crate::linop::BoundFn = Arc::new(|x: &[f64]| example1_upper(x[0]));
    let mut ops = OperatorSet::new(1);
    ops.push(SubOperator::Identity, BoundPair::functions(Bound::Const(0.0), Bound::Func(upper)))
        .expect("axis-free entry");
    ops.push(SubOperator::Partial(0), BoundPair::lower_only(0.0)).expect("axis 0 exists");
    ops
}

// ---------------------------------------------------------------------------
// robot arm

/// Input box `[0,1]^2 x [0,2pi]^2` for `(L1, L2, tau1, tau2)`.
pub const ROBOT_BOX: [(f64, f64); 4] = [(0.0, 1.0), (0.0, 1.0), (0.0, 2.0 * PI), (0.0, 2.0 * PI)];

/// y-coordinate of a two-segment arm: `L1 cos(t1) + L2 cos(t1 + t2)`.
pub fn robot_arm_f(x: &[f64]) -> f64 {
    x[0] * x[2].cos() + x[1] * (x[2] + x[3]).cos()
}

fn sign_bounds(g: fn(&[f64]) -> f64) -> BoundPair {
    let lower: crate::linop::BoundFn = Arc::new(move |x: &[f64]| if g(x) >= 0.0 { 0.0 } else { f64::NEG_INFINITY });
    let upper: crate::linop::BoundFn = Arc::new(move |x: &[f64]| if g(x) >= 0.0 { f64::INFINITY } else { 0.0 });
    BoundPair::functions(Bound::Func(lower), Bound::Func(upper))
}

/// Known signs of the derivatives with respect to the two segment lengths.
pub fn robot_opset() -> OperatorSet {
    let mut ops = OperatorSet::new(4);
    ops.push(SubOperator::Partial(0), sign_bounds(|x| x[2].cos())).expect("axis 0 exists");
    ops.push(SubOperator::Partial(1), sign_bounds(|x| (x[2] + x[3]).cos())).expect("axis 1 exists");
    ops
}

// ---------------------------------------------------------------------------
// pipeline burst capacity

/// Capacity (MPa) of a pipe with a rectangular defect, from unit-cube inputs
/// `(strength, diameter/thickness, thickness, depth/thickness, length)`.
pub fn pipeline_pcap(x: &[f64]) -> Result<f64> {
    if x.len() != 5 {
        return Err(Error::Dimension(format!("capacity takes 5 inputs, got {}", x.len())));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter(format!("capacity inputs must lie in [0,1], got {x:?}")));
    }
    let su = 450.0 + 100.0 * x[0];
    let t = 5.0 + 25.0 * x[2];
    let d_outer = t * (10.0 + 40.0 * x[1]);
    let depth = x[3] * t;
    let len = 1000.0 * x[4];
    let q = (1.0 + 0.31 * len * len / (d_outer * t)).sqrt();
    let ratio = depth / t;
    Ok(1.05 * (2.0 * t * su / (d_outer - t)) * (1.0 - ratio) / (1.0 - ratio / q))
}

/// Capacity as a function of the first `n_x` inputs, the rest fixed at 0.5.
pub fn pipeline_f(x: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() > 5 {
        return Err(Error::Dimension(format!("pipeline takes 1..=5 inputs, got {}", x.len())));
    }
    let mut full = [0.5; 5];
    full[..x.len()].copy_from_slice(x);
    pipeline_pcap(&full)
}

/// Derivative signs `+, -, +, -, -` on the first `n_c` of `n_x` inputs.
pub fn pipeline_opset(n_x: usize, n_c: usize) -> Result<OperatorSet> {
    if n_x == 0 || n_x > 5 || n_c > n_x {
        return Err(Error::InvalidParameter(format!("need 1 <= n_x <= 5 and n_c <= n_x, got n_x={n_x}, n_c={n_c}")));
    }
    let increasing = [true, false, true, false, false];
    let mut ops = OperatorSet::new(n_x);
    for (axis, inc) in increasing.iter().enumerate().take(n_c) {
        let b = if *inc { BoundPair::lower_only(0.0) } else { BoundPair::upper_only(0.0) };
        ops.push(SubOperator::Partial(axis), b)?;
    }
    Ok(ops)
}

// ---------------------------------------------------------------------------
// designs

/// Latin hypercube: each axis is cut into `n` strata holding one point each.
pub fn lhs_sample<R: Rng + ?Sized>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, bounds.len());
    for (j, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        // Fisher-Yates
        for i in (1..n).rev() {
            let k = rng.random_range(0..=i);
            strata.swap(i, k);
        }
        for (i, s) in strata.iter().enumerate() {
            let u = (*s as f64 + rng.random::<f64>()) / n as f64;
            out[(i, j)] = lo + (hi - lo) * u;
        }
    }
    out
}

/// Independent uniform points in a box.
pub fn uniform_sample<R: Rng + ?Sized>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, bounds.len());
    for i in 0..n {
        for (j, (lo, hi)) in bounds.iter().enumerate() {
            out[(i, j)] = lo + (hi - lo) * rng.random::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn example1_values() {
        assert!((example1_f(0.5) - 10f64.atan() / 3.0).abs() < 1e-15);
        assert!((example1_f(0.5) - 0.490_375_891_434_578_2).abs() < 1e-12);
        assert!(example1_f(0.6) > example1_f(0.4));
        for i in 0..1000 {
            let x = i as f64 / 999.0;
            let f = example1_f(x);
            assert!(f >= 0.0 && f <= example1_upper(x), "x = {x}");
        }
        let d = example1_design();
        assert_eq!(d.len(), 7);
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[6] - 0.225).abs() < 1e-15);
    }

    #[test]
    fn robot_values() {
        assert_eq!(robot_arm_f(&[1.0, 1.0, 0.0, 0.0]), 2.0);
        assert!(robot_arm_f(&[1.0, 0.0, PI / 2.0, 1.3]).abs() < 1e-15);
        assert!(robot_arm_f(&[0.5, 0.5, PI, PI]).abs() < 1e-15);
    }

    #[test]
    fn robot_bounds_follow_cosine_sign() {
        let ops = robot_opset();
        let (a, b) = ops.entries()[0].bounds.eval(&[0.5, 0.5, 0.1, 0.0]).unwrap();
        assert_eq!((a, b), (0.0, f64::INFINITY));
        let (a, b) = ops.entries()[0].bounds.eval(&[0.5, 0.5, PI, 0.0]).unwrap();
        assert_eq!((a, b), (f64::NEG_INFINITY, 0.0));
        let (a, _) = ops.entries()[1].bounds.eval(&[0.5, 0.5, 1.0, 1.0]).unwrap();
        assert_eq!(a, f64::NEG_INFINITY);
    }

    #[test]
    fn pipeline_values() {
        // defect-free limit: (1 - 0) / (1 - 0) = 1
        let x = [0.3, 0.7, 0.2, 0.0, 0.9];
        let t = 5.0 + 25.0 * 0.2;
        let d = t * (10.0 + 40.0 * 0.7);
        let su = 450.0 + 30.0;
        assert!((pipeline_pcap(&x).unwrap() - 1.05 * 2.0 * t * su / (d - t)).abs() < 1e-12);
        // centre of the cube, evaluated by hand: Q = sqrt(1 + 0.31 * 500^2 / (525 * 17.5))
        let q = (1.0f64 + 77_500.0 / 9_187.5).sqrt();
        let expect = 1.05 * (35.0 * 500.0 / 507.5) * 0.5 / (1.0 - 0.5 / q);
        let got = pipeline_pcap(&[0.5; 5]).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 21.623).abs() < 1e-3);
        assert!(pipeline_pcap(&[0.5, 0.5, 0.5, 1.2, 0.5]).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let v = pipeline_pcap(&[0.4, 0.6, 0.3, i as f64 / 20.0, 0.7]).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert_eq!(pipeline_f(&[0.5, 0.5, 0.5]).unwrap(), got);
    }

    #[test]
    fn pipeline_signs() {
        let ops = pipeline_opset(3, 2).unwrap();
        assert_eq!(ops.n_ops(), 2);
        assert_eq!(ops.entries()[1].bounds.eval(&[0.5; 3]).unwrap(), (f64::NEG_INFINITY, 0.0));
        assert!(pipeline_opset(3, 4).is_err());
    }

    #[test]
    fn lhs_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = lhs_sample(1, &[(2.0, 3.0)], &mut rng);
        assert!((2.0..=3.0).contains(&one[(0, 0)]));
        let d = lhs_sample(40, &ROBOT_BOX, &mut rng);
        for (j, (lo, hi)) in ROBOT_BOX.iter().enumerate() {
            let mut seen = [false; 40];
            for i in 0..40 {
                let v = d[(i, j)];
                assert!(v >= *lo && v <= *hi);
                let s = (((v - lo) / (hi - lo)) * 40.0).floor().min(39.0) as usize;
                assert!(!seen[s]);
                seen[s] = true;
            }
        }
        let a = lhs_sample(10, &[(0.0, 1.0)], &mut ChaCha8Rng::seed_from_u64(1));
        let b = lhs_sample(10, &[(0.0, 1.0)], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }
}
