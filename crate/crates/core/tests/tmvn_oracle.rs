mod common;

use cgp::tmvn::*;
use common::{batch_se, quad_moments, tmvn_problems};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn univariate_moments_match_quadrature() {
    let inf = f64::INFINITY;
    let cases = [
        (0.0, 1.0, -1.0, 1.0),
        (0.0, 1.0, 0.0, inf),
        (1.5, 0.7, -inf, 0.2),
        (-2.0, 3.0, 1.0, 4.0),
        (0.0, 1.0, 2.5, 3.5),
        (0.3, 0.2, -0.1, 0.05),
        (0.0, 1.0, -inf, -4.0),
        (5.0, 2.0, 0.0, 6.0),
    ];
    for (mu, s, a, b) in cases {
        let (m, v) = truncnorm_moments_1d(mu, s, a, b).unwrap();
        let (qm, qv) = quad_moments(mu, s, a, b);
        assert!((m - qm).abs() < 1e-6, "mean {mu} {s} [{a}, {b}]: {m} vs {qm}");
        assert!((v - qv).abs() < 1e-6, "var {mu} {s} [{a}, {b}]: {v} vs {qv}");
    }
}

#[test]
fn quadrant_probability_with_correlation_half() {
    let p = TmvnProblem::new(
        DVector::zeros(2),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        DVector::zeros(2),
        DVector::from_element(2, f64::INFINITY),
    )
    .unwrap();
    let (lp, _) = log_prob_box(&p, 20_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // 1/4 + asin(rho) / (2 pi) = 1/3
    assert!((lp.exp() - 1.0 / 3.0).abs() < 0.02, "{}", lp.exp());
}

#[test]
fn box_probability_matches_exact_product_for_independent_axes() {
    let p = TmvnProblem::new(
        DVector::from_vec(vec![0.0, 1.0, -0.5]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25])),
        DVector::from_vec(vec![-1.0, 0.0, -1.0]),
        DVector::from_vec(vec![2.0, f64::INFINITY, 0.0]),
    )
    .unwrap();
    let exact: f64 = [(-1.0f64, 2.0f64), (-0.5, f64::INFINITY), (-1.0, 1.0)]
        .iter()
        .map(|(a, b)| cgp::normal::cdf(*b) - cgp::normal::cdf(*a))
        .product();
    let (lp, se) = log_prob_box(&p, 1000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // with independent axes every importance weight is the same
    assert!((lp - exact.ln()).abs() < 1e-10 && se < 1e-10);
}

#[test]
fn markov_samplers_agree_with_rejection() {
    let n = 100_000;
    for (i, p) in tmvn_problems().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
        let rej = sample_rejection(p, n, &mut rng, 100 * n).unwrap().samples;
        let gib = sample_gibbs(p, n, &mut rng, GibbsOptions { burn_in: 1000, thin: 1 }).unwrap();
        let hmc = sample_hmc(p, n, &mut rng, 100).unwrap();
        let (se_r, m_r) = (batch_se(&rej), rej.row_mean());
        for (name, s) in [("gibbs", &gib), ("hmc", &hmc)] {
            let (se, m) = (batch_se(s), s.row_mean());
            for j in 0..p.dim() {
                let tol = 3.0 * (se_r[j].powi(2) + se[j].powi(2)).sqrt();
                assert!((m[j] - m_r[j]).abs() < tol, "problem {i} {name} axis {j}: {} vs {} (tol {tol})", m[j], m_r[j]);
            }
            assert!(s.iter().enumerate().all(|(k, v)| {
                let j = k / n;
                *v >= p.lower[j] && *v <= p.upper[j]
            }));
        }
    }
}
