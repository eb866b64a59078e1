use crate::{Error, Result};

/// Empirical quantile of sorted data with linear interpolation between order
/// statistics (position `(n - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("metric inputs have lengths {a} and {b}")));
    }
    Ok(())
}

/// Predictivity coefficient `1 - sum (pred - y)^2 / sum (mean(y) - y)^2`.
pub fn q2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    if y_true.len() < 2 {
        return Err(Error::InvalidParameter("q2 needs at least two points".into()));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let den: f64 = y_true.iter().map(|y| (mean - y).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::InvalidParameter("q2 is undefined for constant y_true".into()));
    }
    let num: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (p - y).powi(2)).sum();
    Ok(1.0 - num / den)
}

/// Predictive variance adequation `|ln(mean((pred - y)^2 / var))|`.
pub fn pva(y_true: &[f64], y_pred: &[f64], var_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    check_lengths(y_true.len(), var_pred.len())?;
    if y_true.is_empty() {
        return Err(Error::InvalidParameter("pva needs at least one point".into()));
    }
    if let Some(v) = var_pred.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidParameter(format!("predictive variances must be positive, got {v}")));
    }
    let s: f64 = y_true
        .iter()
        .zip(y_pred)
        .zip(var_pred)
        .map(|((y, p), v)| (p - y).powi(2) / v)
        .sum();
    Ok((s / y_true.len() as f64).ln().abs())
}

/// Average width of the intervals `[p025, p975]`.
pub fn awoci(p975: &[f64], p025: &[f64]) -> Result<f64> {
    check_lengths(p975.len(), p025.len())?;
    if p975.is_empty() {
        return Err(Error::InvalidParameter("awoci needs at least one point".into()));
    }
    if let Some(i) = (0..p975.len()).find(|&i| !(p975[i] >= p025[i])) {
        return Err(Error::InvalidParameter(format!("upper percentile below lower at index {i}")));
    }
    Ok(p975.iter().zip(p025).map(|(u, l)| u - l).sum::<f64>() / p975.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q2_examples() {
        let y = [0.0, 1.0, 2.0];
        assert_eq!(q2(&y, &y).unwrap(), 1.0);
        assert_eq!(q2(&y, &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((q2(&y, &[0.0, 1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(q2(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(q2(&y, &[1.0]).is_err());
    }

    #[test]
    fn pva_examples() {
        let y = [0.0, 0.0];
        assert!(pva(&y, &[1.0, -2.0], &[1.0, 4.0]).unwrap().abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((pva(&y, &[e.sqrt(), e.sqrt()], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        // doubling every variance subtracts ln 2 inside the absolute value
        let (p, v) = ([0.3, -1.2, 0.5], [0.2, 0.5, 0.1]);
        let yt = [0.0; 3];
        let inner: f64 = (p.iter().zip(&v).map(|(a, b)| a * a / b).sum::<f64>() / 3.0).ln();
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((pva(&yt, &p, &v2).unwrap() - (inner - 2f64.ln()).abs()).abs() < 1e-12);
        assert!(pva(&y, &y, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn awoci_examples() {
        assert_eq!(awoci(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(awoci(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(awoci(&[0.0], &[1.0]).is_err());
        let z = 1.959_963_984_540_054;
        assert!((awoci(&[z], &[-z]).unwrap() - 3.919_927_969).abs() < 1e-8);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert!((quantile_sorted(&s, 0.5) - 2.5).abs() < 1e-15);
        assert!(quantile_sorted(&[], 0.5).is_nan());
    }
}
