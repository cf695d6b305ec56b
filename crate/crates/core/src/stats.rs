//! Small distribution helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// 0.975 quantile of the standard normal.
pub const Z_975: f64 = 1.959_963_984_540_054;

fn student(df: f64) -> Option<StudentsT> {
    StudentsT::new(0.0, 1.0, df).ok()
}

/// Upper-tail quantile `q` with `P(T > q) = p` for Student t with `df` degrees
/// of freedom. `None` for non-positive or non-finite `df`.
pub fn t_upper_quantile(p: f64, df: f64) -> Option<f64> {
    if !(df > 0.0) || !(0.0..=1.0).contains(&p) {
        return None;
    }
    if df.is_infinite() {
        return Some(normal_upper_quantile(p));
    }
    Some(student(df)?.inverse_cdf(1.0 - p))
}

/// `P(|T| ≥ |t|)`.
pub fn t_two_sided_p(t: f64, df: f64) -> Option<f64> {
    if !(df > 0.0) || t.is_nan() {
        return None;
    }
    if df.is_infinite() {
        return Some(normal_two_sided_p(t));
    }
    Some((2.0 * student(df)?.sf(t.abs())).min(1.0))
}

pub fn normal_upper_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - p)
}

pub fn normal_two_sided_p(z: f64) -> f64 {
    (2.0 * Normal::standard().sf(z.abs())).min(1.0)
}

/// Type-7 (linear interpolation) sample quantile of ascending-sorted data.
pub fn quantile_sorted(sorted: &[f64], theta: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = theta.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_quantiles() {
        assert!((t_upper_quantile(0.025, 10.0).unwrap() - 2.228_138_851_986_273).abs() < 1e-9);
        assert!((t_upper_quantile(0.025, 1.0).unwrap() - 12.706_204_736_174_7).abs() < 1e-7);
        assert!((normal_upper_quantile(0.025) - Z_975).abs() < 1e-12);
        assert!((t_two_sided_p(2.228_138_851_986_273, 10.0).unwrap() - 0.05).abs() < 1e-10);
        assert!(t_upper_quantile(0.05, 0.0).is_none());
    }

    #[test]
    fn quantile_interpolates() {
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.99) - 989.01).abs() < 1e-9);
        assert_eq!(quantile_sorted(&v, 0.0), 0.0);
        assert_eq!(quantile_sorted(&v, 1.0), 999.0);
    }
}
