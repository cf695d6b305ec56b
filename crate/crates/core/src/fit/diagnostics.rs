//! Residual and scan-cycle diagnostics.

use thiserror::Error;

use crate::geometry::RigidMotion;
use crate::stats::{mean, quantile_sorted, t_upper_quantile, variance};

use super::ParamField;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticError {
    #[error("field has no successful fits with t and DW values")]
    EmptyField,
    #[error("need at least 3 cycles, got {0}")]
    TooFewCycles(usize),
    #[error("significance level must lie in (0, 1), got {0}")]
    BadAlpha(f64),
}

/// For each `θ`, the DW values at points whose t exceeds the empirical
/// `θ`-quantile of the t-field (`θ = 0` keeps every point).
pub fn dw_peak_densities(field: &ParamField, thetas: &[f64]) -> Result<Vec<Vec<f64>>, DiagnosticError> {
    let pairs: Vec<(f64, f64)> = field
        .successful()
        .filter_map(|(_, f)| Some((f.t_value?, f.dw?)))
        .collect();
    if pairs.is_empty() {
        return Err(DiagnosticError::EmptyField);
    }
    let mut ts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    Ok(thetas
        .iter()
        .map(|&theta| {
            if theta <= 0.0 {
                return pairs.iter().map(|p| p.1).collect();
            }
            let q = quantile_sorted(&ts, theta);
            pairs.iter().filter(|p| p.0 > q).map(|p| p.1).collect()
        })
        .collect())
}

/// Motion magnitude of each cycle relative to the previous one:
/// `‖Δtranslation‖ + radius · angle(ΔR)` (0 for the first cycle).
pub fn framewise_displacement(motions: &[RigidMotion], radius_mm: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(motions.len());
    for (c, m) in motions.iter().enumerate() {
        if c == 0 {
            out.push(0.0);
            continue;
        }
        let prev = &motions[c - 1];
        let dt = (m.translation_vector() - prev.translation_vector()).norm();
        let rel = m.rotation() * prev.rotation().transpose();
        let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        out.push(dt + radius_mm * cos.acos());
    }
    out
}

/// Iterative two-sided Grubbs test. Returns flagged indices in ascending order.
pub fn grubbs_outlier_cycles(magnitudes: &[f64], alpha: f64) -> Result<Vec<usize>, DiagnosticError> {
    if magnitudes.len() < 3 {
        return Err(DiagnosticError::TooFewCycles(magnitudes.len()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DiagnosticError::BadAlpha(alpha));
    }
    let mut alive: Vec<usize> = (0..magnitudes.len()).collect();
    let mut flagged = Vec::new();
    while alive.len() >= 3 {
        let vals: Vec<f64> = alive.iter().map(|&i| magnitudes[i]).collect();
        let sd = variance(&vals).sqrt();
        if !(sd > 0.0) {
            break;
        }
        let m = mean(&vals);
        let (pos, g) = vals
            .iter()
            .enumerate()
            .map(|(k, v)| (k, (v - m).abs() / sd))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let n = vals.len() as f64;
        let Some(t) = t_upper_quantile(alpha / (2.0 * n), n - 2.0) else {
            break;
        };
        let critical = (n - 1.0) / n.sqrt() * (t * t / (n - 2.0 + t * t)).sqrt();
        if g > critical {
            flagged.push(alive.remove(pos));
        } else {
            break;
        }
    }
    flagged.sort_unstable();
    Ok(flagged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn grubbs_examples() {
        assert!(grubbs_outlier_cycles(&[2.0; 10], 0.05).unwrap().is_empty());
        let mut m = vec![1.0; 9];
        m.push(50.0);
        assert_eq!(grubbs_outlier_cycles(&m, 0.05).unwrap(), vec![9]);
        assert!(grubbs_outlier_cycles(&[1.0, 2.0], 0.05).is_err());
    }

    #[test]
    fn grubbs_critical_value_matches_table() {
        // Tabulated two-sided critical values at α = 0.05.
        for (n, g) in [(10usize, 2.290), (20, 2.709), (30, 2.908)] {
            // A sample whose G sits just above / below the tabulated value.
            let base: Vec<f64> = (0..n - 1).map(|k| (k as f64 * 0.731).sin()).collect();
            let flags = |extra: f64| {
                let mut v = base.clone();
                v.push(extra);
                grubbs_outlier_cycles(&v, 0.05).unwrap().contains(&(n - 1))
            };
            // Bisect the outlier value at which the test starts to flag.
            let (mut lo, mut hi) = (0.0, 100.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if flags(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let mut v = base.clone();
            v.push(hi);
            let m = mean(&v);
            let gstat = (hi - m).abs() / variance(&v).sqrt();
            assert!((gstat - g).abs() < 2e-3, "n={n}: {gstat} vs {g}");
        }
    }

    #[test]
    fn grubbs_false_flag_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let reps = 1000;
        let mut flagged = 0;
        for _ in 0..reps {
            let v: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
            if !grubbs_outlier_cycles(&v, 0.05).unwrap().is_empty() {
                flagged += 1;
            }
        }
        assert!((flagged as f64 / reps as f64) <= 0.07, "{flagged}");
    }

    #[test]
    fn framewise_displacement_examples() {
        let ms = vec![
            RigidMotion::identity(),
            RigidMotion::translation(Vector3::new(3.0, 4.0, 0.0)),
            RigidMotion::from_axis_angle(Vector3::z(), 0.01, Vector3::new(3.0, 4.0, 0.0)),
        ];
        let fd = framewise_displacement(&ms, 50.0);
        assert_eq!(fd[0], 0.0);
        assert!((fd[1] - 5.0).abs() < 1e-12);
        assert!((fd[2] - 0.5).abs() < 1e-9);
    }
}
