//! Tail statistics and the exact inequalities behind the reader/generator
//! argument, as checkable functions.

use ndarray::{Array2, ArrayView2};

use crate::error::{LabError, Result};
use crate::model::ops::{partition_rms, rmsnorm_part};

/// Excess kurtosis `E[(x-mu)^4] / Var^2 - 3` with 1/n moments.
///
/// `Ok(None)` marks a (numerically) constant input, for which the statistic
/// is undefined.
pub fn excess_kurtosis(samples: &[f64]) -> Result<Option<f64>> {
    if samples.len() < 4 {
        return Err(LabError::usage(format!(
            "excess kurtosis needs at least 4 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(LabError::numeric("excess_kurtosis", "non-finite sample"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in samples {
        let d = (x - mean) * (x - mean);
        m2 += d;
        m4 += d * d;
    }
    m2 /= n;
    m4 /= n;
    let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Deviations below ~1e-12 of the magnitude are summation noise.
    if m2 <= (1e-12 * scale).powi(2) {
        return Ok(None);
    }
    Ok(Some(m4 / (m2 * m2) - 3.0))
}

/// Residual of `E[(uv)^4] = E[u^4] E[v^4] + Cov(u^4, v^4)` (1/n moments),
/// relative to the largest term.
pub fn fourth_moment_identity_check(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(LabError::usage("fourth-moment check needs equal, non-empty sample vectors"));
    }
    let n = u.len() as f64;
    let u4: Vec<f64> = u.iter().map(|x| x.powi(4)).collect();
    let v4: Vec<f64> = v.iter().map(|x| x.powi(4)).collect();
    let mean_u4 = u4.iter().sum::<f64>() / n;
    let mean_v4 = v4.iter().sum::<f64>() / n;
    let mean_prod = u4.iter().zip(&v4).map(|(a, b)| a * b).sum::<f64>() / n;
    let cov = u4.iter().zip(&v4).map(|(a, b)| (a - mean_u4) * (b - mean_v4)).sum::<f64>() / n;
    let residual = (mean_prod - mean_u4 * mean_v4 - cov).abs();
    let scale = mean_prod.abs().max((mean_u4 * mean_v4).abs()).max(cov.abs());
    Ok(if scale == 0.0 { 0.0 } else { residual / scale })
}

/// Induced infinity norm: the largest absolute row sum.
pub fn inf_norm_induced(w: ArrayView2<f64>) -> f64 {
    w.outer_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Checks, per partition, `|norm(x)|_inf <= |gamma|_inf |x|_inf / rms(x)`.
/// The bound is evaluated in the same operation order as the norm, so it
/// holds exactly in floating point.
pub fn norm_bound_holds(x: &[f64], gamma_sem: &[f64], gamma_reg: &[f64], k: usize, eps: f64) -> Result<bool> {
    let y = rmsnorm_part(x, gamma_sem, gamma_reg, k, eps)?;
    let d = x.len();
    let parts = [(0..d - k, gamma_sem), (d - k..d, gamma_reg)];
    for (range, gamma) in parts {
        if range.is_empty() {
            continue;
        }
        let xs = &x[range.clone()];
        let r = partition_rms(xs, eps);
        let bound = (inf_norm(xs) / r) * inf_norm(gamma);
        if inf_norm(&y[range]) > bound {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Checks `|sum_j alpha_j W x_j|_inf <= |W|_{inf->inf} max_j |x_j|_inf` for
/// simplex weights `alpha` over the rows `x_j` of `xs`. `rel_slack` absorbs
/// rounding in the two sides.
pub fn aggregate_bound_holds(w: &Array2<f64>, alpha: &[f64], xs: &Array2<f64>, rel_slack: f64) -> Result<bool> {
    if alpha.len() != xs.nrows() || w.ncols() != xs.ncols() {
        return Err(LabError::usage("aggregate bound: shape mismatch"));
    }
    if alpha.iter().any(|&a| a < 0.0) || (alpha.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(LabError::usage("aggregate bound: alpha must lie on the simplex"));
    }
    let mut agg = vec![0.0; w.ncols()];
    for (a, row) in alpha.iter().zip(xs.outer_iter()) {
        for (g, &v) in agg.iter_mut().zip(row) {
            *g += a * v;
        }
    }
    let out: Vec<f64> = w.outer_iter().map(|r| r.iter().zip(&agg).map(|(a, b)| a * b).sum()).collect();
    let max_x = xs.outer_iter().map(|r| inf_norm(r.as_slice().expect("standard layout"))).fold(0.0, f64::max);
    let bound = inf_norm_induced(w.view()) * max_x;
    Ok(inf_norm(&out) <= bound * (1.0 + rel_slack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn kurtosis_examples() {
        let rad: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(excess_kurtosis(&rad).unwrap(), Some(-2.0));
        assert_eq!(excess_kurtosis(&[0.3; 50]).unwrap(), None);
        assert_eq!(excess_kurtosis(&[0.0; 5]).unwrap(), None);
        assert!(excess_kurtosis(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn fourth_moment_hand_value() {
        // mean(u^4 v^4) = 128.5, mean(u^4)^2 = 72.25, cov = 56.25.
        assert_eq!(fourth_moment_identity_check(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn induced_norm_examples() {
        assert_eq!(inf_norm_induced(array![[1.0, -2.0], [0.5, 0.5]].view()), 3.0);
        assert_eq!(inf_norm_induced(Array2::<f64>::eye(4).view()), 1.0);
        assert_eq!(inf_norm_induced(Array2::<f64>::zeros((3, 2)).view()), 0.0);
    }

    proptest! {
        #[test]
        fn identity_residual_is_tiny(u in prop::collection::vec(-10.0f64..10.0, 1..64), seed in 0u64..1000) {
            let v: Vec<f64> = u.iter().enumerate().map(|(i, x)| x * 0.7 + ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            prop_assert!(fourth_moment_identity_check(&u, &v).unwrap() <= 1e-10);
        }

        #[test]
        fn norm_bound(x in prop::collection::vec(-1e3f64..1e3, 2..40), g in -3.0f64..3.0, k_frac in 0.0f64..0.9) {
            let d = x.len();
            let k = ((d as f64) * k_frac) as usize;
            let gs: Vec<f64> = (0..d - k).map(|i| g * (1.0 + 0.1 * i as f64)).collect();
            let gr: Vec<f64> = (0..k).map(|i| g - 0.2 * i as f64).collect();
            prop_assert!(norm_bound_holds(&x, &gs, &gr, k, 1e-6).unwrap());
        }
    }
}
