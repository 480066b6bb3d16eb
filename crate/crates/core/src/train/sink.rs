use ndarray::{Array2, ArrayView2};

use crate::error::{LabError, Result};

/// Register-magnitude hinge: `lambda * mean_t max(0, ||x_t^reg||_inf - tau)`.
pub fn sink_loss(reg_rows: ArrayView2<f64>, lambda: f64, tau: f64) -> Result<f64> {
    Ok(sink_loss_and_grad(reg_rows, lambda, tau, reg_rows.nrows())?.0)
}

/// Hinge value summed over the given rows divided by `denom`, and its
/// gradient with respect to the rows. The gradient is nonzero only for rows
/// above `tau`, at the (first) arg-max channel.
pub fn sink_loss_and_grad(
    reg_rows: ArrayView2<f64>,
    lambda: f64,
    tau: f64,
    denom: usize,
) -> Result<(f64, Array2<f64>)> {
    if reg_rows.ncols() == 0 {
        return Err(LabError::config("sink loss needs at least one register channel"));
    }
    if lambda < 0.0 || tau <= 0.0 {
        return Err(LabError::config("sink loss needs lambda >= 0 and tau > 0"));
    }
    let mut grad = Array2::zeros(reg_rows.raw_dim());
    if reg_rows.nrows() == 0 || lambda == 0.0 {
        return Ok((0.0, grad));
    }
    let scale = lambda / denom as f64;
    let mut total = 0.0;
    for (t, row) in reg_rows.outer_iter().enumerate() {
        let (mut arg, mut best) = (0usize, f64::NEG_INFINITY);
        for (j, &v) in row.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = j;
            }
        }
        if best > tau {
            total += best - tau;
            grad[[t, arg]] = scale * row[arg].signum();
        }
    }
    Ok((scale * total, grad))
}
