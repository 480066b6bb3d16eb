//! Building blocks of the SwiGLU block: partitioned RMSNorm, SwiGLU MLP,
//! rotary embeddings and causal softmax attention.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{LabError, Result};

/// `sqrt(mean(x^2) + eps)` over one partition.
pub fn partition_rms(x: &[f64], eps: f64) -> f64 {
    if x.is_empty() {
        return 1.0;
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (ms + eps).sqrt()
}

fn normalize_into(x: &[f64], gamma: &[f64], eps: f64, out: &mut [f64]) {
    let r = partition_rms(x, eps);
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gamma) {
        *o = (xi / r) * g;
    }
}

/// RMSNorm with independent statistics and gains over the semantic channels
/// `[0, d-k)` and the register channels `[d-k, d)`. With `k = 0` it is the
/// ordinary RMSNorm.
pub fn rmsnorm_part(
    x: &[f64],
    gamma_sem: &[f64],
    gamma_reg: &[f64],
    k: usize,
    eps: f64,
) -> Result<Vec<f64>> {
    let d = x.len();
    if d == 0 || k >= d {
        return Err(LabError::config(format!("need 0 <= k < d, got k={k}, d={d}")));
    }
    if gamma_sem.len() != d - k || gamma_reg.len() != k {
        return Err(LabError::config(format!(
            "gain lengths ({}, {}) do not match partition sizes ({}, {k})",
            gamma_sem.len(),
            gamma_reg.len(),
            d - k
        )));
    }
    if !(eps > 0.0) {
        return Err(LabError::config("norm eps must be positive"));
    }
    let mut out = vec![0.0; d];
    let (xs, xr) = x.split_at(d - k);
    let (os, or) = out.split_at_mut(d - k);
    normalize_into(xs, gamma_sem, eps, os);
    normalize_into(xr, gamma_reg, eps, or);
    Ok(out)
}

/// Row-wise partitioned RMSNorm; `gamma` holds semantic then register gains.
pub fn rmsnorm_rows(x: ArrayView2<f64>, gamma: ArrayView1<f64>, k: usize, eps: f64) -> Array2<f64> {
    let d = x.ncols();
    let split = d - k;
    let g = gamma.as_slice().expect("contiguous gains");
    let mut out = Array2::zeros(x.raw_dim());
    for (row, mut orow) in x.outer_iter().zip(out.outer_iter_mut()) {
        let xr = row.to_vec();
        let o = orow.as_slice_mut().expect("standard layout");
        normalize_into(&xr[..split], &g[..split], eps, &mut o[..split]);
        normalize_into(&xr[split..], &g[split..], eps, &mut o[split..]);
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Intermediates of one SwiGLU MLP evaluation.
#[derive(Debug, Clone)]
pub struct SwigluParts {
    /// `silu(W1 x)`
    pub u: Vec<f64>,
    /// `W3 x`
    pub v: Vec<f64>,
    /// `u * v`, the input of `w2`.
    pub h: Vec<f64>,
    pub out: Vec<f64>,
}

/// `W2 (silu(W1 x) * W3 x)` for one token.
pub fn swiglu_mlp(
    x_tilde: &[f64],
    w1: ArrayView2<f64>,
    w3: ArrayView2<f64>,
    w2: ArrayView2<f64>,
) -> Result<SwigluParts> {
    let d = x_tilde.len();
    if w1.ncols() != d || w3.ncols() != d || w1.nrows() != w3.nrows() || w2.ncols() != w1.nrows() {
        return Err(LabError::config("SwiGLU weight shapes are inconsistent"));
    }
    let x = ArrayView1::from(x_tilde);
    let u: Vec<f64> = w1.dot(&x).iter().map(|&a| silu(a)).collect();
    let v: Vec<f64> = w3.dot(&x).to_vec();
    let h: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a * b).collect();
    if let Some(i) = h.iter().position(|z| !z.is_finite()) {
        return Err(LabError::numeric("w2 input", format!("non-finite product at channel {i}")));
    }
    let out = w2.dot(&ArrayView1::from(&h[..])).to_vec();
    if out.iter().any(|z| !z.is_finite()) {
        return Err(LabError::numeric("w2 output", "non-finite value"));
    }
    Ok(SwigluParts { u, v, h, out })
}

/// Cos/sin tables for rotary embeddings, `[T, head_dim/2]` each.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
}

impl RopeTable {
    pub fn new(t: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((t, half));
        let mut sin = Array2::zeros((t, half));
        for pos in 0..t {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos[[pos, i]] = theta.cos();
                sin[[pos, i]] = theta.sin();
            }
        }
        RopeTable { cos, sin }
    }

    /// Rotates channel pairs `(i, i + half)` of each row of one head's slice.
    /// `inverse` applies the transpose rotation (used by backprop).
    pub fn apply(&self, mut rows: ArrayViewMut2<f64>, inverse: bool) {
        let half = rows.ncols() / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (pos, mut row) in rows.outer_iter_mut().enumerate() {
            for i in 0..half {
                let (c, s) = (self.cos[[pos, i]], sign * self.sin[[pos, i]]);
                let a = row[i];
                let b = row[i + half];
                row[i] = a * c - b * s;
                row[i + half] = a * s + b * c;
            }
        }
    }
}

/// Result of causal attention over a fused `[Q | K | V]` projection.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Input of `o_proj`: per-head softmax-weighted value aggregate, `[T, d]`.
    pub o_input: Array2<f64>,
    /// Post-RoPE queries and keys, `[T, d]` each (kept for backprop).
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    /// Attention weights per head, `[T, T]`, rows sum to one.
    pub weights: Vec<Array2<f64>>,
}

/// Per-head causal softmax attention on `qkv = x W_qkv^T` with RoPE on Q, K.
pub fn causal_attention(
    qkv: ArrayView2<f64>,
    n_heads: usize,
    head_dim: usize,
    rope: &RopeTable,
    keep_weights: bool,
) -> AttentionOutput {
    let t = qkv.nrows();
    let d = n_heads * head_dim;
    let mut q = qkv.slice(s![.., 0..d]).to_owned();
    let mut k = qkv.slice(s![.., d..2 * d]).to_owned();
    let v = qkv.slice(s![.., 2 * d..3 * d]);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut o_input = Array2::zeros((t, d));
    let mut weights = Vec::new();
    for h in 0..n_heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        rope.apply(q.slice_mut(cols), false);
        rope.apply(k.slice_mut(cols), false);
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        causal_softmax_rows(&mut scores, scale);
        let out = scores.dot(&v.slice(cols));
        o_input.slice_mut(cols).assign(&out);
        if keep_weights {
            weights.push(scores);
        }
    }
    AttentionOutput { o_input, q, k, weights }
}

/// In-place `softmax(scale * row)` over the causal prefix `j <= i`; entries
/// above the diagonal become zero.
pub fn causal_softmax_rows(scores: &mut Array2<f64>, scale: f64) {
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            row[j] *= scale;
            max = max.max(row[j]);
        }
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum += e;
        }
        for j in 0..=i {
            row[j] /= sum;
        }
        for j in i + 1..row.len() {
            row[j] = 0.0;
        }
    }
}

/// Attention sub-block on normalised rows: `W_o · attention(x W_qkv^T)`.
/// Returns the block output and the `o_proj` input.
pub fn attention_block(
    x_tilde_rows: ArrayView2<f64>,
    w_qkv: ArrayView2<f64>,
    w_o: ArrayView2<f64>,
    n_heads: usize,
    rope_base: f64,
) -> Result<(Array2<f64>, AttentionOutput)> {
    let d = x_tilde_rows.ncols();
    if w_qkv.dim() != (3 * d, d) || w_o.dim() != (d, d) || !d.is_multiple_of(n_heads) {
        return Err(LabError::config("attention weight shapes are inconsistent"));
    }
    let head_dim = d / n_heads;
    let rope = RopeTable::new(x_tilde_rows.nrows(), head_dim, rope_base);
    let qkv = x_tilde_rows.dot(&w_qkv.t());
    let att = causal_attention(qkv.view(), n_heads, head_dim, &rope, true);
    let out = att.o_input.dot(&w_o.t());
    Ok((out, att))
}

/// Numerically stable `log_softmax` of one logit row.
pub fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn rmsnorm_hand_values() {
        let out = rmsnorm_part(&[3.0, 4.0], &[1.0, 1.0], &[], 0, 1e-300).unwrap();
        let r = 12.5f64.sqrt();
        close(&out, &[3.0 / r, 4.0 / r], 1e-12);
        close(&out, &[0.8485, 1.1314], 1e-4);

        let out = rmsnorm_part(&[2.0, 0.0, 0.0, 5.0], &[1.0, 1.0], &[1.0, 1.0], 2, 1e-300).unwrap();
        close(&out, &[2f64.sqrt(), 0.0, 0.0, 2f64.sqrt()], 1e-12);
    }

    #[test]
    fn rmsnorm_scale_invariant() {
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let x = vec![c; 6];
            let out = rmsnorm_part(&x, &[1.0; 6], &[], 0, 1e-300).unwrap();
            close(&out, &[1.0; 6], 1e-12);
        }
    }

    #[test]
    fn rmsnorm_rejects_bad_shapes() {
        assert!(rmsnorm_part(&[1.0, 2.0], &[1.0], &[], 0, 1e-6).is_err());
        assert!(rmsnorm_part(&[1.0, 2.0], &[], &[1.0, 1.0], 2, 1e-6).is_err());
        assert!(rmsnorm_part(&[1.0, 2.0], &[1.0, 1.0], &[], 0, 0.0).is_err());
    }

    #[test]
    fn swiglu_scalar_and_degenerate() {
        let one = array![[1.0]];
        let p = swiglu_mlp(&[2.0], one.view(), one.view(), one.view()).unwrap();
        let expected = 2.0 / (1.0 + (-2.0f64).exp()) * 2.0;
        assert!((p.out[0] - expected).abs() < 1e-12);
        assert!((p.out[0] - 3.5232).abs() < 1e-4);

        let w = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let w2 = Array2::from_shape_fn((3, 5), |(i, j)| (i + j) as f64 * 0.1);
        let p = swiglu_mlp(&[0.0; 3], w.view(), w.view(), w2.view()).unwrap();
        assert!(p.out.iter().all(|&v| v == 0.0));
        let zero = Array2::zeros((5, 3));
        let p = swiglu_mlp(&[1.0, -2.0, 0.5], w.view(), zero.view(), w2.view()).unwrap();
        assert!(p.out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attention_is_value() {
        let d = 4;
        let w_qkv = Array2::from_shape_fn((3 * d, d), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        let w_o = Array2::eye(d);
        let x = array![[0.3, -1.0, 0.7, 0.2]];
        let (_, att) = attention_block(x.view(), w_qkv.view(), w_o.view(), 2, 10_000.0).unwrap();
        let v = x.dot(&w_qkv.slice(s![2 * d.., ..]).t());
        for w in &att.weights {
            assert_eq!(w[[0, 0]], 1.0);
        }
        close(att.o_input.as_slice().unwrap(), v.as_slice().unwrap(), 1e-15);
    }

    #[test]
    fn uniform_logits_give_prefix_average() {
        let d = 4;
        let t = 5;
        // Q = K = 0, V = identity.
        let mut w_qkv = Array2::zeros((3 * d, d));
        for i in 0..d {
            w_qkv[[2 * d + i, i]] = 1.0;
        }
        let x = Array2::from_shape_fn((t, d), |(i, j)| (i * d + j) as f64);
        let (_, att) = attention_block(x.view(), w_qkv.view(), Array2::eye(d).view(), 2, 10_000.0).unwrap();
        for w in &att.weights {
            for i in 0..t {
                for j in 0..t {
                    let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                    assert!((w[[i, j]] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let d = 8;
        let t = 9;
        let w_qkv = Array2::from_shape_fn((3 * d, d), |(i, j)| ((i * 31 + j * 17) % 11) as f64 - 5.0);
        let x = Array2::from_shape_fn((t, d), |(i, j)| ((i * 13 + j * 7) % 9) as f64 * 0.3 - 1.0);
        let (_, att) = attention_block(x.view(), w_qkv.view(), Array2::eye(d).view(), 2, 10_000.0).unwrap();
        for w in &att.weights {
            for row in w.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let rope = RopeTable::new(6, 8, 10_000.0);
        let orig = Array2::from_shape_fn((6, 8), |(i, j)| (i as f64 + 1.0) * (j as f64 - 3.5));
        let mut x = orig.clone();
        rope.apply(x.view_mut(), false);
        rope.apply(x.view_mut(), true);
        for (a, b) in x.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
