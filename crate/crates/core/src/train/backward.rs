//! Training forward pass with cached activations and the hand-written
//! backward pass for cross-entropy plus the register hinge.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::sink::sink_loss_and_grad;
use crate::error::{LabError, Result};
use crate::model::ops::{causal_attention, log_softmax, rmsnorm_rows, silu, RopeTable};
use crate::model::{ModelConfig, Params};

/// Which residual channels the hinge acts on and where.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkSettings {
    pub lambda: f64,
    pub tau: f64,
    /// Number of trailing residual channels penalised (0 disables the hinge).
    pub channels: usize,
    /// Apply at every block input instead of only before the first block.
    pub every_block: bool,
}

impl SinkSettings {
    pub fn disabled() -> Self {
        SinkSettings {
            lambda: 0.0,
            tau: 1.0,
            channels: 0,
            every_block: false,
        }
    }

    fn active(&self) -> bool {
        self.channels > 0
    }
}

/// Losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    /// Mean next-token cross-entropy (nats).
    pub ce: f64,
    pub sink: f64,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.sink
    }
}

struct LayerCache {
    x_in: Array2<f64>,
    xn1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o_in: Array2<f64>,
    x_mid: Array2<f64>,
    xn2: Array2<f64>,
    a1: Array2<f64>,
    a3: Array2<f64>,
    h: Array2<f64>,
}

/// Backward of the partitioned RMSNorm for a batch of rows.
/// Returns `(dx, dgamma)`.
pub fn rmsnorm_backward(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    k: usize,
    eps: f64,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols();
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dg = Array1::zeros(d);
    for (p_lo, p_hi) in [(0, d - k), (d - k, d)] {
        if p_lo == p_hi {
            continue;
        }
        let n = (p_hi - p_lo) as f64;
        for t in 0..x.nrows() {
            let xr = x.slice(s![t, p_lo..p_hi]);
            let dyr = dy.slice(s![t, p_lo..p_hi]);
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
            let r = (ms + eps).sqrt();
            let mut dot = 0.0;
            for j in 0..xr.len() {
                let g = gamma[p_lo + j];
                dg[p_lo + j] += dyr[j] * xr[j] / r;
                dot += dyr[j] * g * xr[j];
            }
            let c = dot / (n * r * r * r);
            for j in 0..xr.len() {
                dx[[t, p_lo + j]] = dyr[j] * gamma[p_lo + j] / r - xr[j] * c;
            }
        }
    }
    (dx, dg)
}

fn silu_grad(a: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-a).exp());
    sig * (1.0 + a * (1.0 - sig))
}

/// Accumulates gradients of `ce + sink` for one sequence into `grads`.
/// `ce_denom`/`sink_denom` are the batch-wide prediction/token counts used
/// for averaging. Returns the unnormalised CE sum and the sink contribution.
fn sequence_grad(
    cfg: &ModelConfig,
    params: &Params,
    rope: &RopeTable,
    tokens: &[u32],
    sink: &SinkSettings,
    ce_denom: usize,
    sink_denom: usize,
    grads: &mut Params,
) -> Result<(f64, f64)> {
    let t_len = tokens.len();
    let d = cfg.d_model;
    let (k, eps) = (cfg.k_registers, cfg.norm_eps);
    let (nh, hd) = (cfg.n_heads, cfg.head_dim);

    let mut x = Array2::zeros((t_len, d));
    for (mut row, &tok) in x.outer_iter_mut().zip(tokens) {
        row.assign(&params.embed.row(tok as usize));
    }
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let x_in = x.clone();
        let xn1 = rmsnorm_rows(x.view(), lp.gamma1.view(), k, eps);
        let qkv = xn1.dot(&lp.w_qkv.t());
        let att = causal_attention(qkv.view(), nh, hd, rope, true);
        let v = qkv.slice(s![.., 2 * d..]).to_owned();
        x += &att.o_input.dot(&lp.w_o.t());
        let x_mid = x.clone();
        let xn2 = rmsnorm_rows(x.view(), lp.gamma2.view(), k, eps);
        let a1 = xn2.dot(&lp.w1.t());
        let a3 = xn2.dot(&lp.w3.t());
        let mut h = a1.mapv(silu);
        h *= &a3;
        x += &h.dot(&lp.w2.t());
        caches.push(LayerCache {
            x_in,
            xn1,
            q: att.q,
            k: att.k,
            v,
            probs: att.weights,
            o_in: att.o_input,
            x_mid,
            xn2,
            a1,
            a3,
            h,
        });
    }
    let xf = rmsnorm_rows(x.view(), params.gamma_final.view(), k, eps);
    let head = params.head_matrix();
    let logits = xf.dot(&head.t());

    let mut ce_sum = 0.0;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for t in 0..t_len.saturating_sub(1) {
        let lp = log_softmax(logits.row(t));
        let target = tokens[t + 1] as usize;
        ce_sum -= lp[target];
        let mut drow = dlogits.row_mut(t);
        for (j, &l) in lp.iter().enumerate() {
            drow[j] = l.exp() / ce_denom as f64;
        }
        drow[target] -= 1.0 / ce_denom as f64;
    }
    if !ce_sum.is_finite() {
        return Err(LabError::numeric("cross-entropy", "non-finite loss"));
    }

    let dhead = dlogits.t().dot(&xf);
    match &mut grads.head {
        Some(gh) => *gh += &dhead,
        None => grads.embed += &dhead,
    }
    let dxf = dlogits.dot(head);
    let (mut dx, dgf) = rmsnorm_backward(x.view(), params.gamma_final.view(), k, eps, dxf.view());
    grads.gamma_final += &dgf;

    let mut sink_total = 0.0;
    let scale = 1.0 / (hd as f64).sqrt();
    for (l, (lp, c)) in params.layers.iter().zip(&caches).enumerate().rev() {
        let gl = &mut grads.layers[l];
        // MLP
        gl.w2 += &dx.t().dot(&c.h);
        let dh = dx.dot(&lp.w2);
        let mut da1 = &dh * &c.a3;
        da1.zip_mut_with(&c.a1, |g, &a| *g *= silu_grad(a));
        let da3 = &dh * &c.a1.mapv(silu);
        gl.w1 += &da1.t().dot(&c.xn2);
        gl.w3 += &da3.t().dot(&c.xn2);
        let dxn2 = da1.dot(&lp.w1) + da3.dot(&lp.w3);
        let (dn, dg2) = rmsnorm_backward(c.x_mid.view(), lp.gamma2.view(), k, eps, dxn2.view());
        gl.gamma2 += &dg2;
        dx += &dn;

        // Attention
        gl.w_o += &dx.t().dot(&c.o_in);
        let do_in = dx.dot(&lp.w_o);
        let mut dqkv = Array2::zeros((t_len, 3 * d));
        for hh in 0..nh {
            let cols = hh * hd..(hh + 1) * hd;
            let p = &c.probs[hh];
            let doh = do_in.slice(s![.., cols.clone()]);
            let vh = c.v.slice(s![.., cols.clone()]);
            let dp = doh.dot(&vh.t());
            let dv = p.t().dot(&doh);
            let mut ds = dp;
            for i in 0..t_len {
                let rowdot: f64 = (0..=i).map(|j| p[[i, j]] * ds[[i, j]]).sum();
                for j in 0..t_len {
                    ds[[i, j]] = if j <= i { p[[i, j]] * (ds[[i, j]] - rowdot) } else { 0.0 };
                }
            }
            let mut dq = ds.dot(&c.k.slice(s![.., cols.clone()])) * scale;
            let mut dk = ds.t().dot(&c.q.slice(s![.., cols.clone()])) * scale;
            rope.apply(dq.view_mut(), true);
            rope.apply(dk.view_mut(), true);
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
        }
        gl.w_qkv += &dqkv.t().dot(&c.xn1);
        let dxn1 = dqkv.dot(&lp.w_qkv);
        let (dn, dg1) = rmsnorm_backward(c.x_in.view(), lp.gamma1.view(), k, eps, dxn1.view());
        gl.gamma1 += &dg1;
        dx += &dn;

        if sink.active() && (l == 0 || sink.every_block) {
            let reg = c.x_in.slice(s![.., d - sink.channels..]);
            let (loss, g) = sink_loss_and_grad(reg, sink.lambda, sink.tau, sink_denom)?;
            sink_total += loss;
            dx.slice_mut(s![.., d - sink.channels..]).zip_mut_with(&g, |a, b| *a += b);
        }
    }
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = grads.embed.row_mut(tok as usize);
        row += &dx.row(t);
    }
    Ok((ce_sum, sink_total))
}

/// Mean cross-entropy plus hinge over a batch of sequences, and the
/// gradient with respect to every parameter.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    params: &Params,
    batch: &[Vec<u32>],
    sink: &SinkSettings,
) -> Result<(BatchLoss, Params)> {
    if sink.channels >= cfg.d_model {
        return Err(LabError::config("sink channel count must be below d_model"));
    }
    let ce_denom: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    let sink_denom: usize = batch.iter().map(Vec::len).sum();
    let max_len = batch.iter().map(Vec::len).max().unwrap_or(0);
    if max_len > cfg.seq_len_max {
        return Err(LabError::usage("sequence longer than seq_len_max"));
    }
    let rope = RopeTable::new(max_len, cfg.head_dim, cfg.rope_base);
    let mut grads = params.zeros_like();
    let mut ce = 0.0;
    let mut sink_loss = 0.0;
    for seq in batch {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(LabError::usage(format!("token id {bad} >= vocab size")));
        }
        let (c, s) = sequence_grad(cfg, params, &rope, seq, sink, ce_denom, sink_denom, &mut grads)?;
        ce += c;
        sink_loss += s;
    }
    Ok((
        BatchLoss {
            ce: if ce_denom == 0 { 0.0 } else { ce / ce_denom as f64 },
            sink: sink_loss,
        },
        grads,
    ))
}

/// Loss only, evaluated through the same hinge definition (used by finite
/// differences). The CE part runs through the inference forward pass.
pub fn batch_loss(cfg: &ModelConfig, params: &Params, batch: &[Vec<u32>], sink: &SinkSettings) -> Result<BatchLoss> {
    use crate::model::{PreparedModel, SiteObserver};

    struct Residuals(Vec<Array2<f64>>);
    impl SiteObserver for Residuals {
        fn observe(&mut self, _site: crate::model::SiteId, _rows: ArrayView2<f64>) {}
        fn observe_residual(&mut self, _layer: usize, rows: ArrayView2<f64>) {
            self.0.push(rows.to_owned());
        }
    }

    let model = PreparedModel::from_params(cfg.clone(), params.clone(), None)?;
    let ce_denom: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    let sink_denom: usize = batch.iter().map(Vec::len).sum();
    let mut ce = 0.0;
    let mut sink_total = 0.0;
    for seq in batch {
        let mut res = Residuals(Vec::new());
        let (c, _) = model.sequence_nll(seq, 0, &mut res)?;
        ce += c;
        if sink.channels > 0 {
            let d = cfg.d_model;
            for (l, r) in res.0.iter().enumerate().take(cfg.n_layers) {
                if l == 0 || sink.every_block {
                    let reg = r.slice(s![.., d - sink.channels..]);
                    sink_total += sink_loss_and_grad(reg, sink.lambda, sink.tau, sink_denom)?.0;
                }
            }
        }
    }
    Ok(BatchLoss {
        ce: if ce_denom == 0 { 0.0 } else { ce / ce_denom as f64 },
        sink: sink_total,
    })
}
