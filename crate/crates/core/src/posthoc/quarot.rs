//! Rotation-based outlier removal: independent per-linear input rotations,
//! and the full residual change of basis with online rotations.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::rotation::{block_diag, orthogonality_error, RotationKind, RotationSpec};
use super::FoldedModel;
use crate::error::{LabError, Result};
use crate::model::{Checkpoint, FoldRecord, Linear, Params, SiteId};
use crate::quant::{SiteTransform, Transform};
use crate::seeds::derive_seed;

pub const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationPlanKind {
    PerLinear,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRotation {
    pub site: SiteId,
    pub rotation: RotationSpec,
}

/// `diag(R_sem, R_reg)`; `reg` is absent for a plain-norm model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRotation {
    pub sem: RotationSpec,
    pub reg: Option<RotationSpec>,
}

impl ResidualRotation {
    pub fn matrix(&self) -> Result<Array2<f64>> {
        let mut blocks = vec![checked(&self.sem)?];
        if let Some(r) = &self.reg {
            blocks.push(checked(r)?);
        }
        Ok(block_diag(&blocks))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationPlan {
    pub kind: RotationPlanKind,
    #[serde(with = "crate::seeds::seed_serde")]
    pub seed: u64,
    /// Online input rotations; installing the plan folds `Qᵀ` into the
    /// site weight.
    pub site_rotations: Vec<SiteRotation>,
    /// Offline residual basis change (full plans only).
    pub residual: Option<ResidualRotation>,
}

fn checked(spec: &RotationSpec) -> Result<Array2<f64>> {
    let q = spec.materialize()?;
    let err = orthogonality_error(&q);
    if !(err < ORTHO_TOL) {
        return Err(LabError::Internal(format!(
            "rotation {:?} of size {} deviates from orthogonality by {err:e}",
            spec.kind,
            spec.dim()
        )));
    }
    Ok(q)
}

impl RotationPlan {
    /// Folds every site rotation into its weight (`W -> W Qᵀ`) and returns
    /// the matching online transforms.
    pub fn install(&self, ckpt: &Checkpoint) -> Result<FoldedModel> {
        let cfg = &ckpt.config;
        let mut params = ckpt.to_params()?;
        let mut transforms = Vec::new();
        for sr in &self.site_rotations {
            if sr.site.layer >= cfg.n_layers {
                return Err(LabError::config(format!("rotation attached to unknown site {}", sr.site)));
            }
            let q = checked(&sr.rotation)?;
            let w = params.layers[sr.site.layer].weight_mut(sr.site.linear);
            if w.ncols() != q.nrows() {
                return Err(LabError::config(format!(
                    "rotation of size {} does not fit {} (input width {})",
                    q.nrows(),
                    sr.site,
                    w.ncols()
                )));
            }
            *w = w.dot(&q.t());
            transforms.push(SiteTransform {
                site: sr.site,
                transform: Transform::Rotation { rotation: sr.rotation },
            });
        }
        let mut out = ckpt.with_params(&params);
        out.folds.push(FoldRecord {
            method: "online_rotations".into(),
            detail: serde_json::to_value(self).expect("plan serializes"),
        });
        Ok(FoldedModel {
            checkpoint: out,
            transforms,
            warnings: Vec::new(),
        })
    }
}

/// Independent rotation for every linear input: randomized Hadamard where
/// the width is a power of two, random orthogonal otherwise. Matrices depend
/// only on `(seed, site)`, so one seed gives identical rotations across
/// checkpoints of the same shape.
pub fn quarot_per_linear(ckpt: &Checkpoint, seed: u64) -> Result<RotationPlan> {
    let cfg = &ckpt.config;
    let site_rotations = SiteId::all(cfg.n_layers)
        .into_iter()
        .map(|site| {
            let n = site.linear.in_dim(cfg.d_model, cfg.d_inner);
            let s = derive_seed(seed, "quarot_site", &[site.layer as u64, site.linear.index() as u64]);
            SiteRotation {
                site,
                rotation: RotationSpec::dense(RotationKind::preferred_for(n), n, s),
            }
        })
        .collect();
    Ok(RotationPlan {
        kind: RotationPlanKind::PerLinear,
        seed,
        site_rotations,
        residual: None,
    })
}

fn scale_columns(w: &mut Array2<f64>, g: &Array1<f64>) {
    for mut row in w.axis_iter_mut(Axis(0)) {
        row.zip_mut_with(g, |v, &gj| *v *= gj);
    }
}

/// Moves every norm gain into the linears that read the normed stream and
/// sets the gains to one. The head is untied in the process.
pub fn fuse_gains(params: &mut Params) {
    if params.head.is_none() {
        params.head = Some(params.embed.clone());
    }
    for lp in &mut params.layers {
        scale_columns(&mut lp.w_qkv, &lp.gamma1);
        scale_columns(&mut lp.w1, &lp.gamma2);
        scale_columns(&mut lp.w3, &lp.gamma2);
        lp.gamma1.fill(1.0);
        lp.gamma2.fill(1.0);
    }
    let head = params.head.as_mut().expect("untied above");
    scale_columns(head, &params.gamma_final);
    params.gamma_final.fill(1.0);
}

/// Changes the residual basis to `x -> R x`. Needs unit gains (see
/// [`fuse_gains`]) and an untied head.
pub fn rotate_residual(params: &mut Params, r: &Array2<f64>) -> Result<()> {
    let unit = |g: &Array1<f64>| g.iter().all(|&v| v == 1.0);
    if params.head.is_none()
        || !unit(&params.gamma_final)
        || params.layers.iter().any(|lp| !unit(&lp.gamma1) || !unit(&lp.gamma2))
    {
        return Err(LabError::usage("residual rotation needs fused gains and an untied head"));
    }
    let rt = r.t();
    params.embed = params.embed.dot(&rt);
    for lp in &mut params.layers {
        lp.w_qkv = lp.w_qkv.dot(&rt);
        lp.w1 = lp.w1.dot(&rt);
        lp.w3 = lp.w3.dot(&rt);
        lp.w_o = r.dot(&lp.w_o);
        lp.w2 = r.dot(&lp.w2);
    }
    let head = params.head.as_mut().expect("checked above");
    *head = head.dot(&rt);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct QuarotFull {
    /// Checkpoint with the offline change of basis applied (FP-equivalent
    /// to the input on its own).
    pub checkpoint: Checkpoint,
    /// Residual rotation used, plus the online per-head value Hadamard on
    /// the o_proj input and the online rotation on the w2 input.
    pub plan: RotationPlan,
}

impl QuarotFull {
    /// Offline basis change plus the online rotations folded and attached.
    pub fn install(&self) -> Result<FoldedModel> {
        self.plan.install(&self.checkpoint)
    }
}

pub fn quarot_full(ckpt: &Checkpoint, seed: u64) -> Result<QuarotFull> {
    let cfg = &ckpt.config;
    let (ds, k) = (cfg.d_sem(), cfg.k_registers);
    let residual = ResidualRotation {
        sem: RotationSpec::dense(RotationKind::preferred_for(ds), ds, derive_seed(seed, "quarot_residual", &[0])),
        reg: (k > 0).then(|| {
            RotationSpec::dense(RotationKind::preferred_for(k), k, derive_seed(seed, "quarot_residual", &[1]))
        }),
    };
    let r = residual.matrix()?;
    if k > 0 && r.slice(s![..ds, ds..]).iter().chain(r.slice(s![ds.., ..ds]).iter()).any(|&v| v != 0.0) {
        return Err(LabError::Internal("residual rotation mixes the two partitions".into()));
    }
    let mut params = ckpt.to_params()?;
    fuse_gains(&mut params);
    rotate_residual(&mut params, &r)?;

    let value_hadamard = RotationSpec {
        kind: RotationKind::Hadamard,
        block: cfg.head_dim,
        blocks: cfg.n_heads,
        seed: 0,
    };
    let mut site_rotations = Vec::new();
    for l in 0..cfg.n_layers {
        site_rotations.push(SiteRotation {
            site: SiteId::new(l, Linear::OProj),
            rotation: value_hadamard,
        });
        site_rotations.push(SiteRotation {
            site: SiteId::new(l, Linear::W2),
            rotation: RotationSpec::dense(
                RotationKind::preferred_for(cfg.d_inner),
                cfg.d_inner,
                derive_seed(seed, "quarot_w2", &[l as u64]),
            ),
        });
    }
    let plan = RotationPlan {
        kind: RotationPlanKind::Full,
        seed,
        site_rotations,
        residual: Some(residual),
    };
    let mut out = ckpt.with_params(&params);
    out.folds.push(FoldRecord {
        method: "quarot_full_offline".into(),
        detail: json!({
            "gamma_fused": true,
            "residual": serde_json::to_value(&plan.residual).expect("serializes"),
        }),
    });
    Ok(QuarotFull { checkpoint: out, plan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PreparedModel};
    use crate::quant::QuantPlan;

    fn split() -> Vec<Vec<u32>> {
        (0..3).map(|s| (0..12).map(|i| ((i * 13 + s * 7) % 32) as u32).collect()).collect()
    }

    fn gained(cfg: &ModelConfig) -> Checkpoint {
        // Non-trivial gains so that fusion is exercised.
        let mut p = Params::init(cfg, 8);
        for (i, lp) in p.layers.iter_mut().enumerate() {
            lp.gamma1.iter_mut().enumerate().for_each(|(j, g)| *g = 0.5 + 0.1 * ((i + j) % 7) as f64);
            lp.gamma2.iter_mut().enumerate().for_each(|(j, g)| *g = 1.5 - 0.1 * ((i * 3 + j) % 5) as f64);
        }
        p.gamma_final.iter_mut().enumerate().for_each(|(j, g)| *g = 0.8 + 0.05 * (j % 4) as f64);
        Checkpoint::from_params(cfg, &p, "test")
    }

    #[test]
    fn per_linear_is_fp_invariant_and_seed_stable() {
        for k in [0, 2] {
            let ckpt = gained(&ModelConfig::tiny(k));
            let base = PreparedModel::fp(&ckpt).unwrap().nll(&split()).unwrap();
            let plan = quarot_per_linear(&ckpt, 42).unwrap();
            assert_eq!(plan, quarot_per_linear(&gained(&ModelConfig::tiny(k)), 42).unwrap());
            let nll = plan.install(&ckpt).unwrap().nll(&QuantPlan::full_precision(), &split()).unwrap();
            assert!((nll - base).abs() < 1e-4);
        }
    }

    #[test]
    fn full_offline_and_online_are_fp_invariant() {
        for k in [0, 2] {
            let ckpt = gained(&ModelConfig::tiny(k));
            let base = PreparedModel::fp(&ckpt).unwrap().nll(&split()).unwrap();
            let full = quarot_full(&ckpt, 7).unwrap();
            assert!(full.checkpoint.untied_head);
            let offline = PreparedModel::fp(&full.checkpoint).unwrap().nll(&split()).unwrap();
            assert!((offline - base).abs() < 1e-4, "{offline} vs {base}");
            let online = full.install().unwrap().nll(&QuantPlan::full_precision(), &split()).unwrap();
            assert!((online - base).abs() < 1e-4);
        }
    }

    #[test]
    fn residual_blocks_do_not_mix() {
        let cfg = ModelConfig::tiny(2);
        let full = quarot_full(&Checkpoint::random_init(&cfg, 1).unwrap(), 3).unwrap();
        let r = full.plan.residual.as_ref().unwrap().matrix().unwrap();
        let ds = cfg.d_sem();
        assert!(r.slice(s![..ds, ds..]).iter().all(|&v| v == 0.0));
        assert!(r.slice(s![ds.., ..ds]).iter().all(|&v| v == 0.0));
        assert!(orthogonality_error(&r) < ORTHO_TOL);
    }
}
