use crate::model::{ParamKind, Params};

/// AdamW with decoupled weight decay on matrices (norm gains are not
/// decayed): `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Params,
    v: Params,
}

impl AdamW {
    pub fn new(params: &Params, betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let p_slices = params.slices_mut();
        let g_slices = grads.slices();
        let m_slices = self.m.slices_mut();
        let v_slices = self.v.slices_mut();
        for ((((kind, p), (_, g)), (_, m)), (_, v)) in p_slices.into_iter().zip(g_slices).zip(m_slices).zip(v_slices) {
            let decay = if kind == ParamKind::Matrix { 1.0 - lr * wd } else { 1.0 };
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = p[i] * decay - lr * update;
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &Params) -> f64 {
    grads
        .slices()
        .iter()
        .flat_map(|(_, s)| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, s) in grads.slices_mut() {
            s.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_gradient_is_pure_decoupled_decay() {
        let cfg = ModelConfig::tiny(2);
        let mut p = Params::init(&cfg, 1);
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(&p, (0.9, 0.95), 0.1);
        let lr = 1e-3;
        opt.step(&mut p, &g, lr);
        for (a, b) in p.embed.iter().zip(before.embed.iter()) {
            assert_eq!(*a, b * (1.0 - lr * 0.1));
        }
        assert_eq!(p.gamma_final, before.gamma_final);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let cfg = ModelConfig::tiny(0);
        let mut g = Params::init(&cfg, 3);
        let n = clip_grad_norm(&mut g, 0.5);
        assert!(n > 0.5);
        assert!((grad_norm(&g) - 0.5).abs() < 1e-12);
    }
}
