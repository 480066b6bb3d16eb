//! Full-precision parameter set used by the forward pass and the trainer.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::site::Linear;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Pre-attention norm gains, semantic channels first, registers last.
    pub gamma1: Array1<f64>,
    /// Fused `[Q; K; V]` projection, shape `[3d, d]`.
    pub w_qkv: Array2<f64>,
    pub w_o: Array2<f64>,
    pub gamma2: Array1<f64>,
    pub w1: Array2<f64>,
    pub w3: Array2<f64>,
    pub w2: Array2<f64>,
}

impl LayerParams {
    pub fn weight(&self, linear: Linear) -> &Array2<f64> {
        match linear {
            Linear::Qkv => &self.w_qkv,
            Linear::OProj => &self.w_o,
            Linear::W1 => &self.w1,
            Linear::W3 => &self.w3,
            Linear::W2 => &self.w2,
        }
    }

    pub fn weight_mut(&mut self, linear: Linear) -> &mut Array2<f64> {
        match linear {
            Linear::Qkv => &mut self.w_qkv,
            Linear::OProj => &mut self.w_o,
            Linear::W1 => &mut self.w1,
            Linear::W3 => &mut self.w3,
            Linear::W2 => &mut self.w2,
        }
    }
}

/// Whether a parameter tensor is a weight matrix or a norm gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Gain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Token embedding `[vocab, d]`.
    pub embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub gamma_final: Array1<f64>,
    /// Separate output head `[vocab, d]`; `None` means tied to `embed`.
    pub head: Option<Array2<f64>>,
}

impl Params {
    /// Seeded Gaussian initialisation; residual-writing projections are scaled
    /// down by `sqrt(2 * n_layers)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let writer_std = std / ((2 * config.n_layers) as f64).sqrt();
        let mut matrix = |rows: usize, cols: usize, s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };
        let d = config.d_model;
        let di = config.d_inner;
        let embed = matrix(config.vocab_size, d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                gamma1: Array1::ones(d),
                w_qkv: matrix(3 * d, d, std),
                w_o: matrix(d, d, writer_std),
                gamma2: Array1::ones(d),
                w1: matrix(di, d, std),
                w3: matrix(di, d, std),
                w2: matrix(d, di, writer_std),
            })
            .collect();
        Params {
            embed,
            layers,
            gamma_final: Array1::ones(d),
            head: None,
        }
    }

    /// Same shapes, all zeros (gradient and optimizer-moment buffers).
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Params {
            embed: z2(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    gamma1: z1(&l.gamma1),
                    w_qkv: z2(&l.w_qkv),
                    w_o: z2(&l.w_o),
                    gamma2: z1(&l.gamma2),
                    w1: z2(&l.w1),
                    w3: z2(&l.w3),
                    w2: z2(&l.w2),
                })
                .collect(),
            gamma_final: z1(&self.gamma_final),
            head: self.head.as_ref().map(z2),
        }
    }

    /// Output head matrix, falling back to the embedding when tied.
    pub fn head_matrix(&self) -> &Array2<f64> {
        self.head.as_ref().unwrap_or(&self.embed)
    }

    /// Flat views of every tensor in a fixed order.
    pub fn slices(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out: Vec<(ParamKind, &[f64])> = Vec::new();
        out.push((ParamKind::Matrix, self.embed.as_slice().expect("standard layout")));
        for l in &self.layers {
            out.push((ParamKind::Gain, l.gamma1.as_slice().expect("standard layout")));
            for w in [&l.w_qkv, &l.w_o] {
                out.push((ParamKind::Matrix, w.as_slice().expect("standard layout")));
            }
            out.push((ParamKind::Gain, l.gamma2.as_slice().expect("standard layout")));
            for w in [&l.w1, &l.w3, &l.w2] {
                out.push((ParamKind::Matrix, w.as_slice().expect("standard layout")));
            }
        }
        out.push((ParamKind::Gain, self.gamma_final.as_slice().expect("standard layout")));
        if let Some(h) = &self.head {
            out.push((ParamKind::Matrix, h.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::new();
        out.push((ParamKind::Matrix, self.embed.as_slice_mut().expect("standard layout")));
        for l in &mut self.layers {
            out.push((ParamKind::Gain, l.gamma1.as_slice_mut().expect("standard layout")));
            out.push((ParamKind::Matrix, l.w_qkv.as_slice_mut().expect("standard layout")));
            out.push((ParamKind::Matrix, l.w_o.as_slice_mut().expect("standard layout")));
            out.push((ParamKind::Gain, l.gamma2.as_slice_mut().expect("standard layout")));
            out.push((ParamKind::Matrix, l.w1.as_slice_mut().expect("standard layout")));
            out.push((ParamKind::Matrix, l.w3.as_slice_mut().expect("standard layout")));
            out.push((ParamKind::Matrix, l.w2.as_slice_mut().expect("standard layout")));
        }
        out.push((ParamKind::Gain, self.gamma_final.as_slice_mut().expect("standard layout")));
        if let Some(h) = &mut self.head {
            out.push((ParamKind::Matrix, h.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Round every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for (_, s) in self.slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_independent_of_registers() {
        let a = Params::init(&ModelConfig::tiny(0), 7);
        let b = Params::init(&ModelConfig::tiny(4), 7);
        let c = Params::init(&ModelConfig::tiny(0), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), ModelConfig::tiny(0).n_params());
    }
}
