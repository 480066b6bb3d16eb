//! Orthogonal matrices for rotation-based methods: Sylvester Hadamard,
//! randomized Hadamard and seeded Haar-random orthogonal matrices.

use ndarray::{s, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seeds::rng_for;

/// Normalised Sylvester Hadamard matrix of order `n` (a power of two).
pub fn hadamard(n: usize) -> Result<Array2<f64>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(LabError::usage(format!(
            "hadamard needs a power-of-two size, got {n}; use random_orthogonal instead"
        )));
    }
    let mut h = Array2::from_elem((1, 1), 1.0);
    while h.nrows() < n {
        let m = h.nrows();
        let mut next = Array2::zeros((2 * m, 2 * m));
        next.slice_mut(s![..m, ..m]).assign(&h);
        next.slice_mut(s![..m, m..]).assign(&h);
        next.slice_mut(s![m.., ..m]).assign(&h);
        next.slice_mut(s![m.., m..]).assign(&(-&h));
        h = next;
    }
    Ok(h / (n as f64).sqrt())
}

/// `H · diag(±1)` with seeded random signs.
pub fn randomized_hadamard(n: usize, seed: u64) -> Result<Array2<f64>> {
    let mut h = hadamard(n)?;
    let mut rng = rng_for(seed, "randomized_hadamard", &[n as u64]);
    for mut col in h.columns_mut() {
        if rand::Rng::random::<bool>(&mut rng) {
            col.mapv_inplace(|v: f64| -v);
        }
    }
    Ok(h)
}

/// Haar-distributed orthogonal matrix: Householder QR of a seeded Gaussian
/// matrix, with columns of Q sign-fixed so that diag(R) is positive.
pub fn random_orthogonal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "random_orthogonal", &[n as u64]);
    let g = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
    householder_q(g)
}

/// Q factor of `a = QR` with positive diagonal of R.
fn householder_q(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag_sign = vec![1.0; n];
    for k in 0..n {
        let x: Vec<f64> = (k..n).map(|i| a[[i, k]]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|t| *t /= vnorm);
            for j in k..n {
                let dot: f64 = (k..n).map(|i| v[i - k] * a[[i, j]]).sum();
                for i in k..n {
                    a[[i, j]] -= 2.0 * v[i - k] * dot;
                }
            }
        }
        diag_sign[k] = if a[[k, k]] < 0.0 { -1.0 } else { 1.0 };
        vs.push(v);
    }
    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the identity.
    let mut q = Array2::eye(n);
    for k in (0..n).rev() {
        let v = &vs[k];
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * q[[i, j]]).sum();
            if dot != 0.0 {
                for i in k..n {
                    q[[i, j]] -= 2.0 * v[i - k] * dot;
                }
            }
        }
    }
    for (j, mut col) in q.columns_mut().into_iter().enumerate() {
        if diag_sign[j] < 0.0 {
            col.mapv_inplace(|v: f64| -v);
        }
    }
    q
}

/// Max-abs deviation of `QᵀQ` from the identity.
pub fn orthogonality_error(q: &Array2<f64>) -> f64 {
    let qtq = q.t().dot(q);
    let mut worst = 0.0f64;
    for ((i, j), &v) in qtq.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    Hadamard,
    RandomizedHadamard,
    RandomOrthogonal,
}

impl RotationKind {
    /// Randomized Hadamard where the size allows it, random orthogonal
    /// otherwise.
    pub fn preferred_for(n: usize) -> RotationKind {
        if n.is_power_of_two() {
            RotationKind::RandomizedHadamard
        } else {
            RotationKind::RandomOrthogonal
        }
    }
}

/// Replayable description of a (block-diagonal) rotation: `blocks` copies of
/// one `block x block` orthogonal matrix on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub kind: RotationKind,
    pub block: usize,
    pub blocks: usize,
    #[serde(with = "crate::seeds::seed_serde")]
    pub seed: u64,
}

impl RotationSpec {
    pub fn dense(kind: RotationKind, n: usize, seed: u64) -> Self {
        RotationSpec {
            kind,
            block: n,
            blocks: 1,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.block * self.blocks
    }

    pub fn materialize(&self) -> Result<Array2<f64>> {
        if self.block == 0 || self.blocks == 0 {
            return Err(LabError::config("rotation size must be positive"));
        }
        let b = match self.kind {
            RotationKind::Hadamard => hadamard(self.block)?,
            RotationKind::RandomizedHadamard => randomized_hadamard(self.block, self.seed)?,
            RotationKind::RandomOrthogonal => random_orthogonal(self.block, self.seed),
        };
        Ok(block_diag(&vec![b; self.blocks]))
    }
}

pub fn block_diag(blocks: &[Array2<f64>]) -> Array2<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Array2::zeros((n, n));
    let mut at = 0;
    for b in blocks {
        let m = b.nrows();
        out.slice_mut(s![at..at + m, at..at + m]).assign(b);
        at += m;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sylvester_base_cases() {
        assert_eq!(hadamard(1).unwrap(), Array2::from_elem((1, 1), 1.0));
        let h2 = hadamard(2).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert_eq!(h2, ndarray::array![[r, r], [r, -r]]);
        assert!(orthogonality_error(&h2) < 1e-15);
        assert!(hadamard(12).is_err());
        assert!(matches!(hadamard(0), Err(LabError::Usage(_))));
    }

    #[test]
    fn random_rotations_are_orthogonal_and_seeded() {
        for n in [1, 3, 64, 120, 344] {
            let q = random_orthogonal(n, 5);
            assert!(orthogonality_error(&q) < 1e-6, "n={n}");
            assert!(orthogonality_error(&q) < 1e-12, "n={n}");
            assert_eq!(q, random_orthogonal(n, 5));
        }
        assert_ne!(random_orthogonal(8, 1), random_orthogonal(8, 2));
        let h = randomized_hadamard(64, 3).unwrap();
        assert!(orthogonality_error(&h) < 1e-12);
        assert_eq!(h, randomized_hadamard(64, 3).unwrap());
    }

    #[test]
    fn qr_reconstructs_input() {
        let a = Array2::from_shape_fn((6, 6), |(i, j)| ((i * 5 + j * 3) % 7) as f64 - 2.5 + (i == j) as u8 as f64);
        let q = householder_q(a.clone());
        let r = q.t().dot(&a);
        for i in 0..6 {
            assert!(r[[i, i]] > 0.0);
            for j in 0..i {
                assert!(r[[i, j]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_diagonal_spec() {
        let spec = RotationSpec {
            kind: RotationKind::RandomizedHadamard,
            block: 4,
            blocks: 3,
            seed: 1,
        };
        let m = spec.materialize().unwrap();
        assert_eq!(m.dim(), (12, 12));
        assert_eq!(m[[0, 5]], 0.0);
        assert!(orthogonality_error(&m) < 1e-12);
    }
}
