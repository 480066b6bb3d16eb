//! Round-to-nearest fake quantizers (quantize then dequantize).
//!
//! Dequantized values are formed as `absmax * (code / qmax)`, which keeps the
//! group maximum exact and makes both quantizers idempotent on their own
//! outputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One scale per output row.
    PerChannel,
    /// One scale per `g` consecutive input columns; the last group holds the
    /// remainder.
    Group(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightQuantSpec {
    pub bits: u8,
    pub grouping: Grouping,
}

impl WeightQuantSpec {
    pub fn int4_g128() -> Self {
        WeightQuantSpec {
            bits: 4,
            grouping: Grouping::Group(128),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.grouping == Grouping::Group(0) {
            return Err(LabError::config("weight group size must be at least 1"));
        }
        Ok(())
    }

    /// Largest code magnitude of the symmetric grid, `2^(bits-1) - 1`.
    pub fn qmax(&self) -> f64 {
        ((1i32 << (self.bits - 1)) - 1) as f64
    }
}

/// Per-token dynamic symmetric activation quantizer with codes clipped to
/// `[-2^(bits-1), 2^(bits-1) - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActQuantSpec {
    pub bits: u8,
}

impl ActQuantSpec {
    pub fn int4() -> Self {
        ActQuantSpec { bits: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)
    }

    pub fn clip_hi(&self) -> f64 {
        ((1i32 << (self.bits - 1)) - 1) as f64
    }

    pub fn clip_lo(&self) -> f64 {
        -((1i32 << (self.bits - 1)) as f64)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        4 | 8 => Ok(()),
        other => Err(LabError::config(format!("unsupported bit width {other}; use 4 or 8"))),
    }
}

fn absmax(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Quantizes one group in place with scale `max|w| / qmax`.
pub fn quantize_group(values: &mut [f64], qmax: f64) {
    let m = absmax(values);
    if m == 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let s = m / qmax;
    for v in values.iter_mut() {
        let code = (*v / s).round().clamp(-qmax, qmax);
        *v = m * (code / qmax);
    }
}

/// Integer codes and scale of one group (for inspection and tests).
pub fn group_codes(values: &[f64], qmax: f64) -> (f64, Vec<i32>) {
    let m = absmax(values);
    if m == 0.0 {
        return (0.0, vec![0; values.len()]);
    }
    let s = m / qmax;
    let codes = values
        .iter()
        .map(|v| (v / s).round().clamp(-qmax, qmax) as i32)
        .collect();
    (s, codes)
}

/// RTN fake quantization of a `[out, in]` weight matrix, grouped along the
/// input axis.
pub fn quantize_weight_rtn(w: &Array2<f64>, spec: &WeightQuantSpec) -> Array2<f64> {
    let qmax = spec.qmax();
    let cols = w.ncols();
    let group = match spec.grouping {
        Grouping::PerChannel => cols.max(1),
        Grouping::Group(g) => g.max(1),
    };
    let mut out = w.as_standard_layout().into_owned();
    for mut row in out.outer_iter_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        for chunk in row.chunks_mut(group) {
            quantize_group(chunk, qmax);
        }
    }
    out
}

/// Per-token dynamic quantization of one activation row.
pub fn quantize_act_per_token(a: &[f64], spec: &ActQuantSpec) -> Vec<f64> {
    let mut out = a.to_vec();
    quantize_act_in_place(&mut out, spec);
    out
}

pub fn quantize_act_in_place(a: &mut [f64], spec: &ActQuantSpec) {
    let hi = spec.clip_hi();
    let lo = spec.clip_lo();
    let m = absmax(a);
    if m == 0.0 {
        a.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let s = m / hi;
    for v in a.iter_mut() {
        let code = (*v / s).clamp(lo, hi).round();
        *v = m * (code / hi);
    }
}

/// Applies [`quantize_act_per_token`] to every row.
pub fn quantize_act_rows(rows: &mut Array2<f64>, spec: &ActQuantSpec) {
    for mut row in rows.outer_iter_mut() {
        quantize_act_in_place(row.as_slice_mut().expect("standard layout"), spec);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn weight_group_hand_example() {
        let (s, codes) = group_codes(&[0.5, -1.0, 0.25, 0.1], 7.0);
        assert!((s - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(codes, vec![4, -7, 2, 1]);
        let w = array![[0.5, -1.0, 0.25, 0.1]];
        let q = quantize_weight_rtn(&w, &WeightQuantSpec::int4_g128());
        close(q.as_slice().unwrap(), &[0.5714, -1.0, 0.2857, 0.1429], 1e-4);
        close(q.as_slice().unwrap(), &[4.0 / 7.0, -1.0, 2.0 / 7.0, 1.0 / 7.0], 1e-15);
    }

    #[test]
    fn zero_group_stays_zero() {
        let w = Array2::zeros((2, 5));
        let q = quantize_weight_rtn(&w, &WeightQuantSpec::int4_g128());
        assert!(q.iter().all(|&v| v == 0.0));
        let a = quantize_act_per_token(&[0.0; 4], &ActQuantSpec::int4());
        assert_eq!(a, vec![0.0; 4]);
    }

    #[test]
    fn groups_split_input_axis_with_remainder() {
        let w = array![[1.0, 0.1, 0.2, 100.0, 3.0]];
        let spec = WeightQuantSpec {
            bits: 4,
            grouping: Grouping::Group(3),
        };
        let q = quantize_weight_rtn(&w, &spec);
        // First group keeps its own scale, second holds [100, 3].
        assert_eq!(q[[0, 0]], 1.0);
        assert_eq!(q[[0, 3]], 100.0);
        let per_channel = quantize_weight_rtn(
            &w,
            &WeightQuantSpec {
                bits: 4,
                grouping: Grouping::PerChannel,
            },
        );
        assert_eq!(per_channel[[0, 0]], 0.0);
    }

    #[test]
    fn act_hand_examples() {
        let q = quantize_act_per_token(&[1.4, -0.7, 7.0, 0.0], &ActQuantSpec::int4());
        close(&q, &[1.0, -1.0, 7.0, 0.0], 1e-15);
        let q = quantize_act_per_token(&[-8.0, 7.0, 3.6], &ActQuantSpec::int4());
        close(&q, &[-8.0, 48.0 / 7.0, 24.0 / 7.0], 1e-14);
        close(&q, &[-8.0, 6.8571, 3.4286], 1e-4);
    }

    #[test]
    fn rejects_odd_bit_widths() {
        assert!(ActQuantSpec { bits: 3 }.validate().is_err());
        assert!(WeightQuantSpec { bits: 2, grouping: Grouping::PerChannel }.validate().is_err());
        assert!(WeightQuantSpec { bits: 8, grouping: Grouping::Group(0) }.validate().is_err());
    }

    proptest! {
        #[test]
        fn weight_rtn_idempotent_and_bounded(
            vals in prop::collection::vec(-50.0f64..50.0, 1..40),
            g in 1usize..16,
            bits in prop::sample::select(vec![4u8, 8]),
        ) {
            let n = vals.len();
            let w = Array2::from_shape_vec((1, n), vals.clone()).unwrap();
            let spec = WeightQuantSpec { bits, grouping: Grouping::Group(g) };
            let q = quantize_weight_rtn(&w, &spec);
            prop_assert_eq!(&quantize_weight_rtn(&q, &spec), &q);
            for (chunk, qchunk) in vals.chunks(g).zip(q.as_slice().unwrap().chunks(g)) {
                let s = absmax(chunk) / spec.qmax();
                for (a, b) in chunk.iter().zip(qchunk) {
                    prop_assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn act_quant_idempotent_and_equivariant(
            vals in prop::collection::vec(-20.0f64..20.0, 1..64),
            exp in -6i32..6,
        ) {
            let spec = ActQuantSpec::int4();
            let q = quantize_act_per_token(&vals, &spec);
            prop_assert_eq!(quantize_act_per_token(&q, &spec), q.clone());
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let qs = quantize_act_per_token(&scaled, &spec);
            let expect: Vec<f64> = q.iter().map(|v| v * c).collect();
            prop_assert_eq!(qs, expect);
        }
    }
}
