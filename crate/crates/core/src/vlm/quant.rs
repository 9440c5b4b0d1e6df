//! Blockwise 4-bit NormalFloat quantization of frozen weights.

use serde::{Deserialize, Serialize};

/// Quantiles of a standard normal rescaled to `[-1, 1]`, with an exact zero.
pub const NF4_CODES: [f32; 16] = [
    -1.0,
    -0.696_192_8,
    -0.525_073_05,
    -0.394_917_5,
    -0.284_441_38,
    -0.184_773_43,
    -0.091_050_036,
    0.0,
    0.079_580_3,
    0.160_930_2,
    0.246_112_3,
    0.337_915_24,
    0.440_709_83,
    0.562_617,
    0.722_956_84,
    1.0,
];

pub const NF4_BLOCK: usize = 64;

/// Packed 4-bit codes (two per byte, low nibble first) with one absmax
/// scale per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nf4Tensor {
    pub len: usize,
    pub packed: Vec<u8>,
    pub scales: Vec<f32>,
}

fn nearest_code(v: f32) -> u8 {
    // Midpoints between adjacent codes partition [-1, 1].
    let mut idx = 0u8;
    for i in 0..15 {
        if v > 0.5 * (NF4_CODES[i] + NF4_CODES[i + 1]) {
            idx = i as u8 + 1;
        }
    }
    idx
}

impl Nf4Tensor {
    pub fn quantize(values: &[f32]) -> Self {
        let mut packed = vec![0u8; values.len().div_ceil(2)];
        let mut scales = Vec::with_capacity(values.len().div_ceil(NF4_BLOCK));
        for (b, block) in values.chunks(NF4_BLOCK).enumerate() {
            let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            scales.push(absmax);
            let inv = if absmax > 0.0 { 1.0 / absmax } else { 0.0 };
            for (j, v) in block.iter().enumerate() {
                let i = b * NF4_BLOCK + j;
                let code = nearest_code(v * inv);
                packed[i / 2] |= code << ((i % 2) * 4);
            }
        }
        Self { len: values.len(), packed, scales }
    }

    pub fn code(&self, i: usize) -> u8 {
        (self.packed[i / 2] >> ((i % 2) * 4)) & 0x0f
    }

    pub fn dequantize(&self) -> Vec<f32> {
        (0..self.len).map(|i| NF4_CODES[self.code(i) as usize] * self.scales[i / NF4_BLOCK]).collect()
    }

    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * self.scales.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn codes_are_sorted_and_symmetric_at_ends() {
        assert!(NF4_CODES.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(NF4_CODES[7], 0.0);
        assert_eq!((NF4_CODES[0], NF4_CODES[15]), (-1.0, 1.0));
    }

    #[test]
    fn zeros_and_extremes_are_exact() {
        let mut v = vec![0.0f32; 130];
        v[3] = 2.5;
        v[70] = -0.75;
        let q = Nf4Tensor::quantize(&v);
        let d = q.dequantize();
        assert_eq!(d[3], 2.5);
        assert_eq!(d[70], -0.75);
        assert_eq!(d[0], 0.0);
        assert_eq!(q.scales.len(), 3);
        assert_eq!(q.storage_bytes(), 65 + 12);
    }

    proptest! {
        #[test]
        fn matches_brute_force_nearest_code(values in prop::collection::vec(-10.0f32..10.0, 1..300)) {
            let q = Nf4Tensor::quantize(&values);
            let d = q.dequantize();
            for (i, v) in values.iter().enumerate() {
                let s = q.scales[i / NF4_BLOCK];
                let best = NF4_CODES
                    .iter()
                    .map(|c| (c * s - v).abs())
                    .fold(f32::INFINITY, f32::min);
                prop_assert!(((d[i] - v).abs() - best).abs() <= 1e-5 * s.max(1.0));
            }
        }
    }
}
