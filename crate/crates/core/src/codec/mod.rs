//! Storage codecs: uniform latent quantization, canonical Huffman
//! entropy coding, prefix-truncated index masks, and the lossless byte
//! backend behind all packed sections.

pub mod bits;
pub mod huffman;
pub mod indices;
pub mod lossless;

pub use huffman::{encoded_bit_len, huffman_decode, huffman_encode, HuffmanTable};
pub use indices::{
    decode_indices, encode_indices, indices_from_mask, mask_from_indices, pack_masks,
    unpack_masks, IndexBitmask,
};
pub use lossless::{lossless_pack, lossless_unpack, Backend};

use crate::{Error, Real, Result};

/// Largest |value/bin| the quantizer accepts; beyond this the rounded
/// value may not fit a signed 64-bit integer.
const QUANT_LIMIT: f64 = 9.22e18;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedStream {
    pub bin: f64,
    pub symbols: Vec<i64>,
    pub count: usize,
}

/// Mid-tread quantization: symbol = round(v/bin), ties away from zero.
pub fn quantize<T: Real>(values: &[T], bin: f64) -> Result<QuantizedStream> {
    if !(bin > 0.0) {
        return Err(Error::Config(format!("quantizer bin {bin} must be positive")));
    }
    let mut symbols = Vec::with_capacity(values.len());
    for v in values {
        let scaled = v.to_f64().unwrap() / bin;
        if !scaled.is_finite() || scaled.abs() > QUANT_LIMIT {
            return Err(Error::QuantizerOverflow(scaled));
        }
        symbols.push(scaled.round() as i64);
    }
    Ok(QuantizedStream {
        bin,
        symbols,
        count: values.len(),
    })
}

/// Central value of each bin: v = symbol * bin.
pub fn dequantize(qs: &QuantizedStream) -> Vec<f64> {
    qs.symbols.iter().map(|&s| s as f64 * qs.bin).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_symbol_zero() {
        let qs = quantize(&[0.0f64], 0.1).unwrap();
        assert_eq!(qs.symbols, vec![0]);
        assert_eq!(dequantize(&qs), vec![0.0]);
    }

    #[test]
    fn spec_arithmetic_example() {
        let qs = quantize(&[0.026f64], 0.01).unwrap();
        assert_eq!(qs.symbols, vec![3]);
        let back = dequantize(&qs)[0];
        assert!((back - 0.03).abs() < 1e-15);
        assert!((back - 0.026).abs() <= 0.005 + 1e-15);
    }

    #[test]
    fn ties_round_away_from_zero() {
        // Exact binary fractions so the quotients are exact halves.
        let qs = quantize(&[0.25f64, -0.25, 0.75, -0.75], 0.5).unwrap();
        assert_eq!(qs.symbols, vec![1, -1, 2, -2]);
    }

    #[test]
    fn non_positive_bin_is_rejected() {
        assert!(quantize(&[1.0f64], 0.0).is_err());
        assert!(quantize(&[1.0f64], -0.5).is_err());
    }

    #[test]
    fn huge_values_overflow() {
        let err = quantize(&[1e30f64], 1e-6).unwrap_err();
        assert!(matches!(err, Error::QuantizerOverflow(_)));
        assert!(quantize(&[f64::NAN], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn error_stays_within_half_bin(
            values in proptest::collection::vec(-1e6f64..1e6, 1..200),
            bin in 1e-6f64..10.0,
        ) {
            let qs = quantize(&values, bin).unwrap();
            let back = dequantize(&qs);
            for (v, b) in values.iter().zip(&back) {
                prop_assert!((v - b).abs() <= bin / 2.0 + bin * 1e-12);
            }
        }
    }
}
