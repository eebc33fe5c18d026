//! Symmetric per-tensor uniform fake quantization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bit widths accepted for quantizable layers. 32 means full precision.
pub const SUPPORTED_BITS: [u32; 4] = [2, 4, 8, 32];

pub fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

/// Largest integer level for `bits`, i.e. `2^(bits-1) - 1`.
pub fn levels(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Rounds every value onto `{-L, ..., L} * max|w| / L`.
///
/// Values are reconstructed as `max|w| * (k / L)` rather than `k * delta` so
/// that the extreme levels hit `±max|w|` exactly; this makes the operation
/// idempotent bit for bit.
pub fn fake_quantize<T: Scalar>(w: &[T], bits: u32) -> Result<Vec<T>> {
    check_bits(bits)?;
    if bits == 32 {
        return Ok(w.to_vec());
    }
    let max = w.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if !max.is_finite() {
        return Err(Error::NonFinite("quantization input".into()));
    }
    if max == T::zero() {
        return Ok(vec![T::zero(); w.len()]);
    }
    let l = T::of(levels(bits) as f64);
    let delta = max / l;
    Ok(w.iter()
        .map(|&v| {
            let k = (v / delta).round().max(-l).min(l);
            max * (k / l)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_example() {
        let q = fake_quantize(&[0.1, -0.4, 0.35], 2).unwrap();
        assert_eq!(q, vec![0.0, -0.4, 0.4]);
    }

    #[test]
    fn full_precision_is_identity() {
        let w = [0.123, -7.5, 1e-9];
        assert_eq!(fake_quantize(&w, 32).unwrap(), w.to_vec());
    }

    #[test]
    fn zeros_pass_through() {
        assert_eq!(fake_quantize(&[0.0; 5], 4).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn rejects_odd_widths() {
        assert!(fake_quantize(&[1.0], 3).is_err());
        assert!(fake_quantize(&[1.0], 1).is_err());
    }
}
