//! Frequency-aware transformation: a learnable gate over the 1-D spectrum of
//! each flattened kernel row.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier;
use crate::graph::{sigmoid64, symmetrize};
use crate::tensor::Tensor;

fn rows(w: &Tensor) -> Result<(usize, usize)> {
    let s = w.shape();
    if s.len() < 2 || s[0] == 0 {
        return Err(Error::shape("fat kernel", &[0, 0, 0, 0], s));
    }
    Ok((s[0], w.numel() / s[0]))
}

/// Gates the spectrum of every row of `w` (viewed as `[c_out, rest]`) by
/// `gains`, returning the complex inverse transform.
///
/// Gains are averaged with their mirror bin first, which keeps the result
/// real for real input; the imaginary parts returned here are rounding
/// residue only.
pub fn spectral_gain_complex(w: &Tensor, gains: &[f64]) -> Result<Vec<Complex64>> {
    let (_, n) = rows(w)?;
    if gains.len() != n {
        return Err(Error::shape("fat mask length", &[n], &[gains.len()]));
    }
    let sym = symmetrize(gains);
    let mut z = fourier::real_to_complex(w.data());
    fourier::fft_rows(&mut z, n, false);
    for row in z.chunks_mut(n) {
        row.iter_mut().zip(&sym).for_each(|(c, g)| *c *= *g);
    }
    fourier::fft_rows(&mut z, n, true);
    Ok(z)
}

/// Real part of [`spectral_gain_complex`], reshaped like `w`.
pub fn apply_spectral_gain(w: &Tensor, gains: &[f64]) -> Result<Tensor> {
    let z = spectral_gain_complex(w, gains)?;
    Tensor::new(w.shape().to_vec(), z.iter().map(|c| c.re as f32).collect())
}

pub fn mask_values(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|&l| sigmoid64(l as f64)).collect()
}

/// `w` with its flattened rows gated by `sigmoid(logits)` in the frequency
/// domain. `logits` has one entry per `c_in * H * W` position.
pub fn fat_transform(w: &Tensor, logits: &Tensor) -> Result<Tensor> {
    apply_spectral_gain(w, &mask_values(logits))
}
