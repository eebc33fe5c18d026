//! Thin wrappers over `rustfft` for 1-D and 2-D complex transforms in `f64`.
//!
//! Transforms are unnormalized in the forward direction; `inverse` divides by
//! the transform length so that `inverse(forward(x)) == x`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place transform of every contiguous `len`-sized row of `data`.
pub fn fft_rows(data: &mut [Complex64], len: usize, inverse: bool) {
    if len == 0 || data.is_empty() {
        return;
    }
    plan(len, inverse).process(data);
    if inverse {
        let s = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// In-place 2-D transform of a row-major `h x w` plane.
pub fn fft2(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(plane.len(), h * w);
    fft_rows(plane, w, inverse);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    let fft = plan(h, inverse);
    let s = if inverse { 1.0 / h as f64 } else { 1.0 };
    for j in 0..w {
        for i in 0..h {
            col[i] = plane[i * w + j];
        }
        fft.process(&mut col);
        for i in 0..h {
            plane[i * w + j] = col[i] * s;
        }
    }
}

pub fn real_to_complex(x: &[f32]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect()
}

/// Position of frequency index `k` after centering (zero frequency at `n / 2`).
pub fn shifted_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// Absolute signed frequency of unshifted bin `k` in a length-`n` transform.
pub fn abs_frequency(k: usize, n: usize) -> usize {
    k.min(n - k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_2d() {
        let (h, w) = (6, 5);
        let x: Vec<f32> = (0..h * w).map(|i| (i as f32 * 0.7).sin()).collect();
        let mut c = real_to_complex(&x);
        fft2(&mut c, h, w, false);
        fft2(&mut c, h, w, true);
        for (a, b) in c.iter().zip(&x) {
            assert!((a.re - *b as f64).abs() < 1e-12);
            assert!(a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn shift_places_dc_at_center() {
        assert_eq!(shifted_index(0, 8), 4);
        assert_eq!(shifted_index(0, 5), 2);
        assert_eq!(shifted_index(7, 8), 3);
    }

    #[test]
    fn abs_frequency_is_symmetric() {
        assert_eq!(abs_frequency(0, 8), 0);
        assert_eq!(abs_frequency(1, 8), 1);
        assert_eq!(abs_frequency(7, 8), 1);
        assert_eq!(abs_frequency(4, 8), 4);
    }
}
