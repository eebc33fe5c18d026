//! Fourier-domain analyses of images, kernels and activations.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::fourier::{self, abs_frequency, shifted_index};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Raw,
    /// `log(1 + m)` followed by min-max scaling to `[0, 1]`.
    #[default]
    Log1pMinMax,
}

/// Center-shifted 2-D magnitude spectrum: the zero frequency sits at
/// `(height / 2, width / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl SpectrumMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    fn from_unshifted(mag: &[f64], h: usize, w: usize, norm: Normalization) -> Self {
        let mut values = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                values[shifted_index(i, h) * w + shifted_index(j, w)] = mag[i * w + j];
            }
        }
        if norm == Normalization::Log1pMinMax {
            log1p_minmax(&mut values);
        }
        SpectrumMap {
            height: h,
            width: w,
            values,
            normalization: norm,
        }
    }
}

fn log1p_minmax(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.ln_1p());
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Unnormalized 2-D DFT of a real `h x w` plane.
pub fn dft2(plane: &[f32], h: usize, w: usize) -> Vec<Complex64> {
    let mut c = fourier::real_to_complex(plane);
    fourier::fft2(&mut c, h, w, false);
    c
}

/// Inverse of [`dft2`] (includes the `1 / (h w)` factor).
pub fn idft2(spectrum: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut c = spectrum.to_vec();
    fourier::fft2(&mut c, h, w, true);
    c
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("image", &[0, 0, 0], t.shape())),
    }
}

/// Channel-averaged magnitude spectrum of one `C x H x W` image.
pub fn dft2_magnitude(image: &Tensor, norm: Normalization) -> Result<SpectrumMap> {
    let (c, h, w) = chw(image)?;
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("spectrum needs H, W >= 2, got {h}x{w}")));
    }
    let mut mag = vec![0.0f64; h * w];
    for plane in image.data().chunks(h * w) {
        for (m, z) in mag.iter_mut().zip(dft2(plane, h, w)) {
            *m += z.norm();
        }
    }
    mag.iter_mut().for_each(|m| *m /= c as f64);
    Ok(SpectrumMap::from_unshifted(&mag, h, w, norm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiffMode {
    /// `|DFT(adv - clean)|`.
    #[default]
    OfDifference,
    /// `| |DFT(adv)| - |DFT(clean)| |`.
    OfSpectra,
}

/// Mean over the batch and channels of the spectrum of the perturbation.
pub fn spectrum_diff(clean: &ImageBatch, adv: &ImageBatch, mode: DiffMode, norm: Normalization) -> Result<SpectrumMap> {
    if clean.images.shape() != adv.images.shape() {
        return Err(Error::shape("spectrum_diff", clean.images.shape(), adv.images.shape()));
    }
    let (b, c, h, w) = clean.dims();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    let plane = h * w;
    let (x0, x1) = (clean.images.data(), adv.images.data());
    let per_plane = par::map_indexed(b * c, |p| {
        let r = p * plane..(p + 1) * plane;
        match mode {
            DiffMode::OfDifference => {
                let d: Vec<f32> = x1[r.clone()].iter().zip(&x0[r]).map(|(a, b)| a - b).collect();
                dft2(&d, h, w).iter().map(|z| z.norm()).collect::<Vec<_>>()
            }
            DiffMode::OfSpectra => {
                let fa = dft2(&x1[r.clone()], h, w);
                let fc = dft2(&x0[r], h, w);
                fa.iter().zip(&fc).map(|(a, c)| (a.norm() - c.norm()).abs()).collect()
            }
        }
    });
    let mut mag = vec![0.0f64; plane];
    for m in &per_plane {
        mag.iter_mut().zip(m).for_each(|(a, v)| *a += v);
    }
    mag.iter_mut().for_each(|m| *m /= (b * c) as f64);
    Ok(SpectrumMap::from_unshifted(&mag, h, w, norm))
}

/// Mean over the batch and channels of each image plane's magnitude spectrum.
pub fn mean_spectrum(batch: &ImageBatch, norm: Normalization) -> Result<SpectrumMap> {
    let (b, c, h, w) = batch.dims();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    let plane = h * w;
    let x = batch.images.data();
    let per_plane = par::map_indexed(b * c, |p| {
        dft2(&x[p * plane..(p + 1) * plane], h, w)
            .iter()
            .map(|z| z.norm())
            .collect::<Vec<_>>()
    });
    let mut mag = vec![0.0f64; plane];
    for m in &per_plane {
        mag.iter_mut().zip(m).for_each(|(a, v)| *a += v);
    }
    mag.iter_mut().for_each(|m| *m /= (b * c) as f64);
    Ok(SpectrumMap::from_unshifted(&mag, h, w, norm))
}

pub(crate) fn check_degree(degree: usize, h: usize, w: usize) -> Result<()> {
    if degree == 0 || degree > h.min(w) {
        return Err(Error::invalid(format!(
            "low-pass degree {degree} outside 1..={}",
            h.min(w)
        )));
    }
    Ok(())
}

/// Whether unshifted bin `(i, j)` lies in the passband of degree `d`.
///
/// The passband is the centered block of the shifted spectrum, made
/// Hermitian-symmetric: a bin is kept when its absolute frequency is at most
/// `d / 2` on both axes. For odd `d` this is exactly the centered `d x d`
/// block; for even `d` it adds the mirror of the block's first row and
/// column, so the filter is a real orthogonal projection.
pub fn in_passband(i: usize, j: usize, h: usize, w: usize, degree: usize) -> bool {
    let r = degree / 2;
    abs_frequency(i, h) <= r && abs_frequency(j, w) <= r
}

/// Low-pass projection of one plane, before clamping. This part is an
/// exact projection; the clamp in [`low_pass_tensor`] is not, so the full
/// filter is idempotent only when its first pass stays inside `[0, 1]`.
pub fn low_pass_plane<T: Scalar>(plane: &[T], h: usize, w: usize, degree: usize) -> Vec<f64> {
    let mut z: Vec<Complex64> = plane.iter().map(|v| Complex64::new(v.as_f64(), 0.0)).collect();
    fourier::fft2(&mut z, h, w, false);
    for i in 0..h {
        for j in 0..w {
            if !in_passband(i, j, h, w, degree) {
                z[i * w + j] = Complex64::new(0.0, 0.0);
            }
        }
    }
    fourier::fft2(&mut z, h, w, true);
    z.iter().map(|c| c.re).collect()
}

/// Ideal low-pass filter on `[B, C, H, W]` (or `[C, H, W]`) data, clamped to
/// `[0, 1]`.
pub fn low_pass_tensor(x: &Tensor, degree: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("low_pass", &[0, 0], s));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    check_degree(degree, h, w)?;
    let mut out = vec![0.0f32; x.numel()];
    let src = x.data();
    let plane = h * w;
    par::for_each_chunk_mut(&mut out, plane, |i, o| {
        let p = low_pass_plane(&src[i * plane..(i + 1) * plane], h, w, degree);
        o.iter_mut().zip(p).for_each(|(d, v)| *d = (v as f32).clamp(0.0, 1.0));
    });
    Tensor::new(s.to_vec(), out)
}

pub fn low_pass_filter(x: &ImageBatch, degree: usize) -> Result<ImageBatch> {
    Ok(ImageBatch {
        images: low_pass_tensor(&x.images, degree)?,
        labels: x.labels.clone(),
    })
}

/// `n` signals of `d` channels, stored row-major as an `n x d` matrix. The
/// low/high-frequency split acts along the `n` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl SignalMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 || data.len() != n * d {
            return Err(Error::shape("signal matrix", &[n, d], &[data.len()]));
        }
        Ok(Self { n, d, data })
    }

    fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for row in self.data.chunks(self.d) {
            m.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= self.n as f64);
        m
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `(1/n) 1 1^T x`: every column replaced by its mean.
pub fn lfi(x: &SignalMatrix) -> SignalMatrix {
    let m = x.column_means();
    SignalMatrix {
        n: x.n,
        d: x.d,
        data: (0..x.n).flat_map(|_| m.iter().copied()).collect(),
    }
}

/// `x - lfi(x)`.
pub fn hfi(x: &SignalMatrix) -> SignalMatrix {
    let m = x.column_means();
    let data = x
        .data
        .chunks(x.d)
        .flat_map(|row| row.iter().zip(&m).map(|(v, mu)| v - mu))
        .collect();
    SignalMatrix { n: x.n, d: x.d, data }
}

/// `||LFI|| / ||HFI||` of one signal matrix, `+inf` when the high-frequency
/// part vanishes.
pub fn ratio(x: &SignalMatrix) -> f64 {
    let h = hfi(x).frobenius();
    if h == 0.0 {
        return f64::INFINITY;
    }
    lfi(x).frobenius() / h
}

/// Mean over the batch of the LFI/HFI ratio of each `C x (H W)` slice of a
/// `[B, C, H, W]` activation, with the channel axis as the signal axis.
pub fn lfi_hfi_ratio(activation: &Tensor) -> Result<f64> {
    let s = activation.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::shape("lfi_hfi_ratio", &[1, 0, 0, 0], s));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let x = activation.data();
    let per = par::map_indexed(b, |i| {
        let data = x[i * c * hw..(i + 1) * c * hw].iter().map(|&v| v as f64).collect();
        ratio(&SignalMatrix { n: c, d: hw, data })
    });
    Ok(per.iter().sum::<f64>() / b as f64)
}

/// Per-row 1-D magnitude spectra of a kernel reshaped to
/// `[c_out, c_in * H * W]`, without shifting.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpectrum {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl KernelSpectrum {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn kernel_spectrum(w: &Tensor) -> Result<KernelSpectrum> {
    let s = w.shape();
    if s.len() < 2 || s[0] == 0 {
        return Err(Error::shape("kernel_spectrum", &[0, 0, 0, 0], s));
    }
    let rows = s[0];
    let cols = w.numel() / rows;
    let mut z = fourier::real_to_complex(w.data());
    fourier::fft_rows(&mut z, cols, false);
    Ok(KernelSpectrum {
        rows,
        cols,
        values: z.iter().map(|c| c.norm()).collect(),
    })
}

/// Share of `sum |X_k|^2` held by the middle `len - 2 band` bins of an
/// unshifted magnitude row.
pub fn hf_energy_fraction(row: &[f64], band: usize) -> Result<f64> {
    if 2 * band >= row.len() {
        return Err(Error::invalid(format!(
            "band {band} leaves no middle bins in a row of {}",
            row.len()
        )));
    }
    let total: f64 = row.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mid: f64 = row[band..row.len() - band].iter().map(|v| v * v).sum();
    Ok(mid / total)
}

/// Mean high-frequency energy fraction over all rows, with `band = len / 4`.
pub fn mean_hf_energy(spec: &KernelSpectrum) -> Result<f64> {
    let band = spec.cols / 4;
    let mut acc = 0.0;
    for i in 0..spec.rows {
        acc += hf_energy_fraction(spec.row(i), band)?;
    }
    Ok(acc / spec.rows as f64)
}
