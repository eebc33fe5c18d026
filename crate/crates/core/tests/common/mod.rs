//! Helpers and property suites shared by the integration tests and the
//! acceptance runner. Every suite returns a one-line detail on success and
//! the first violation on failure.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use freqlens::attacks::{self, AttackKind, AttackSpec};
use freqlens::cka::{self, ActivationMatrix};
use freqlens::data::{self, ImageBatch};
use freqlens::nn::checkpoint::{self, CheckpointInfo};
use freqlens::nn::{build_resnet, fat, quant, LayerDesc, Network, ResNetConfig};
use freqlens::optim::{grad_check, param_grads};
use freqlens::spectral::{self, SignalMatrix};
use freqlens::train::augment::{self, AugKind, PatchBox};
use freqlens::train::{self, TrainConfig};
use freqlens::Tensor;

pub type Suite = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform images in `[0, 1]`, with some pixels pinned to exactly 0 or 1 so
/// box constraints get exercised.
pub fn rand_batch(seed: u64, b: usize, c: usize, h: usize, w: usize, classes: usize) -> ImageBatch {
    let mut r = rng(seed);
    let data = (0..b * c * h * w)
        .map(|_| match r.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random::<f32>(),
        })
        .collect();
    let labels = (0..b).map(|_| r.random_range(0..classes)).collect();
    ImageBatch::new(Tensor::new(vec![b, c, h, w], data).unwrap(), labels).unwrap()
}

pub fn micro_resnet(seed: u64, classes: usize, channels: usize, bits: u32, fat: bool) -> Network {
    build_resnet(
        &ResNetConfig {
            depth_blocks: 1,
            width: 1,
            num_classes: classes,
            input_channels: channels,
            quant_bits: bits,
            fat,
        },
        seed,
    )
    .unwrap()
}

/// Flatten followed by one affine layer: softmax regression.
pub fn linear_model(seed: u64, c: usize, h: usize, w: usize, classes: usize) -> Network {
    Network::from_layers(
        vec![
            LayerDesc::Flatten,
            LayerDesc::Linear {
                name: "fc".into(),
                input: c * h * w,
                output: classes,
                bias: true,
                bits: 32,
            },
        ],
        c,
        classes,
        seed,
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// O(N^2) 2-D DFT straight from the definition.
pub fn naive_dft2(x: &[f64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    naive_dft2_complex(
        &x.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>(),
        h,
        w,
        inverse,
    )
}

pub fn naive_dft2_complex(x: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let phase = sign * 2.0 * PI * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                    acc += x[m * w + n] * Complex64::from_polar(1.0, phase);
                }
            }
            out[k * w + l] = if inverse { acc / (h * w) as f64 } else { acc };
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------- autodiff

/// Central differences against backprop on 20 seeded micro-ResNets, plus the
/// closed-form gradient of softmax regression.
pub fn autodiff_suite() -> Suite {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let classes = 2 + (seed as usize % 3);
        let channels = 1 + (seed as usize % 3);
        let net = micro_resnet(seed, classes, channels, 32, seed % 2 == 1);
        let batch = rand_batch(100 + seed, 4, channels, 8, 8, classes);
        let gc = grad_check(&net, &batch, 1e-4).map_err(|e| e.to_string())?;
        if gc.samples == 0 {
            return Err(format!("seed {seed}: no coordinate could be checked"));
        }
        if gc.max_rel_error >= 1e-3 {
            return Err(format!("seed {seed}: relative error {:.2e}", gc.max_rel_error));
        }
        worst = worst.max(gc.max_rel_error);
        checked += gc.samples;
    }
    let lin = linear_softmax_error(7)?;
    if lin >= 1e-4 {
        return Err(format!("linear-softmax relative error {lin:.2e}"));
    }
    Ok(format!(
        "20 micro-nets, {checked} coordinates, worst {worst:.1e}; linear-softmax {lin:.1e}"
    ))
}

/// Worst relative error between backprop and the hand-derived gradient
/// `dW = (p - y) x^T / B`, `db = mean(p - y)`, plus central differences.
pub fn linear_softmax_error(seed: u64) -> Result<f64, String> {
    let (c, h, w, k, b) = (2, 3, 3, 4, 6);
    let net = linear_model(seed, c, h, w, k);
    let batch = rand_batch(seed + 1, b, c, h, w, k);
    let grads = param_grads(&net, &batch).map_err(|e| e.to_string())?;
    let wt = net.param("fc.weight").unwrap().tensor.data();
    let bias = net.param("fc.bias").unwrap().tensor.data();
    let d = c * h * w;
    let mut gw = vec![0.0f64; k * d];
    let mut gb = vec![0.0f64; k];
    for i in 0..b {
        let x = batch.image(i);
        let z: Vec<f64> = (0..k)
            .map(|o| bias[o] as f64 + (0..d).map(|j| wt[o * d + j] as f64 * x[j] as f64).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for o in 0..k {
            let p = (z[o] - m).exp() / s - if batch.labels[i] == o { 1.0 } else { 0.0 };
            gb[o] += p / b as f64;
            for j in 0..d {
                gw[o * d + j] += p * x[j] as f64 / b as f64;
            }
        }
    }
    let order: Vec<usize> = net
        .params
        .iter()
        .map(|p| if p.name == "fc.weight" { 0 } else { 1 })
        .collect();
    let mut worst = 0.0f64;
    for (pi, which) in order.iter().enumerate() {
        let oracle = if *which == 0 { &gw } else { &gb };
        for (a, o) in grads[pi].iter().zip(oracle) {
            if o.abs() > 1e-4 {
                worst = worst.max(rel(*a as f64, *o));
            }
        }
    }
    let gc = grad_check(&net, &batch, 1e-3).map_err(|e| e.to_string())?;
    Ok(worst.max(gc.max_rel_error))
}

// ---------------------------------------------------------------- spectral

pub fn spectral_suite() -> Suite {
    let mut r = rng(11);
    // LFI/HFI split.
    for trial in 0..20 {
        let (n, d) = (r.random_range(1..9), r.random_range(1..12));
        let x = SignalMatrix::new(n, d, (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let (l, hf) = (spectral::lfi(&x), spectral::hfi(&x));
        for i in 0..n * d {
            if (l.data[i] + hf.data[i] - x.data[i]).abs() > 1e-12 {
                return Err(format!("trial {trial}: LFI + HFI != x"));
            }
        }
        let ll = spectral::lfi(&l);
        let hh = spectral::hfi(&hf);
        let idem = ll.data.iter().zip(&l.data).chain(hh.data.iter().zip(&hf.data));
        if idem.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) > 1e-6 {
            return Err(format!("trial {trial}: projector not idempotent"));
        }
        let dot: f64 = l.data.iter().zip(&hf.data).map(|(a, b)| a * b).sum();
        if dot.abs() > 1e-6 * x.frobenius().powi(2).max(1.0) {
            return Err(format!("trial {trial}: LFI and HFI not orthogonal ({dot:e})"));
        }
    }
    // DFT against the definition, round trip and Parseval, including
    // non-power-of-two sides.
    for &(h, w) in &[(4, 4), (6, 10), (7, 5), (8, 3), (1, 9)] {
        let x: Vec<f32> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let fast = spectral::dft2(&x, h, w);
        let slow = naive_dft2(&x64, h, w, false);
        let scale = slow.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-12);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale;
        if err > 1e-4 {
            return Err(format!("{h}x{w}: DFT differs from the naive oracle by {err:.1e}"));
        }
        let back = spectral::idft2(&fast, h, w);
        let rt = back
            .iter()
            .zip(&x64)
            .map(|(z, v)| (z.re - v).abs() + z.im.abs())
            .fold(0.0, f64::max);
        if rt > 1e-4 * x64.iter().map(|v| v.abs()).fold(1e-12, f64::max) {
            return Err(format!("{h}x{w}: round trip error {rt:.1e}"));
        }
        let e_x: f64 = x64.iter().map(|v| v * v).sum();
        let e_f: f64 = fast.iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
        if rel(e_x, e_f) > 1e-4 {
            return Err(format!("{h}x{w}: Parseval mismatch {e_x} vs {e_f}"));
        }
    }
    // Low-pass identity at full degree, and idempotence. The projection is
    // checked on extreme images (exact 0s and 1s ring past the box); the
    // clamped filter on mid-range images whose first pass needs no clamp.
    for &size in &[8usize, 7, 12] {
        let b = rand_batch(size as u64, 3, 2, size, size, 2);
        let full = spectral::low_pass_filter(&b, size).map_err(|e| e.to_string())?;
        let id = max_abs_diff(full.images.data(), b.images.data());
        if id > 1e-5 {
            return Err(format!("size {size}: LPF(d = size) moved pixels by {id:.1e}"));
        }
        let mid_px = b.images.data().iter().map(|v| 0.3 + 0.4 * v).collect();
        let mid = ImageBatch::new(
            Tensor::new(b.images.shape().to_vec(), mid_px).unwrap(),
            b.labels.clone(),
        )
        .unwrap();
        let plane = size * size;
        for d in 1..=size {
            for p in b.images.data().chunks(plane) {
                let once = spectral::low_pass_plane(p, size, size, d);
                let twice = spectral::low_pass_plane(&once, size, size, d);
                let e = once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if e > 1e-9 {
                    return Err(format!("size {size}, degree {d}: projection not idempotent ({e:.1e})"));
                }
            }
            let once = spectral::low_pass_filter(&mid, d).map_err(|e| e.to_string())?;
            let twice = spectral::low_pass_filter(&once, d).map_err(|e| e.to_string())?;
            let e = max_abs_diff(once.images.data(), twice.images.data());
            if e > 1e-5 {
                return Err(format!("size {size}, degree {d}: LPF not idempotent ({e:.1e})"));
            }
        }
    }
    Ok("LFI/HFI split, naive DFT, round trip, Parseval, LPF identity and idempotence".into())
}

// ---------------------------------------------------------------- attacks

/// A random attack spec with a random budget.
pub fn random_spec<R: Rng>(r: &mut R) -> AttackSpec {
    let kind = [
        AttackKind::Gn,
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::Bim,
        AttackKind::Tpgd,
        AttackKind::Cw,
    ][r.random_range(0..6)];
    let epsilon = match r.random_range(0..4) {
        0 => 0.0,
        1 => 1.0,
        _ => r.random_range(0.0..0.3f32),
    };
    let alpha = if kind == AttackKind::Fgsm {
        epsilon
    } else {
        r.random_range(0.0..=1.0f32) * epsilon
    };
    AttackSpec {
        kind,
        epsilon,
        alpha,
        steps: if kind == AttackKind::Fgsm {
            1
        } else {
            r.random_range(0..5)
        },
        random_start: r.random(),
        sigma: r.random_range(0.0..0.5),
        kappa: r.random_range(0.0..60.0),
    }
}

/// Box and budget contracts on 1,000 random draws, and the exact
/// equivalences between attack variants.
pub fn attack_suite() -> Suite {
    let nets: Vec<Network> = (0..4)
        .map(|s| {
            micro_resnet(
                s,
                2 + s as usize % 2,
                1 + s as usize % 3,
                [32, 32, 4, 32][s as usize],
                s == 3,
            )
        })
        .collect();
    let mut r = rng(3);
    for draw in 0..1000u64 {
        let net = &nets[r.random_range(0..nets.len())];
        let size = [4, 6, 8][r.random_range(0..3)];
        let b = r.random_range(1..4);
        let batch = rand_batch(draw, b, net.input_channels, size, size, net.num_classes);
        let spec = random_spec(&mut r);
        let adv = attacks::attack(net, &batch, &spec, draw).map_err(|e| format!("draw {draw}: {e}"))?;
        let x = adv.adv.images.data();
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("draw {draw} ({}): value {v} outside [0, 1]", spec.label()));
        }
        // Gaussian noise has no l-inf budget; only the range applies.
        if spec.kind != AttackKind::Gn && adv.linf() > spec.epsilon + 1e-6 {
            return Err(format!(
                "draw {draw} ({}): |delta| = {} > eps = {}",
                spec.label(),
                adv.linf(),
                spec.epsilon
            ));
        }
    }
    for seed in 0..20u64 {
        let net = &nets[seed as usize % nets.len()];
        let batch = rand_batch(500 + seed, 3, net.input_channels, 8, 8, net.num_classes);
        let eps = [8.0 / 255.0, 0.05, 0.3][seed as usize % 3];
        let f = attacks::attack(net, &batch, &AttackSpec::fgsm(eps), seed).map_err(|e| e.to_string())?;
        let p1 = AttackSpec {
            steps: 1,
            alpha: eps,
            random_start: false,
            ..AttackSpec::pgd(1).with_budget(eps, eps)
        };
        let p = attacks::attack(net, &batch, &p1, seed).map_err(|e| e.to_string())?;
        if f.adv.images.data() != p.adv.images.data() {
            return Err(format!("seed {seed}: PGD(1, alpha = eps) differs from FGSM"));
        }
        let bim = attacks::attack(net, &batch, &AttackSpec::bim(5), seed).map_err(|e| e.to_string())?;
        let pgd_ns = AttackSpec {
            random_start: false,
            ..AttackSpec::pgd(5)
        };
        let p = attacks::attack(net, &batch, &pgd_ns, seed).map_err(|e| e.to_string())?;
        if bim.adv.images.data() != p.adv.images.data() {
            return Err(format!("seed {seed}: BIM differs from PGD without random start"));
        }
    }
    Ok("1000 random draws inside the box and the budget; PGD(1)=FGSM and BIM=PGD bitwise".into())
}

// ---------------------------------------------------------------- CKA

pub fn rand_matrix<R: Rng>(r: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Random orthogonal `n x n` matrix by Gram-Schmidt.
pub fn rand_orthogonal<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = vec![];
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q.concat()
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

/// `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))` with linear kernels and an
/// explicit centering matrix.
pub fn hsic_cka(x: &[f64], y: &[f64], n: usize, p: usize, q: usize) -> f64 {
    let gram = |a: &[f64], d: usize| {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = (0..d).map(|t| a[i * d + t] * a[j * d + t]).sum();
            }
        }
        g
    };
    let h: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 } - 1.0 / n as f64)
        .collect();
    let (k, l) = (gram(x, p), gram(y, q));
    let hsic = |a: &[f64], b: &[f64]| {
        let ah = matmul(&matmul(&h, a, n, n, n), &h, n, n, n);
        let bh = matmul(&matmul(&h, b, n, n, n), &h, n, n, n);
        // tr(A H B H) = <HAH, B> because H is symmetric and idempotent.
        ah.iter().zip(&bh).map(|(u, v)| u * v).sum::<f64>() / ((n - 1) * (n - 1)) as f64
    };
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

pub fn cka_suite() -> Suite {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for pair in 0..50 {
        let n = r.random_range(4..20);
        let (p, q) = (r.random_range(1..12), r.random_range(1..12));
        let xd = rand_matrix(&mut r, n, p);
        let yd = rand_matrix(&mut r, n, q);
        let x = ActivationMatrix::new("x", n, p, xd.clone()).unwrap();
        let y = ActivationMatrix::new("y", n, q, yd.clone()).unwrap();
        let c = |a: &ActivationMatrix, b: &ActivationMatrix| cka::linear_cka(a, b).map_err(|e| e.to_string());
        let base = c(&x, &y)?;
        let qm = rand_orthogonal(&mut r, q);
        let yo = ActivationMatrix::new("yq", n, q, matmul(&yd, &qm, n, q, q)).unwrap();
        let s = r.random_range(0.1..10.0);
        let ys = ActivationMatrix::new("ys", n, q, yd.iter().map(|v| v * s).collect()).unwrap();
        let checks = [
            ("self-similarity", c(&x, &x)?, 1.0),
            ("symmetry", c(&y, &x)?, base),
            ("orthogonal invariance", c(&x, &yo)?, base),
            ("scale invariance", c(&x, &ys)?, base),
            ("HSIC oracle", base, hsic_cka(&xd, &yd, n, p, q)),
            (
                "feature path",
                cka::cka_features(&x, &y).map_err(|e| e.to_string())?,
                base,
            ),
            ("gram path", cka::cka_gram(&x, &y).map_err(|e| e.to_string())?, base),
        ];
        for (what, got, want) in checks {
            let e = (got - want).abs();
            worst = worst.max(e);
            if e >= 1e-6 {
                return Err(format!("pair {pair} ({n}x{p} vs {n}x{q}): {what} off by {e:.1e}"));
            }
        }
    }
    Ok(format!("50 random pairs, worst deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- augmentation

/// The boxed region of image `i` replaced by zeros, computed pixel by pixel.
pub fn reference_cutout(batch: &ImageBatch, boxes: &[PatchBox]) -> Vec<f32> {
    let (b, c, h, w) = batch.dims();
    let mut out = batch.images.data().to_vec();
    for i in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if boxes[i].contains(y, x) {
                        out[((i * c + ch) * h + y) * w + x] = 0.0;
                    }
                }
            }
        }
    }
    out
}

pub fn augmentation_suite() -> Suite {
    let mut r = rng(5);
    for trial in 0..30u64 {
        let (b, c, s, k) = (
            r.random_range(2..7),
            r.random_range(1..4),
            r.random_range(3..9),
            r.random_range(2..5),
        );
        let batch = rand_batch(trial, b, c, s, s, k);
        let partner = augment::pairing(b, &mut r);
        let x = batch.images.data();
        let px = batch.select(&partner);
        let one = augment::mixup_with(&batch, &partner, &vec![1.0; b]).map_err(|e| e.to_string())?;
        let zero = augment::mixup_with(&batch, &partner, &vec![0.0; b]).map_err(|e| e.to_string())?;
        if one.batch.images.data() != x || zero.batch.images.data() != px.images.data() {
            return Err(format!("trial {trial}: mixup endpoints are not the inputs"));
        }
        let empty = vec![PatchBox::EMPTY; b];
        let full = vec![
            PatchBox {
                h0: 0,
                w0: 0,
                dh: s,
                dw: s
            };
            b
        ];
        let keep = augment::cutmix_with(&batch, &partner, &empty).map_err(|e| e.to_string())?;
        let swap = augment::cutmix_with(&batch, &partner, &full).map_err(|e| e.to_string())?;
        if keep.batch.images.data() != x || keep.lambda.iter().any(|&l| l != 1.0) {
            return Err(format!("trial {trial}: cutmix with an empty box changed the batch"));
        }
        if swap.batch.images.data() != px.images.data() || swap.lambda.iter().any(|&l| l != 0.0) {
            return Err(format!("trial {trial}: cutmix with a full box is not the partner"));
        }
        let boxes: Vec<PatchBox> = (0..b).map(|_| PatchBox::sample(r.random(), s, s, &mut r)).collect();
        let cut = augment::cutout_with(&batch, &boxes).map_err(|e| e.to_string())?;
        if cut.batch.images.data() != reference_cutout(&batch, &boxes).as_slice() {
            return Err(format!("trial {trial}: cutout differs from the reference mask"));
        }
        for kind in [AugKind::Mixup, AugKind::Cutout, AugKind::Cutmix] {
            let m = augment::apply(kind, &batch, (1.0, 1.0), &mut r).map_err(|e| e.to_string())?;
            if let Some(v) = m.batch.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(format!("trial {trial}: {kind:?} produced {v}"));
            }
            let soft = m.soft_labels(k);
            for (i, row) in soft.chunks(k).enumerate() {
                let sum: f32 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                    return Err(format!("trial {trial}: {kind:?} soft label {i} sums to {sum}"));
                }
            }
        }
    }
    // Adversarial-stage augmentation sees attack outputs; those stay in the
    // box too.
    let net = micro_resnet(0, 2, 3, 32, false);
    let batch = rand_batch(77, 6, 3, 8, 8, 2);
    let adv = attacks::attack(&net, &batch, &AttackSpec::pgd(3), 1).map_err(|e| e.to_string())?;
    for kind in [AugKind::Mixup, AugKind::Cutout, AugKind::Cutmix] {
        let m = augment::apply(kind, &adv.adv, (1.0, 1.0), &mut r).map_err(|e| e.to_string())?;
        if m.batch.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("A-{kind:?} left [0, 1]"));
        }
    }
    Ok("mixup/cutmix endpoints, cutout reference mask, soft labels, A-mode range".into())
}

// ---------------------------------------------------------------- quantization and FAT

pub fn quant_fat_suite() -> Suite {
    let mut r = rng(6);
    for trial in 0..50 {
        let n = r.random_range(1..200);
        let scale = 10f32.powi(r.random_range(-3..3));
        let w: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0f32) * scale).collect();
        for bits in [2u32, 4, 8] {
            let q = quant::fake_quantize(&w, bits).map_err(|e| e.to_string())?;
            let qq = quant::fake_quantize(&q, bits).map_err(|e| e.to_string())?;
            if q != qq {
                return Err(format!("trial {trial}: {bits}-bit quantization not idempotent"));
            }
            let mut distinct: Vec<u32> = q.iter().map(|v| v.to_bits()).collect();
            // -0.0 and 0.0 are the same level.
            distinct.iter_mut().for_each(|b| {
                if f32::from_bits(*b) == 0.0 {
                    *b = 0
                }
            });
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() > (1usize << bits) - 1 {
                return Err(format!("trial {trial}: {} levels at {bits} bits", distinct.len()));
            }
        }
    }
    for trial in 0..20 {
        let (co, ci, k) = (r.random_range(1..5), r.random_range(1..4), [1, 3][r.random_range(0..2)]);
        let len = ci * k * k;
        let w = Tensor::new(
            vec![co, ci, k, k],
            (0..co * len).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let open = fat::fat_transform(&w, &Tensor::full(&[len], 40.0)).map_err(|e| e.to_string())?;
        let e = max_abs_diff(open.data(), w.data());
        if e > 1e-6 {
            return Err(format!("trial {trial}: all-pass FAT mask moved weights by {e:.1e}"));
        }
        let shut = fat::fat_transform(&w, &Tensor::full(&[len], -40.0)).map_err(|e| e.to_string())?;
        if shut.max_abs() > 1e-6 {
            return Err(format!("trial {trial}: all-stop FAT mask left {}", shut.max_abs()));
        }
        // DC-only gain against a naive DFT of each flattened row.
        let mut gains = vec![0.0; len];
        gains[0] = 1.0;
        let dc = fat::apply_spectral_gain(&w, &gains).map_err(|e| e.to_string())?;
        for (o, row) in w.data().chunks(len).enumerate() {
            let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let mut f = naive_dft2(&x, 1, len, false);
            f.iter_mut().zip(&gains).for_each(|(z, g)| *z *= *g);
            let back = naive_dft2_complex(&f, 1, len, true);
            for (j, z) in back.iter().enumerate() {
                let got = dc.data()[o * len + j] as f64;
                if (got - z.re).abs() > 1e-5 {
                    return Err(format!("trial {trial}: DC-only FAT differs from the DFT oracle"));
                }
            }
        }
    }
    Ok("idempotent fake quantization within 2^n - 1 levels; FAT limits and DC-only oracle".into())
}

// ---------------------------------------------------------------- formats

pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 0.05,
        lr_decay: vec![(1, 0.5)],
        inner_attack: AttackSpec::pgd(2),
        augmentation: "A-mixup".parse().unwrap(),
        monitor_size: 8,
        final_eval_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

pub fn formats_suite() -> Suite {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // CIFAR-10: random records survive parse -> encode bitwise, and write ->
    // read reproduces the batch.
    let mut r = rng(7);
    let n = 17;
    let mut bytes = vec![0u8; n * data::CIFAR_RECORD];
    for (i, rec) in bytes.chunks_mut(data::CIFAR_RECORD).enumerate() {
        rec[0] = (i % data::CIFAR_CLASSES) as u8;
        rec[1..].iter_mut().for_each(|b| *b = r.random());
    }
    let path = dir.path().join("data_batch_1.bin");
    let parsed = data::parse_cifar10(&bytes, &path).map_err(|e| e.to_string())?;
    if data::encode_cifar10(&parsed).map_err(|e| e.to_string())? != bytes {
        return Err("CIFAR-10 re-encoding differs".into());
    }
    data::write_cifar10(&path, &parsed).map_err(|e| e.to_string())?;
    if data::read_cifar10(&path).map_err(|e| e.to_string())? != parsed {
        return Err("CIFAR-10 file round trip differs".into());
    }
    // Checkpoints, including quantized and FAT networks and trained BN state.
    let data = data::synth_dataset(1, 8, 2, 8).map_err(|e| e.to_string())?;
    let (trained, _) =
        train::train(micro_resnet(2, 2, 3, 4, true), &data, &tiny_train_config(2)).map_err(|e| e.to_string())?;
    for (i, net) in [micro_resnet(1, 3, 1, 32, false), trained].iter().enumerate() {
        let info = CheckpointInfo {
            seed: i as u64,
            epoch: 3,
            config_hash: "0123456789abcdef".into(),
        };
        let p = dir.path().join(format!("m{i}.fql"));
        checkpoint::save(&p, net, &info).map_err(|e| e.to_string())?;
        let (back, info2) = checkpoint::load(&p).map_err(|e| e.to_string())?;
        if &back != net || info2 != info {
            return Err(format!("checkpoint {i}: load differs from the saved network"));
        }
        let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
        if checkpoint::encode(&back, &info).map_err(|e| e.to_string())? != bytes {
            return Err(format!("checkpoint {i}: re-encoding differs"));
        }
    }
    // Replay: same config and seed give an identical report and network.
    let cfg = tiny_train_config(9);
    let run = || {
        let net = micro_resnet(cfg.seed, 2, 3, 32, false);
        train::train(net, &data, &cfg).map_err(|e| e.to_string())
    };
    let (n1, r1) = run()?;
    let (n2, r2) = run()?;
    if r1 != r2 || n1 != n2 {
        return Err("replaying the config produced a different run".into());
    }
    let csv = |r: &train::RunReport| r.metrics_table().to_csv().map_err(|e| e.to_string());
    if csv(&r1)? != csv(&r2)? {
        return Err("replayed report CSV differs".into());
    }
    Ok("CIFAR-10, checkpoint and run replay all bitwise".into())
}
