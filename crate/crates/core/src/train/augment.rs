//! Mixup, cutout and cutmix, plus the standard crop-and-flip pipeline.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugKind {
    Mixup,
    Cutout,
    Cutmix,
}

/// Where in an adversarial-training step the augmentation is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugStage {
    /// `A-`: on the adversarial examples, after the attack.
    Adversarial,
    /// `C-`: on the clean batch, before the attack.
    Clean,
}

/// `none`, or one of `A-mixup`, `C-mixup`, `A-cutout`, `C-cutout`,
/// `A-cutmix`, `C-cutmix`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Augmentation(pub Option<(AugStage, AugKind)>);

impl Augmentation {
    pub const NONE: Augmentation = Augmentation(None);

    pub fn new(stage: AugStage, kind: AugKind) -> Self {
        Self(Some((stage, kind)))
    }

    pub fn all() -> Vec<Augmentation> {
        let mut v = vec![Self::NONE];
        for kind in [AugKind::Mixup, AugKind::Cutout, AugKind::Cutmix] {
            for stage in [AugStage::Adversarial, AugStage::Clean] {
                v.push(Self::new(stage, kind));
            }
        }
        v
    }

    pub fn at(self, stage: AugStage) -> Option<AugKind> {
        self.0.filter(|(s, _)| *s == stage).map(|(_, k)| k)
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("none"),
            Some((stage, kind)) => {
                let s = match stage {
                    AugStage::Adversarial => "A",
                    AugStage::Clean => "C",
                };
                let k = match kind {
                    AugKind::Mixup => "mixup",
                    AugKind::Cutout => "cutout",
                    AugKind::Cutmix => "cutmix",
                };
                write!(f, "{s}-{k}")
            }
        }
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self::NONE);
        }
        let bad = || {
            Error::invalid(format!(
                "unknown augmentation `{s}` (expected none or A-/C- mixup, cutout, cutmix)"
            ))
        };
        let (stage, kind) = s.split_once('-').ok_or_else(bad)?;
        let stage = match stage {
            "A" | "a" => AugStage::Adversarial,
            "C" | "c" => AugStage::Clean,
            _ => return Err(bad()),
        };
        let kind = match kind.to_ascii_lowercase().as_str() {
            "mixup" => AugKind::Mixup,
            "cutout" => AugKind::Cutout,
            "cutmix" => AugKind::Cutmix,
            _ => return Err(bad()),
        };
        Ok(Self::new(stage, kind))
    }
}

impl TryFrom<String> for Augmentation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Augmentation> for String {
    fn from(a: Augmentation) -> String {
        a.to_string()
    }
}

/// Rectangle `[h0, h0 + dh) x [w0, w0 + dw)` inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchBox {
    pub h0: usize,
    pub w0: usize,
    pub dh: usize,
    pub dw: usize,
}

impl PatchBox {
    pub const EMPTY: PatchBox = PatchBox {
        h0: 0,
        w0: 0,
        dh: 0,
        dw: 0,
    };

    pub fn area(&self) -> usize {
        self.dh * self.dw
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.h0..self.h0 + self.dh).contains(&i) && (self.w0..self.w0 + self.dw).contains(&j)
    }

    /// Square-ish box covering about `fraction` of an `h x w` image, placed
    /// uniformly among the positions that keep it inside.
    pub fn sample<R: Rng + ?Sized>(fraction: f64, h: usize, w: usize, rng: &mut R) -> PatchBox {
        let f = fraction.clamp(0.0, 1.0).sqrt();
        let dh = ((f * h as f64).round() as usize).min(h);
        let dw = ((f * w as f64).round() as usize).min(w);
        if dh == 0 || dw == 0 {
            return PatchBox::EMPTY;
        }
        PatchBox {
            h0: rng.random_range(0..=h - dh),
            w0: rng.random_range(0..=w - dw),
            dh,
            dw,
        }
    }
}

/// An augmented batch with per-example label mixing. Example `i` carries
/// weight `lambda[i]` on `batch.labels[i]` and `1 - lambda[i]` on
/// `partner_labels[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub batch: ImageBatch,
    pub partner_labels: Vec<usize>,
    pub lambda: Vec<f32>,
    pub boxes: Option<Vec<PatchBox>>,
}

impl MixedBatch {
    pub fn unmixed(batch: ImageBatch) -> Self {
        let n = batch.len();
        Self {
            partner_labels: batch.labels.clone(),
            lambda: vec![1.0; n],
            batch,
            boxes: None,
        }
    }

    /// True when some example carries weight on a second label.
    pub fn is_mixed(&self) -> bool {
        self.lambda
            .iter()
            .zip(self.batch.labels.iter().zip(&self.partner_labels))
            .any(|(&l, (a, b))| l != 1.0 && a != b)
    }

    /// Row-major `B x num_classes` label distributions.
    pub fn soft_labels(&self, num_classes: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.batch.len() * num_classes];
        for (i, row) in out.chunks_mut(num_classes).enumerate() {
            let l = self.lambda[i];
            row[self.batch.labels[i]] += l;
            row[self.partner_labels[i]] += 1.0 - l;
        }
        out
    }
}

/// Partner of every example: shuffle the indices and pair consecutive
/// entries, so each example is in exactly one pair. With an odd count the
/// last shuffled example is paired with itself.
pub fn pairing<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut partner: Vec<usize> = (0..n).collect();
    for p in idx.chunks(2) {
        if let [a, b] = *p {
            partner[a] = b;
            partner[b] = a;
        }
    }
    partner
}

fn beta<R: Rng + ?Sized>(params: (f64, f64), rng: &mut R) -> Result<f64> {
    let d = Beta::new(params.0, params.1).map_err(|e| Error::invalid(format!("beta parameters {params:?}: {e}")))?;
    Ok(d.sample(rng))
}

/// One `lambda` per pair, shared by both members.
fn pair_values<R: Rng + ?Sized>(
    partner: &[usize],
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; partner.len()];
    for i in 0..partner.len() {
        if out[i].is_nan() {
            let v = draw(rng)?;
            out[i] = v;
            out[partner[i]] = v;
        }
    }
    Ok(out)
}

/// `x_i <- lambda_i x_i + (1 - lambda_i) x_partner(i)`, with labels mixed by
/// the same weights.
pub fn mixup_with(batch: &ImageBatch, partner: &[usize], lambda: &[f32]) -> Result<MixedBatch> {
    let n = batch.image_len();
    let mut data = Vec::with_capacity(batch.images.numel());
    for i in 0..batch.len() {
        let (a, b, l) = (batch.image(i), batch.image(partner[i]), lambda[i]);
        data.extend(a.iter().zip(b).map(|(&u, &v)| mix(u, v, l)));
    }
    debug_assert_eq!(data.len(), n * batch.len());
    Ok(MixedBatch {
        batch: batch.with_images(data)?,
        partner_labels: partner.iter().map(|&j| batch.labels[j]).collect(),
        lambda: lambda.to_vec(),
        boxes: None,
    })
}

/// Convex combination kept inside `[0, 1]` despite rounding.
fn mix(u: f32, v: f32, l: f32) -> f32 {
    if l == 1.0 {
        u
    } else if l == 0.0 {
        v
    } else {
        (l * u + (1.0 - l) * v).clamp(0.0, 1.0)
    }
}

pub fn mixup<R: Rng + ?Sized>(batch: &ImageBatch, params: (f64, f64), rng: &mut R) -> Result<MixedBatch> {
    if batch.len() < 2 {
        return Ok(MixedBatch::unmixed(batch.clone()));
    }
    let partner = pairing(batch.len(), rng);
    let lambda = pair_values(&partner, rng, |r| beta(params, r))?;
    let lambda: Vec<f32> = lambda.iter().map(|&v| v as f32).collect();
    mixup_with(batch, &partner, &lambda)
}

/// Zeroes `boxes[i]` in every channel of image `i`; labels are untouched.
pub fn cutout_with(batch: &ImageBatch, boxes: &[PatchBox]) -> Result<MixedBatch> {
    let (_, c, h, w) = batch.dims();
    let mut data = batch.images.data().to_vec();
    for (i, img) in data.chunks_mut(c * h * w).enumerate() {
        paste(img, None, boxes[i], c, h, w);
    }
    Ok(MixedBatch {
        boxes: Some(boxes.to_vec()),
        ..MixedBatch::unmixed(batch.with_images(data)?)
    })
}

/// Writes `src` (or zeros) into `dst` inside `b`.
fn paste(dst: &mut [f32], src: Option<&[f32]>, b: PatchBox, c: usize, h: usize, w: usize) {
    for ch in 0..c {
        for i in b.h0..b.h0 + b.dh {
            let row = ch * h * w + i * w;
            let span = row + b.w0..row + b.w0 + b.dw;
            match src {
                Some(s) => dst[span.clone()].copy_from_slice(&s[span]),
                None => dst[span].fill(0.0),
            }
        }
    }
}

pub fn cutout<R: Rng + ?Sized>(batch: &ImageBatch, params: (f64, f64), rng: &mut R) -> Result<MixedBatch> {
    let (_, _, h, w) = batch.dims();
    let mut boxes = Vec::with_capacity(batch.len());
    for _ in 0..batch.len() {
        let f = beta(params, rng)?;
        boxes.push(PatchBox::sample(f, h, w, rng));
    }
    cutout_with(batch, &boxes)
}

/// Copies the partner's pixels inside `boxes[i]` into image `i`, with label
/// weight `lambda = 1 - box area / (H W)`.
pub fn cutmix_with(batch: &ImageBatch, partner: &[usize], boxes: &[PatchBox]) -> Result<MixedBatch> {
    let (_, c, h, w) = batch.dims();
    let mut data = batch.images.data().to_vec();
    for (i, img) in data.chunks_mut(c * h * w).enumerate() {
        paste(img, Some(batch.image(partner[i])), boxes[i], c, h, w);
    }
    Ok(MixedBatch {
        batch: batch.with_images(data)?,
        partner_labels: partner.iter().map(|&j| batch.labels[j]).collect(),
        lambda: boxes.iter().map(|b| 1.0 - b.area() as f32 / (h * w) as f32).collect(),
        boxes: Some(boxes.to_vec()),
    })
}

pub fn cutmix<R: Rng + ?Sized>(batch: &ImageBatch, params: (f64, f64), rng: &mut R) -> Result<MixedBatch> {
    if batch.len() < 2 {
        return Ok(MixedBatch::unmixed(batch.clone()));
    }
    let (_, _, h, w) = batch.dims();
    let partner = pairing(batch.len(), rng);
    let mut boxes = vec![PatchBox::EMPTY; batch.len()];
    let mut done = vec![false; batch.len()];
    for i in 0..batch.len() {
        if !done[i] {
            let f = beta(params, rng)?;
            let b = PatchBox::sample(f, h, w, rng);
            boxes[i] = b;
            boxes[partner[i]] = b;
            done[i] = true;
            done[partner[i]] = true;
        }
    }
    cutmix_with(batch, &partner, &boxes)
}

pub fn apply<R: Rng + ?Sized>(
    kind: AugKind,
    batch: &ImageBatch,
    params: (f64, f64),
    rng: &mut R,
) -> Result<MixedBatch> {
    match kind {
        AugKind::Mixup => mixup(batch, params, rng),
        AugKind::Cutout => cutout(batch, params, rng),
        AugKind::Cutmix => cutmix(batch, params, rng),
    }
}

/// Random crop from the zero-padded image plus a horizontal flip with
/// probability one half, independently per image.
pub fn crop_flip<R: Rng + ?Sized>(batch: &ImageBatch, pad: usize, flip: bool, rng: &mut R) -> ImageBatch {
    let (b, c, h, w) = batch.dims();
    let mut out = vec![0.0f32; batch.images.numel()];
    for (n, img) in out.chunks_mut(c * h * w).enumerate() {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let mirror = flip && rng.random::<bool>();
        let src = batch.image(n);
        for ch in 0..c {
            for i in 0..h {
                let si = i as isize + dy;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let jj = if mirror { w - 1 - j } else { j };
                    let sj = jj as isize + dx;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    img[ch * h * w + i * w + j] = src[ch * h * w + si as usize * w + sj as usize];
                }
            }
        }
    }
    ImageBatch {
        images: Tensor::new(vec![b, c, h, w], out).expect("same shape"),
        labels: batch.labels.clone(),
    }
}
