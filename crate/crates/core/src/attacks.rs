//! l-infinity attacks on image classifiers and white-box robustness
//! evaluation.
//!
//! Every attack takes a clean batch and returns an [`AdvBatch`] whose images
//! stay in `[0, 1]` and, except for Gaussian noise, within `epsilon` of the
//! clean pixels. Randomness comes from a ChaCha stream fixed by the caller's
//! seed, so each attack is bitwise reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{batch_order, ImageBatch};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{argmax_rows, Mode, Network};
use crate::par;
use crate::tensor::Tensor;

/// Anything that maps a `[B, C, H, W]` input node to a `[B, K]` logits node.
pub trait Classifier: Sync {
    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var>;

    /// Predicted classes without recording gradients.
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.leaf(&images.clone().with_requires_grad(false));
        let z = self.logits(&mut g, x)?;
        Ok(argmax_rows(&g.to_tensor(z)))
    }
}

/// Networks are attacked and evaluated in eval mode (running batch-norm
/// statistics), including inside adversarial training.
impl Classifier for Network {
    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward(g, x, Mode::Eval)?.logits)
    }
}

/// A classifier behind an ideal low-pass filter of the given degree. Attacks
/// run against this wrapper see (and differentiate through) the filter.
pub struct LowPassed<'a, C: ?Sized> {
    pub inner: &'a C,
    pub degree: usize,
}

impl<C: Classifier + ?Sized> Classifier for LowPassed<'_, C> {
    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = g.low_pass(x, self.degree)?;
        self.inner.logits(g, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Gn,
    Fgsm,
    Pgd,
    Bim,
    Tpgd,
    Cw,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Gn => "GN",
            AttackKind::Fgsm => "FGSM",
            AttackKind::Pgd => "PGD",
            AttackKind::Bim => "BIM",
            AttackKind::Tpgd => "TPGD",
            AttackKind::Cw => "CW",
        }
    }
}

pub const DEFAULT_EPSILON: f32 = 8.0 / 255.0;
pub const DEFAULT_ALPHA: f32 = 2.0 / 255.0;
pub const DEFAULT_SIGMA: f32 = 0.1;
/// Margin clamp for the CW column. The clamp sits below the margin, so a large
/// value keeps the loss active on correctly classified inputs.
pub const DEFAULT_KAPPA: f32 = 50.0;
/// Standard deviation of the TPGD starting noise.
pub const TPGD_START_STD: f32 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    #[serde(default = "default_kappa")]
    pub kappa: f32,
}

fn default_epsilon() -> f32 {
    DEFAULT_EPSILON
}
fn default_alpha() -> f32 {
    DEFAULT_ALPHA
}
fn default_sigma() -> f32 {
    DEFAULT_SIGMA
}
fn default_kappa() -> f32 {
    DEFAULT_KAPPA
}

impl AttackSpec {
    fn base(kind: AttackKind, steps: usize, random_start: bool) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            steps,
            random_start,
            sigma: DEFAULT_SIGMA,
            kappa: DEFAULT_KAPPA,
        }
    }

    pub fn gn(sigma: f32) -> Self {
        Self {
            sigma,
            ..Self::base(AttackKind::Gn, 0, false)
        }
    }

    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            epsilon,
            alpha: epsilon,
            ..Self::base(AttackKind::Fgsm, 1, false)
        }
    }

    pub fn pgd(steps: usize) -> Self {
        Self::base(AttackKind::Pgd, steps, true)
    }

    pub fn bim(steps: usize) -> Self {
        Self::base(AttackKind::Bim, steps, false)
    }

    pub fn tpgd(steps: usize) -> Self {
        Self::base(AttackKind::Tpgd, steps, true)
    }

    pub fn cw(steps: usize) -> Self {
        Self::base(AttackKind::Cw, steps, true)
    }

    pub fn with_budget(mut self, epsilon: f32, alpha: f32) -> Self {
        self.epsilon = epsilon;
        self.alpha = alpha;
        self
    }

    /// Column label in evaluation tables, e.g. `PGD-20`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Gn | AttackKind::Fgsm => self.kind.name().to_string(),
            k => format!("{}-{}", k.name(), self.steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f32| v.is_finite();
        if !(ok(self.epsilon) && ok(self.alpha) && ok(self.sigma) && ok(self.kappa)) {
            return Err(Error::invalid(format!("{}: non-finite budget", self.label())));
        }
        if !(0.0 <= self.alpha && self.alpha <= self.epsilon && self.epsilon <= 1.0) {
            return Err(Error::invalid(format!(
                "{}: need 0 <= alpha <= epsilon <= 1, got alpha={} epsilon={}",
                self.label(),
                self.alpha,
                self.epsilon
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::invalid(format!("{}: sigma must be >= 0", self.label())));
        }
        if self.kappa < 0.0 {
            return Err(Error::invalid(format!("{}: kappa must be >= 0", self.label())));
        }
        Ok(())
    }
}

/// The evaluation columns used throughout: Natural, GN, FGSM, PGD-20,
/// BIM-20, TPGD-20, CW-20. `None` stands for clean inputs.
pub fn standard_suite() -> Vec<Option<AttackSpec>> {
    vec![
        None,
        Some(AttackSpec::gn(DEFAULT_SIGMA)),
        Some(AttackSpec::fgsm(DEFAULT_EPSILON)),
        Some(AttackSpec::pgd(20)),
        Some(AttackSpec::bim(20)),
        Some(AttackSpec::tpgd(20)),
        Some(AttackSpec::cw(20)),
    ]
}

/// Parses a table column name: `natural`, `gn`, `fgsm`, or
/// `pgd|bim|tpgd|cw` with an optional `-<steps>` suffix (default 20).
/// Case-insensitive. Budgets take the default values.
pub fn parse_column(name: &str) -> Result<Option<AttackSpec>> {
    let lower = name.trim().to_ascii_lowercase();
    let (kind, steps) = match lower.split_once('-') {
        Some((k, s)) => {
            let steps = s
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad step count in attack `{name}`")))?;
            (k.to_string(), Some(steps))
        }
        None => (lower.clone(), None),
    };
    let iterative = |f: fn(usize) -> AttackSpec| Ok(Some(f(steps.unwrap_or(20))));
    match (kind.as_str(), steps) {
        ("natural" | "clean" | "none", None) => Ok(None),
        ("gn", None) => Ok(Some(AttackSpec::gn(DEFAULT_SIGMA))),
        ("fgsm", None) => Ok(Some(AttackSpec::fgsm(DEFAULT_EPSILON))),
        ("pgd", _) => iterative(AttackSpec::pgd),
        ("bim", _) => iterative(AttackSpec::bim),
        ("tpgd", _) => iterative(AttackSpec::tpgd),
        ("cw", _) => iterative(AttackSpec::cw),
        _ => Err(Error::invalid(format!(
            "unknown attack `{name}` (expected natural, gn, fgsm, pgd-N, bim-N, tpgd-N, cw-N)"
        ))),
    }
}

pub fn column_label(spec: Option<&AttackSpec>) -> String {
    spec.map_or_else(|| "Natural".to_string(), AttackSpec::label)
}

#[derive(Clone, Debug)]
pub struct AdvBatch<'a> {
    pub adv: ImageBatch,
    pub clean: &'a ImageBatch,
    pub spec: AttackSpec,
}

impl AdvBatch<'_> {
    /// Largest absolute pixel change.
    pub fn linf(&self) -> f32 {
        self.adv
            .images
            .data()
            .iter()
            .zip(self.clean.images.data())
            .fold(0.0f32, |m, (a, c)| m.max((a - c).abs()))
    }
}

/// Runs `spec` against `model` on `clean`, drawing randomness from `seed`.
pub fn attack<'a, C: Classifier + ?Sized>(
    model: &C,
    clean: &'a ImageBatch,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch<'a>> {
    attack_impl(model, clean, spec, seed, None)
}

/// Like [`attack`] for batches with mixed (soft) labels: the cross-entropy
/// kinds (FGSM, PGD, BIM) ascend the soft-label BCE loss instead. `targets`
/// holds one probability row per image.
pub fn attack_soft_targets<'a, C: Classifier + ?Sized>(
    model: &C,
    clean: &'a ImageBatch,
    targets: &[f32],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch<'a>> {
    if !matches!(spec.kind, AttackKind::Fgsm | AttackKind::Pgd | AttackKind::Bim) {
        return Err(Error::invalid(format!("{} does not take soft labels", spec.label())));
    }
    attack_impl(model, clean, spec, seed, Some(targets))
}

fn attack_impl<'a, C: Classifier + ?Sized>(
    model: &C,
    clean: &'a ImageBatch,
    spec: &AttackSpec,
    seed: u64,
    soft: Option<&[f32]>,
) -> Result<AdvBatch<'a>> {
    spec.validate()?;
    let ce = || soft.map_or(Objective::CrossEntropy, |t| Objective::SoftBce(t.to_vec()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = clean.images.data();
    let data = match spec.kind {
        AttackKind::Gn => gaussian_noise(x, spec.sigma, &mut rng),
        AttackKind::Fgsm => {
            let g = input_gradient(model, clean, x, &ce())?;
            x.iter()
                .zip(&g)
                .map(|(&v, &d)| (v + spec.epsilon * sign(d)).clamp(0.0, 1.0))
                .collect()
        }
        AttackKind::Pgd | AttackKind::Bim | AttackKind::Cw => {
            let start = if spec.random_start && spec.kind != AttackKind::Bim {
                uniform_start(x, spec.epsilon, &mut rng)
            } else {
                x.to_vec()
            };
            let objective = if spec.kind == AttackKind::Cw {
                Objective::Margin(spec.kappa)
            } else {
                ce()
            };
            iterate(model, clean, start, spec, &objective)?
        }
        AttackKind::Tpgd => {
            let reference = softmax_rows(model, &clean.images)?;
            let bounds = Bounds::new(x, spec.epsilon);
            let start: Vec<f32> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let z: f32 = rng.sample(StandardNormal);
                    bounds.project(i, (v + TPGD_START_STD * z).clamp(0.0, 1.0))
                })
                .collect();
            iterate(model, clean, start, spec, &Objective::Kl(reference))?
        }
    };
    Ok(AdvBatch {
        adv: clean.with_images(data)?,
        clean,
        spec: spec.clone(),
    })
}

pub fn gn<'a>(clean: &'a ImageBatch, sigma: f32, seed: u64) -> Result<AdvBatch<'a>> {
    attack(&NoModel, clean, &AttackSpec::gn(sigma), seed)
}

pub fn fgsm<'a, C: Classifier + ?Sized>(model: &C, clean: &'a ImageBatch, epsilon: f32) -> Result<AdvBatch<'a>> {
    attack(model, clean, &AttackSpec::fgsm(epsilon), 0)
}

pub fn pgd<'a, C: Classifier + ?Sized>(
    model: &C,
    clean: &'a ImageBatch,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch<'a>> {
    attack(
        model,
        clean,
        &AttackSpec {
            kind: AttackKind::Pgd,
            ..spec.clone()
        },
        seed,
    )
}

pub fn bim<'a, C: Classifier + ?Sized>(
    model: &C,
    clean: &'a ImageBatch,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch<'a>> {
    attack(
        model,
        clean,
        &AttackSpec {
            kind: AttackKind::Bim,
            ..spec.clone()
        },
        seed,
    )
}

pub fn tpgd<'a, C: Classifier + ?Sized>(
    model: &C,
    clean: &'a ImageBatch,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch<'a>> {
    attack(
        model,
        clean,
        &AttackSpec {
            kind: AttackKind::Tpgd,
            ..spec.clone()
        },
        seed,
    )
}

pub fn cw_pgd<'a, C: Classifier + ?Sized>(
    model: &C,
    clean: &'a ImageBatch,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch<'a>> {
    attack(
        model,
        clean,
        &AttackSpec {
            kind: AttackKind::Cw,
            ..spec.clone()
        },
        seed,
    )
}

/// Placeholder model for the label- and gradient-free noise attack.
struct NoModel;

impl Classifier for NoModel {
    fn logits(&self, _: &mut Graph, _: Var) -> Result<Var> {
        Err(Error::invalid("gaussian noise does not query a model"))
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gaussian_noise(x: &[f32], sigma: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let z: f32 = rng.sample(StandardNormal);
            (v + sigma * z).clamp(0.0, 1.0)
        })
        .collect()
}

fn uniform_start(x: &[f32], epsilon: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let u: f32 = rng.random();
            (v + (2.0 * u - 1.0) * epsilon).clamp(0.0, 1.0)
        })
        .collect()
}

/// Per-pixel feasible interval: the epsilon ball intersected with `[0, 1]`.
struct Bounds {
    lo: Vec<f32>,
    hi: Vec<f32>,
}

impl Bounds {
    fn new(x: &[f32], epsilon: f32) -> Self {
        Self {
            lo: x.iter().map(|&v| (v - epsilon).max(0.0)).collect(),
            hi: x.iter().map(|&v| (v + epsilon).min(1.0)).collect(),
        }
    }

    fn project(&self, i: usize, v: f32) -> f32 {
        v.clamp(self.lo[i], self.hi[i])
    }
}

enum Objective {
    CrossEntropy,
    SoftBce(Vec<f32>),
    Margin(f32),
    /// KL from fixed clean-input class probabilities.
    Kl(Vec<f32>),
}

fn iterate<C: Classifier + ?Sized>(
    model: &C,
    clean: &ImageBatch,
    mut cur: Vec<f32>,
    spec: &AttackSpec,
    objective: &Objective,
) -> Result<Vec<f32>> {
    let bounds = Bounds::new(clean.images.data(), spec.epsilon);
    for _ in 0..spec.steps {
        let g = input_gradient(model, clean, &cur, objective)?;
        for (i, (v, d)) in cur.iter_mut().zip(&g).enumerate() {
            *v = bounds.project(i, (*v + spec.alpha * sign(*d)).clamp(0.0, 1.0));
        }
    }
    Ok(cur)
}

/// Gradient of the attack objective with respect to the input pixels `x`
/// (laid out like `clean.images`).
fn input_gradient<C: Classifier + ?Sized>(
    model: &C,
    clean: &ImageBatch,
    x: &[f32],
    objective: &Objective,
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let xv = g.input(clean.images.shape().to_vec(), x.to_vec(), true)?;
    let z = model.logits(&mut g, xv)?;
    let loss = match objective {
        Objective::CrossEntropy => g.cross_entropy(z, &clean.labels)?,
        Objective::SoftBce(t) => g.soft_bce(z, t)?,
        Objective::Margin(kappa) => g.margin_loss(z, &clean.labels, *kappa)?,
        Objective::Kl(reference) => g.kl_from_reference(z, reference)?,
    };
    let mut grads = g.backward(loss)?;
    let d = grads.take(xv).unwrap_or_else(|| vec![0.0; x.len()]);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attack input gradient".into()));
    }
    Ok(d)
}

fn softmax_rows<C: Classifier + ?Sized>(model: &C, images: &Tensor) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let x = g.leaf(&images.clone().with_requires_grad(false));
    let z = model.logits(&mut g, x)?;
    let k = g.shape(z)[1];
    let mut out = Vec::with_capacity(g.value(z).len());
    for row in g.value(z).chunks(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f32 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Ok(out)
}

/// Batch size used when evaluating robustness.
pub const EVAL_BATCH: usize = 128;

/// Fraction of `data` classified correctly by `defender` after attacking
/// `attacker` (clean inputs when `spec` is `None`). Batches are attacked
/// independently, each with its own stream derived from `seed`.
pub fn evaluate_against<A, D>(
    attacker: &A,
    defender: &D,
    data: &ImageBatch,
    spec: Option<&AttackSpec>,
    seed: u64,
) -> Result<f64>
where
    A: Classifier + ?Sized,
    D: Classifier + ?Sized,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order = batch_order(data.len(), EVAL_BATCH, false, 0);
    let per_batch = par::map_indexed(order.len(), |bi| -> Result<usize> {
        let batch = data.select(&order[bi]);
        let pred = match spec {
            None => defender.predict(&batch.images)?,
            Some(s) => {
                let adv = attack(attacker, &batch, s, batch_seed(seed, bi))?;
                defender.predict(&adv.adv.images)?
            }
        };
        Ok(pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count())
    });
    let mut correct = 0;
    for c in per_batch {
        correct += c?;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// White-box robust accuracy: the attacked model is the evaluated model.
pub fn evaluate_robustness<C: Classifier + ?Sized>(
    model: &C,
    data: &ImageBatch,
    spec: Option<&AttackSpec>,
    seed: u64,
) -> Result<f64> {
    evaluate_against(model, model, data, spec, seed)
}

/// Seed of the `index`-th evaluation batch.
pub fn batch_seed(seed: u64, index: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r.random()
}
