//! Natural and adversarial training with a step learning-rate schedule.

pub mod augment;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::data::{batch_order, probe_batch, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::export::{fmt_f64, Provenance, Table};
use crate::graph::Graph;
use crate::nn::{Mode, Network, STEM};
use crate::optim::Sgd;
use crate::spectral::lfi_hfi_ratio;

pub use augment::{AugKind, AugStage, Augmentation, MixedBatch, PatchBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// `(epoch, factor)`: from the epoch after `epoch` on, the rate is
    /// multiplied by `factor`.
    pub lr_decay: Vec<(usize, f32)>,
    /// Train on adversarial examples from `inner_attack` instead of clean
    /// batches.
    pub adversarial: bool,
    pub inner_attack: AttackSpec,
    pub augmentation: Augmentation,
    /// Beta distribution parameters for mixup weights and patch areas.
    pub beta: (f64, f64),
    /// Zero padding of the random crop; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    /// Track the activation ratio of the stem on the probe batch.
    pub probe_ratio: bool,
    /// Test examples used for per-epoch clean and adversarial accuracy; 0
    /// disables the check.
    pub monitor_size: usize,
    /// Test examples for the final table over the standard attack suite; 0
    /// skips it.
    pub final_eval_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 512,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: vec![(60, 0.1), (90, 0.1), (110, 0.5)],
            adversarial: true,
            inner_attack: AttackSpec::pgd(7),
            augmentation: Augmentation::NONE,
            beta: (1.0, 1.0),
            crop_pad: 4,
            flip: true,
            probe_ratio: true,
            monitor_size: 256,
            final_eval_size: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        let mut prev = None;
        for &(e, f) in &self.lr_decay {
            if prev.is_some_and(|p| e <= p) {
                return Err(Error::invalid("lr_decay epochs must be strictly increasing"));
            }
            if e >= self.epochs {
                return Err(Error::invalid(format!(
                    "lr_decay epoch {e} is not below epochs = {}",
                    self.epochs
                )));
            }
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::invalid(format!("lr_decay factor must be positive, got {f}")));
            }
            prev = Some(e);
        }
        if !(self.beta.0 > 0.0 && self.beta.1 > 0.0) {
            return Err(Error::invalid("beta parameters must be positive"));
        }
        self.inner_attack.validate()
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr_decay
            .iter()
            .filter(|(m, _)| epoch > *m)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

/// Metrics of one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f32,
    /// Example-weighted mean training loss.
    pub train_loss: f64,
    pub clean_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    pub ratio: Option<f64>,
    /// Optimizer steps dropped for non-finite gradients.
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub adversarial: bool,
    pub augmentation: Augmentation,
    pub rows: Vec<EpochRow>,
    /// Probe ratio before the first update.
    pub initial_ratio: Option<f64>,
    /// `(column, accuracy)` over the standard suite, when requested.
    pub final_table: Vec<(String, f64)>,
    /// Epoch whose loss went non-finite; training stopped and the network
    /// is the one from the end of the previous epoch.
    pub aborted: Option<usize>,
    /// Batch-norm mode the inner attack runs the model in.
    pub attack_mode: &'static str,
    pub provenance: Option<Provenance>,
}

impl RunReport {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            adversarial: cfg.adversarial,
            augmentation: cfg.augmentation,
            rows: vec![],
            initial_ratio: None,
            final_table: vec![],
            aborted: None,
            attack_mode: "eval",
            provenance: None,
        }
    }

    /// `(epoch, R)` including epoch 0 (before training).
    pub fn ratio_series(&self) -> Vec<(usize, f64)> {
        self.initial_ratio
            .map(|r| (0, r))
            .into_iter()
            .chain(self.rows.iter().filter_map(|r| r.ratio.map(|v| (r.epoch, v))))
            .collect()
    }

    /// Last recorded ratio over the initial one.
    pub fn ratio_growth(&self) -> Option<f64> {
        let s = self.ratio_series();
        match (s.first(), s.last()) {
            (Some(&(0, a)), Some(&(_, b))) if s.len() > 1 => Some(b / a),
            _ => None,
        }
    }

    pub fn metrics_table(&self) -> Table {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut t = Table::new([
            "epoch",
            "lr",
            "train_loss",
            "clean_acc",
            "adv_acc",
            "ratio",
            "skipped_steps",
        ]);
        for r in &self.rows {
            t.push([
                r.epoch.to_string(),
                fmt_f64(r.lr as f64),
                fmt_f64(r.train_loss),
                opt(r.clean_acc),
                opt(r.adv_acc),
                opt(r.ratio),
                r.skipped_steps.to_string(),
            ]);
        }
        t
    }

    pub fn ratio_table(&self) -> Table {
        let mut t = Table::new(["epoch", "R"]);
        for (e, r) in self.ratio_series() {
            t.push([e.to_string(), fmt_f64(r)]);
        }
        t
    }

    pub fn final_eval_table(&self) -> Table {
        let mut t = Table::new(["attack", "accuracy"]);
        for (name, acc) in &self.final_table {
            t.push([name.clone(), fmt_f64(*acc)]);
        }
        t
    }
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_ATTACK: u64 = 3;
const TAG_MONITOR: u64 = 4;
const TAG_FINAL: u64 = 5;

/// Independent seed for `(tag, epoch, batch)` under the run seed.
fn derive_seed(seed: u64, tag: u64, epoch: usize, batch: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((tag << 56) ^ ((epoch as u64) << 28) ^ batch as u64);
    r.random()
}

/// `R` of the stem activation (after batch norm and hardtanh) on `probe`,
/// in eval mode.
pub fn stem_ratio(net: &Network, probe: &ImageBatch) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(&probe.images.clone().with_requires_grad(false));
    let t = net.forward(&mut g, x, Mode::Eval)?;
    let tap = t
        .tap(STEM)
        .ok_or_else(|| Error::invalid("network has no stem convolution"))?;
    lfi_hfi_ratio(&g.to_tensor(tap.post))
}

/// CE training on clean batches. Equivalent to [`train`] with
/// `adversarial = false`.
pub fn natural_train(net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, RunReport)> {
    train(
        net,
        data,
        &TrainConfig {
            adversarial: false,
            ..cfg.clone()
        },
    )
}

/// Min-max training on examples from `cfg.inner_attack`.
pub fn adversarial_train(net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, RunReport)> {
    train(
        net,
        data,
        &TrainConfig {
            adversarial: true,
            ..cfg.clone()
        },
    )
}

/// Runs `cfg.epochs` epochs. A batch goes through crop/flip, the `C-`
/// augmentation, the attack (adversarial runs only), then the `A-`
/// augmentation; the loss is CE, or soft-label BCE when the augmentation
/// mixes labels.
pub fn train(mut net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, RunReport)> {
    cfg.validate()?;
    data.validate()?;
    if data.train.is_empty() && cfg.epochs > 0 {
        return Err(Error::EmptyDataset);
    }
    let mut report = RunReport::new(cfg);
    let probe = probe_batch(&data.train, cfg.batch_size);
    let monitor = data.test.take(cfg.monitor_size);
    if cfg.probe_ratio && !probe.is_empty() {
        report.initial_ratio = Some(stem_ratio(&net, &probe)?);
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    for epoch in 1..=cfg.epochs {
        let snapshot = (net.clone(), opt.clone());
        let lr = cfg.lr_at(epoch);
        match run_epoch(&mut net, &mut opt, data, cfg, epoch, lr)? {
            Some((loss, skipped)) => {
                let mut row = EpochRow {
                    epoch,
                    lr,
                    train_loss: loss,
                    clean_acc: None,
                    adv_acc: None,
                    ratio: None,
                    skipped_steps: skipped,
                };
                if !monitor.is_empty() {
                    let s = derive_seed(cfg.seed, TAG_MONITOR, epoch, 0);
                    row.clean_acc = Some(attacks::evaluate_robustness(&net, &monitor, None, s)?);
                    row.adv_acc = Some(attacks::evaluate_robustness(
                        &net,
                        &monitor,
                        Some(&cfg.inner_attack),
                        s,
                    )?);
                }
                if cfg.probe_ratio && !probe.is_empty() {
                    row.ratio = Some(stem_ratio(&net, &probe)?);
                }
                log::info!(
                    "epoch {epoch}: lr {lr} loss {:.4} clean {:?} adv {:?} R {:?}",
                    row.train_loss,
                    row.clean_acc,
                    row.adv_acc,
                    row.ratio
                );
                report.rows.push(row);
            }
            None => {
                log::warn!(
                    "epoch {epoch}: non-finite loss, keeping the network from epoch {}",
                    epoch - 1
                );
                net = snapshot.0;
                report.aborted = Some(epoch);
                break;
            }
        }
    }
    if cfg.final_eval_size > 0 {
        let test = data.test.take(cfg.final_eval_size);
        let seed = derive_seed(cfg.seed, TAG_FINAL, 0, 0);
        for spec in attacks::standard_suite() {
            let acc = attacks::evaluate_robustness(&net, &test, spec.as_ref(), seed)?;
            report.final_table.push((attacks::column_label(spec.as_ref()), acc));
        }
    }
    Ok((net, report))
}

/// One pass over the training split. Returns `None` if a loss was
/// non-finite, else the mean loss and the number of skipped updates.
fn run_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f32,
) -> Result<Option<(f64, usize)>> {
    let order = batch_order(
        data.train.len(),
        cfg.batch_size,
        true,
        derive_seed(cfg.seed, TAG_SHUFFLE, epoch, 0),
    );
    let (mut total, mut count, mut skipped) = (0.0f64, 0usize, 0usize);
    for (bi, idx) in order.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_AUGMENT, epoch, bi));
        let mut batch = data.train.select(idx);
        if cfg.crop_pad > 0 || cfg.flip {
            batch = augment::crop_flip(&batch, cfg.crop_pad, cfg.flip, &mut rng);
        }
        let step = prepare_batch(
            net,
            batch,
            data.num_classes,
            cfg,
            derive_seed(cfg.seed, TAG_ATTACK, epoch, bi),
            &mut rng,
        );
        let (mixed, soft) = match step {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut g = Graph::new();
        let x = g.leaf(&mixed.batch.images.clone().with_requires_grad(false));
        let trace = net.forward(&mut g, x, Mode::Train)?;
        let loss = match &soft {
            Some(t) => g.soft_bce(trace.logits, t)?,
            None => g.cross_entropy(trace.logits, &mixed.batch.labels)?,
        };
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Ok(None);
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = trace
            .params
            .iter()
            .map(|&v| grads.get(v).map(<[f32]>::to_vec))
            .collect();
        if opt.step(&mut net.params, &grads, lr)? {
            net.apply_bn_stats(&trace.bn_stats);
        } else {
            skipped += 1;
        }
        total += value as f64 * idx.len() as f64;
        count += idx.len();
    }
    Ok(Some((total / count.max(1) as f64, skipped)))
}

/// Clean batch to training inputs: `C-` augmentation, attack, `A-`
/// augmentation. Also returns the soft targets when labels are mixed.
fn prepare_batch(
    net: &Network,
    batch: ImageBatch,
    num_classes: usize,
    cfg: &TrainConfig,
    attack_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(MixedBatch, Option<Vec<f32>>)> {
    let aug = cfg.augmentation;
    let soft_labels = aug.0.is_some_and(|(_, k)| k != AugKind::Cutout);
    let mut mixed = match aug.at(AugStage::Clean) {
        Some(k) => augment::apply(k, &batch, cfg.beta, rng)?,
        None => MixedBatch::unmixed(batch),
    };
    if cfg.adversarial {
        let adv = if soft_labels && aug.at(AugStage::Clean).is_some() {
            let t = mixed.soft_labels(num_classes);
            attacks::attack_soft_targets(net, &mixed.batch, &t, &cfg.inner_attack, attack_seed)?.adv
        } else {
            attacks::attack(net, &mixed.batch, &cfg.inner_attack, attack_seed)?.adv
        };
        mixed.batch = adv;
    }
    if let Some(k) = aug.at(AugStage::Adversarial) {
        mixed = augment::apply(k, &mixed.batch, cfg.beta, rng)?;
    }
    let soft = soft_labels.then(|| mixed.soft_labels(num_classes));
    Ok((mixed, soft))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_milestones() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 0.1);
        assert_eq!(c.lr_at(60), 0.1);
        assert!((c.lr_at(61) - 0.01).abs() < 1e-9);
        assert!((c.lr_at(91) - 0.001).abs() < 1e-9);
        assert!((c.lr_at(111) - 0.0005).abs() < 1e-9);
    }

    #[test]
    fn decay_epochs_checked() {
        let mut c = TrainConfig {
            epochs: 10,
            lr_decay: vec![(5, 0.1), (5, 0.1)],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.lr_decay = vec![(3, 0.1), (10, 0.1)];
        assert!(c.validate().is_err());
        c.lr_decay = vec![(3, 0.1), (9, 0.1)];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_serde_defaults() {
        let c: TrainConfig =
            serde_json::from_str(r#"{"epochs": 5, "lr_decay": [], "augmentation": "A-cutmix"}"#).unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.batch_size, 512);
        assert_eq!(c.augmentation.to_string(), "A-cutmix");
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
    }
}
