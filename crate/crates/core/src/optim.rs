//! SGD with momentum and weight decay, and a finite-difference gradient
//! checker.

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tape};
use crate::nn::{Mode, Network, Param, ParamKind};

/// `v <- momentum * v + (g + weight_decay * w); w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![],
        }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; `None` means
    /// the parameter received no gradient and is treated as zero. Returns
    /// `false`, leaving everything untouched, when any gradient is non-finite.
    ///
    /// FAT mask logits are exempt from weight decay so that decay does not
    /// drag every mask towards one half.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Vec<f32>>], lr: f32) -> Result<bool> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != params.len() {
            return Err(Error::shape("sgd gradients", &[params.len()], &[grads.len()]));
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            log::warn!("non-finite gradient; skipping update");
            return Ok(false);
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if !p.tensor.requires_grad() {
                continue;
            }
            let wd = if p.kind == ParamKind::FatLogits {
                0.0
            } else {
                self.weight_decay
            };
            let w = p.tensor.data_mut();
            if let Some(g) = g {
                if g.len() != w.len() {
                    return Err(Error::shape(&p.name, &[w.len()], &[g.len()]));
                }
            }
            for i in 0..w.len() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + (gi + wd * w[i]);
                w[i] -= lr * v[i];
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - fd| / max(|analytic|, |fd|, 1e-8)` seen.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub samples: usize,
    /// Coordinates dropped because the two perturbed evaluations landed on
    /// different sides of a relu/hardtanh kink.
    pub skipped: usize,
    /// True when no trainable parameter existed, so nothing was checked.
    pub vacuous: bool,
}

/// Compares backprop gradients of the mean cross-entropy (training-mode
/// forward) with central differences.
///
/// For each trainable parameter the `per_param` coordinates with the largest
/// analytic gradient are checked: in 32-bit arithmetic the difference
/// quotient of a near-zero gradient is mostly rounding. The perturbed losses
/// are evaluated on an `f64` tape, and a coordinate whose `+h` and
/// `-h` evaluations straddle a kink is skipped, since the central difference
/// there does not estimate the derivative.
pub fn grad_check_with(net: &Network, batch: &ImageBatch, fd_step: f32, per_param: usize) -> Result<GradCheck> {
    if !net.params.iter().any(|p| p.tensor.requires_grad()) {
        return Ok(GradCheck {
            max_rel_error: 0.0,
            samples: 0,
            skipped: 0,
            vacuous: true,
        });
    }
    let analytic = param_grads(net, batch)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let (mut samples, mut skipped) = (0, 0);
    for (pi, p) in net.params.iter().enumerate() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let mut order: Vec<usize> = (0..p.tensor.numel()).collect();
        order.sort_by(|&a, &b| analytic[pi][b].abs().total_cmp(&analytic[pi][a].abs()).then(a.cmp(&b)));
        for &i in order.iter().take(per_param) {
            let orig = p.tensor.data()[i];
            probe.params[pi].tensor.data_mut()[i] = orig + fd_step;
            let (up, kinks_up) = loss_f64(&probe, batch)?;
            probe.params[pi].tensor.data_mut()[i] = orig - fd_step;
            let (down, kinks_down) = loss_f64(&probe, batch)?;
            probe.params[pi].tensor.data_mut()[i] = orig;
            if kinks_up != kinks_down {
                skipped += 1;
                continue;
            }
            let h = ((orig + fd_step) as f64) - ((orig - fd_step) as f64);
            let fd = (up - down) / h;
            let a = analytic[pi][i] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            samples += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        samples,
        skipped,
        vacuous: false,
    })
}

pub fn grad_check(net: &Network, batch: &ImageBatch, fd_step: f32) -> Result<GradCheck> {
    grad_check_with(net, batch, fd_step, 4)
}

/// Training-mode gradients of the mean cross-entropy for every parameter
/// (zeros where unreachable).
pub fn param_grads(net: &Network, batch: &ImageBatch) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::new();
    let x = g.leaf(&batch.images);
    let t = net.forward(&mut g, x, Mode::Train)?;
    let loss = g.cross_entropy(t.logits, &batch.labels)?;
    let grads = g.backward(loss)?;
    Ok(t.params
        .iter()
        .zip(&net.params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.tensor.numel()))
        .collect())
}

fn loss_f64(net: &Network, batch: &ImageBatch) -> Result<(f64, Vec<bool>)> {
    let mut g = Tape::<f64>::new();
    let x = g.leaf(&batch.images);
    let t = net.forward(&mut g, x, Mode::Train)?;
    let loss = g.cross_entropy(t.logits, &batch.labels)?;
    Ok((g.value(loss)[0], g.kink_pattern()))
}
