//! Layer descriptors, parameter storage and the ResNet family.

pub mod checkpoint;
pub mod fat;
pub mod quant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;
/// Initial FAT logit; `sigmoid(3) ~ 0.95`, so a fresh mask barely alters kernels.
pub const FAT_INIT_LOGIT: f32 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    HardTanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    /// Bias-free convolution. `bits` and `fat` describe the weight transform.
    Conv {
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bits: u32,
        fat: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Activation {
        kind: Activation,
    },
    /// Basic block: conv-bn-relu-conv-bn, plus a parameter-free shortcut,
    /// then relu.
    Residual {
        name: String,
        c_in: usize,
        c_out: usize,
        stride: usize,
        bits: u32,
        fat: bool,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        name: String,
        input: usize,
        output: usize,
        bias: bool,
        bits: u32,
    },
}

impl LayerDesc {
    pub fn weighted_layers(&self) -> usize {
        match self {
            LayerDesc::Conv { .. } | LayerDesc::Linear { .. } => 1,
            LayerDesc::Residual { .. } => 2,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    FatLogits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// `requires_grad` on the tensor marks the parameter trainable.
    pub tensor: Tensor,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, gradients for trainable parameters.
    Train,
    /// Running statistics, parameters treated as constants.
    Eval,
}

/// Captured output of a weighted layer. `pre` is the raw conv/linear output;
/// `post` is the value after the batch norm and activation that follow it
/// (for the second conv of a residual block, the block output).
#[derive(Clone, Debug)]
pub struct Tap {
    pub layer: String,
    pub pre: Var,
    pub post: Var,
}

#[derive(Debug)]
pub struct Trace {
    pub logits: Var,
    /// One leaf per parameter, aligned with `Network::params`.
    pub params: Vec<Var>,
    /// `(index of the running-mean buffer, batch statistics)` for every batch
    /// norm evaluated in training mode.
    pub bn_stats: Vec<(usize, BatchStats)>,
    pub taps: Vec<Tap>,
}

impl Trace {
    pub fn tap(&self, layer: &str) -> Option<&Tap> {
        self.taps.iter().find(|t| t.layer == layer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<LayerDesc>,
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
    pub input_channels: usize,
    pub num_classes: usize,
}

/// Builder arguments for the ResNet family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResNetConfig {
    /// Basic blocks per stage (3 gives ResNet-20).
    pub depth_blocks: usize,
    /// Channel multiplier on the 16/32/64 stage widths.
    pub width: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    /// Weight bit width for every layer except the stem.
    pub quant_bits: u32,
    /// Frequency-domain kernel mask on every conv except the stem.
    pub fat: bool,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            depth_blocks: 3,
            width: 1,
            num_classes: 10,
            input_channels: 3,
            quant_bits: 32,
            fat: false,
        }
    }
}

pub const STEM: &str = "stem";
pub const HEAD: &str = "head";

pub fn resnet_layers(cfg: &ResNetConfig) -> Result<Vec<LayerDesc>> {
    if cfg.depth_blocks == 0 || cfg.width == 0 {
        return Err(Error::invalid("depth_blocks and width must be at least 1"));
    }
    if cfg.num_classes < 2 {
        return Err(Error::invalid("a classifier needs at least two classes"));
    }
    quant::check_bits(cfg.quant_bits)?;
    let base = 16 * cfg.width;
    let mut layers = vec![
        LayerDesc::Conv {
            name: STEM.into(),
            c_in: cfg.input_channels,
            c_out: base,
            kernel: 3,
            stride: 1,
            pad: 1,
            bits: 32,
            fat: false,
        },
        LayerDesc::BatchNorm {
            name: format!("{STEM}.bn"),
            channels: base,
        },
        LayerDesc::Activation {
            kind: Activation::HardTanh,
        },
    ];
    let mut c = base;
    for stage in 0..3 {
        let c_out = base << stage;
        for block in 0..cfg.depth_blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            layers.push(LayerDesc::Residual {
                name: format!("stage{}.block{}", stage + 1, block),
                c_in: c,
                c_out,
                stride,
                bits: cfg.quant_bits,
                fat: cfg.fat,
            });
            c = c_out;
        }
    }
    layers.push(LayerDesc::GlobalAvgPool);
    layers.push(LayerDesc::Linear {
        name: HEAD.into(),
        input: c,
        output: cfg.num_classes,
        bias: true,
        bits: cfg.quant_bits,
    });
    Ok(layers)
}

pub fn build_resnet(cfg: &ResNetConfig, seed: u64) -> Result<Network> {
    Network::from_layers(resnet_layers(cfg)?, cfg.input_channels, cfg.num_classes, seed)
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamBuilder {
    fn push(&mut self, name: String, kind: ParamKind, tensor: Tensor) {
        self.params.push(Param {
            name,
            kind,
            tensor: tensor.with_requires_grad(true),
        });
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bits: u32, fat: bool) -> Result<()> {
        quant::check_bits(bits)?;
        let w = kaiming(&mut self.rng, &[c_out, c_in, k, k], c_in * k * k);
        self.push(format!("{name}.weight"), ParamKind::Weight, w);
        if fat {
            let logits = Tensor::full(&[c_in * k * k], FAT_INIT_LOGIT);
            self.push(format!("{name}.fat"), ParamKind::FatLogits, logits);
        }
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), ParamKind::BnScale, Tensor::full(&[c], 1.0));
        self.push(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(&[c]));
        self.buffers.push(Buffer {
            name: format!("{name}.running_mean"),
            data: vec![0.0; c],
        });
        self.buffers.push(Buffer {
            name: format!("{name}.running_var"),
            data: vec![1.0; c],
        });
    }
}

impl Network {
    /// Builds parameters for `layers`, checking that channel counts chain.
    pub fn from_layers(
        layers: Vec<LayerDesc>,
        input_channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Network> {
        let mut b = ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: vec![],
            buffers: vec![],
        };
        let mut c = Some(input_channels);
        let check = |name: &str, c: Option<usize>, want: usize| -> Result<()> {
            match c {
                Some(have) if have != want => {
                    Err(Error::in_layer(name)(Error::shape("input channels", &[want], &[have])))
                }
                _ => Ok(()),
            }
        };
        let mut out_features = None;
        for layer in &layers {
            match layer {
                LayerDesc::Conv {
                    name,
                    c_in,
                    c_out,
                    kernel,
                    bits,
                    fat,
                    ..
                } => {
                    check(name, c, *c_in)?;
                    b.conv(name, *c_in, *c_out, *kernel, *bits, *fat)
                        .map_err(Error::in_layer(name))?;
                    c = Some(*c_out);
                }
                LayerDesc::BatchNorm { name, channels } => {
                    check(name, c, *channels)?;
                    b.bn(name, *channels);
                }
                LayerDesc::Activation { .. } => {}
                LayerDesc::Residual {
                    name,
                    c_in,
                    c_out,
                    bits,
                    fat,
                    ..
                } => {
                    check(name, c, *c_in)?;
                    if c_out < c_in {
                        return Err(Error::in_layer(name)(Error::invalid(
                            "residual block cannot reduce channels",
                        )));
                    }
                    let at = Error::in_layer(name);
                    b.conv(&format!("{name}.conv1"), *c_in, *c_out, 3, *bits, *fat)
                        .map_err(at)?;
                    b.bn(&format!("{name}.bn1"), *c_out);
                    b.conv(&format!("{name}.conv2"), *c_out, *c_out, 3, *bits, *fat)
                        .map_err(Error::in_layer(name))?;
                    b.bn(&format!("{name}.bn2"), *c_out);
                    c = Some(*c_out);
                }
                LayerDesc::GlobalAvgPool => {}
                LayerDesc::Flatten => c = None,
                LayerDesc::Linear {
                    name,
                    input,
                    output,
                    bias,
                    bits,
                } => {
                    check(name, c, *input)?;
                    quant::check_bits(*bits).map_err(Error::in_layer(name))?;
                    let w = kaiming(&mut b.rng, &[*output, *input], *input);
                    b.push(format!("{name}.weight"), ParamKind::Weight, w);
                    if *bias {
                        let bound = 1.0 / (*input as f32).sqrt();
                        let data = (0..*output).map(|_| b.rng.random_range(-bound..=bound)).collect();
                        let t = Tensor::new(vec![*output], data)?;
                        b.push(format!("{name}.bias"), ParamKind::Bias, t);
                    }
                    c = Some(*output);
                    out_features = Some(*output);
                }
            }
        }
        if out_features != Some(num_classes) {
            return Err(Error::invalid(format!(
                "network must end in a linear layer with {num_classes} outputs"
            )));
        }
        Ok(Network {
            layers,
            params: b.params,
            buffers: b.buffers,
            input_channels,
            num_classes,
        })
    }

    pub fn weighted_layers(&self) -> usize {
        self.layers.iter().map(LayerDesc::weighted_layers).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.params.iter_mut().for_each(|p| p.tensor.set_requires_grad(on));
    }

    /// Names of every conv and linear layer in forward order, the tap names
    /// reported by [`Network::forward`].
    pub fn weighted_layer_names(&self) -> Vec<String> {
        let mut out = vec![];
        for l in &self.layers {
            match l {
                LayerDesc::Conv { name, .. } | LayerDesc::Linear { name, .. } => out.push(name.clone()),
                LayerDesc::Residual { name, .. } => {
                    out.push(format!("{name}.conv1"));
                    out.push(format!("{name}.conv2"));
                }
                _ => {}
            }
        }
        out
    }

    /// Records the forward pass of `x` (`[B, C, H, W]`, or `[B, F]` for nets
    /// that start with a linear layer) on `g`.
    pub fn forward<T: Scalar>(&self, g: &mut Tape<T>, x: Var, mode: Mode) -> Result<Trace> {
        let s = g.shape(x).to_vec();
        if s.len() < 2 || s[1] != self.input_channels {
            return Err(Error::in_layer("input")(Error::shape(
                "input channels",
                &[self.input_channels],
                &s[1.min(s.len())..],
            )));
        }
        let train = mode == Mode::Train;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                g.input(
                    p.tensor.shape().to_vec(),
                    p.tensor.data().iter().map(|&v| T::of_f32(v)).collect(),
                    train && p.tensor.requires_grad(),
                )
            })
            .collect::<Result<_>>()?;
        let mut f = Fwd {
            net: self,
            g,
            params: &params,
            pc: 0,
            bc: 0,
            train,
            bn_stats: vec![],
            taps: vec![],
        };
        let mut cur = x;
        let mut open = false;
        for layer in &self.layers {
            match layer {
                LayerDesc::Conv {
                    name,
                    stride,
                    pad,
                    bits,
                    fat,
                    ..
                } => {
                    cur = f.conv(name, cur, *stride, *pad, *bits, *fat)?;
                    f.taps.push(Tap {
                        layer: name.clone(),
                        pre: cur,
                        post: cur,
                    });
                    open = true;
                }
                LayerDesc::BatchNorm { name, .. } => {
                    cur = f.bn(name, cur)?;
                    if open {
                        f.taps.last_mut().expect("open tap").post = cur;
                    }
                }
                LayerDesc::Activation { kind } => {
                    cur = match kind {
                        Activation::Relu => f.g.relu(cur),
                        Activation::HardTanh => f.g.hardtanh(cur),
                    };
                    if open {
                        f.taps.last_mut().expect("open tap").post = cur;
                    }
                }
                LayerDesc::Residual {
                    name,
                    c_out,
                    stride,
                    bits,
                    fat,
                    ..
                } => {
                    open = false;
                    cur = f.residual(name, cur, *c_out, *stride, *bits, *fat)?;
                }
                LayerDesc::GlobalAvgPool => {
                    open = false;
                    cur = f.g.global_avg_pool(cur).map_err(Error::in_layer("global_avg_pool"))?;
                }
                LayerDesc::Flatten => {
                    open = false;
                    let s = f.g.shape(cur).to_vec();
                    let rest: usize = s[1..].iter().product();
                    cur = f.g.reshape(cur, &[s[0], rest]).map_err(Error::in_layer("flatten"))?;
                }
                LayerDesc::Linear { name, bias, bits, .. } => {
                    open = false;
                    let at = || Error::in_layer(name);
                    let mut w = f.next_param();
                    if *bits != 32 {
                        w = f.g.quantize_ste(w, *bits).map_err(at())?;
                    }
                    let b = bias.then(|| f.next_param());
                    cur = f.g.linear(cur, w, b).map_err(at())?;
                    f.taps.push(Tap {
                        layer: name.clone(),
                        pre: cur,
                        post: cur,
                    });
                }
            }
        }
        let (bn_stats, taps) = (f.bn_stats, f.taps);
        Ok(Trace {
            logits: cur,
            params,
            bn_stats,
            taps,
        })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, s) in stats {
            let m = BN_MOMENTUM;
            for (r, v) in self.buffers[*idx].data.iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.buffers[idx + 1].data.iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Eval-mode logits for a `[B, C, H, W]` tensor.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.leaf(&x.clone().with_requires_grad(false));
        let t = self.forward(&mut g, xv, Mode::Eval)?;
        Ok(g.to_tensor(t.logits))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// The weight actually used by conv layer `name` after FAT and
    /// quantization.
    pub fn effective_weight(&self, layer: &str) -> Result<Tensor> {
        let (w_name, bits, fat) = self
            .conv_settings(layer)
            .ok_or_else(|| Error::invalid(format!("no conv layer named `{layer}`")))?;
        let w = &self.param(&w_name).expect("conv weight").tensor;
        let mut out = w.clone().with_requires_grad(false);
        if fat {
            let logits = &self.param(&format!("{layer}.fat")).expect("fat logits").tensor;
            out = fat::fat_transform(&out, logits)?;
        }
        if bits != 32 {
            out = Tensor::new(out.shape().to_vec(), quant::fake_quantize(out.data(), bits)?)?;
        }
        Ok(out)
    }

    fn conv_settings(&self, layer: &str) -> Option<(String, u32, bool)> {
        for l in &self.layers {
            match l {
                LayerDesc::Conv { name, bits, fat, .. } if name == layer => {
                    return Some((format!("{name}.weight"), *bits, *fat))
                }
                LayerDesc::Residual { name, bits, fat, .. }
                    if layer == format!("{name}.conv1") || layer == format!("{name}.conv2") =>
                {
                    return Some((format!("{layer}.weight"), *bits, *fat))
                }
                _ => {}
            }
        }
        None
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

struct Fwd<'a, T> {
    net: &'a Network,
    g: &'a mut Tape<T>,
    params: &'a [Var],
    pc: usize,
    bc: usize,
    train: bool,
    bn_stats: Vec<(usize, BatchStats)>,
    taps: Vec<Tap>,
}

impl<T: Scalar> Fwd<'_, T> {
    fn next_param(&mut self) -> Var {
        let v = self.params[self.pc];
        self.pc += 1;
        v
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize, bits: u32, fat: bool) -> Result<Var> {
        let at = || Error::in_layer(name);
        let mut w = self.next_param();
        if fat {
            let logits = self.next_param();
            let s = self.g.shape(w).to_vec();
            let rows = self.g.reshape(w, &[s[0], s[1..].iter().product()]).map_err(at())?;
            let gated = self.g.spectral_gain(rows, logits).map_err(at())?;
            w = self.g.reshape(gated, &s).map_err(at())?;
        }
        if bits != 32 {
            w = self.g.quantize_ste(w, bits).map_err(at())?;
        }
        self.g.conv2d(x, w, stride, pad).map_err(at())
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.next_param();
        let beta = self.next_param();
        let idx = self.bc;
        self.bc += 2;
        let at = Error::in_layer(name);
        if self.train {
            let (y, stats) = self.g.batch_norm_train(x, gamma, beta, BN_EPS).map_err(at)?;
            self.bn_stats.push((idx, stats));
            Ok(y)
        } else {
            let (m, v) = (&self.net.buffers[idx].data, &self.net.buffers[idx + 1].data);
            self.g.batch_norm_eval(x, gamma, beta, m, v, BN_EPS).map_err(at)
        }
    }

    fn residual(&mut self, name: &str, x: Var, c_out: usize, stride: usize, bits: u32, fat: bool) -> Result<Var> {
        let conv1 = format!("{name}.conv1");
        let conv2 = format!("{name}.conv2");
        let a = self.conv(&conv1, x, stride, 1, bits, fat)?;
        let b = self.bn(&format!("{name}.bn1"), a)?;
        let h = self.g.relu(b);
        self.taps.push(Tap {
            layer: conv1,
            pre: a,
            post: h,
        });
        let c = self.conv(&conv2, h, 1, 1, bits, fat)?;
        let d = self.bn(&format!("{name}.bn2"), c)?;
        let at = || Error::in_layer(name);
        let sc = self.g.shortcut(x, stride, c_out).map_err(at())?;
        let sum = self.g.add(d, sc).map_err(at())?;
        let out = self.g.relu(sum);
        self.taps.push(Tap {
            layer: conv2,
            pre: c,
            post: out,
        });
        Ok(out)
    }
}
