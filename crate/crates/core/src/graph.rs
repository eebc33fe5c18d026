//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are created in topological order, so
//! [`Tape::backward`] simply walks the tape in reverse, visiting each node
//! once. A tape can be differentiated a single time; afterwards it is marked
//! consumed and a second call fails.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier;
use crate::nn::quant;
use crate::par;
use crate::scalar::Scalar;
use crate::spectral;
use crate::tensor::{numel, Tensor};

/// The `f32` tape used everywhere outside gradient checking.
pub type Graph = Tape<f32>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the value folded into running estimates.
    pub var: Vec<f32>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    HardTanh(Var),
    GlobalAvgPool(Var),
    Shortcut {
        x: Var,
        stride: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    SoftBce {
        logits: Var,
        targets: Vec<T>,
    },
    KlDiv {
        logits: Var,
        probs: Vec<T>,
        reference: Vec<T>,
    },
    Margin {
        logits: Var,
        /// (other_class, true_class) for rows outside the clamp.
        active: Vec<Option<(usize, usize)>>,
    },
    QuantizeSte(Var),
    SpectralGain {
        w: Var,
        logits: Var,
        spectra: Vec<Complex64>,
        mask: Vec<f64>,
    },
    LowPass {
        x: Var,
        degree: usize,
        pass: Vec<bool>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss or does
    /// not require gradients.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled to `len` when unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }
}

const GRAD_GROUP: usize = 8;

fn cast<T: Scalar>(n: usize) -> T {
    T::of(n as f64)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let data = n.value.iter().map(|x| x.as_f32()).collect();
        Tensor::new(n.shape.clone(), data).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t` as a leaf; it tracks gradients iff `t` does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push(t.shape().to_vec(), data, Op::Leaf, t.requires_grad())
    }

    /// Records a leaf from raw parts, taking ownership of the buffer.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("input", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let s = T::of_f32(s);
        let v = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n: T = cast(self.value(a).len().max(1));
        let s = self.value(a).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", shape, self.shape(a)));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, n, k, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x [B, in]`, `w [out, in]`, optional `b [out]` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", &sw, &sx));
        }
        let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear bias", &[fout], self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); batch * fout];
        T::gemm(
            batch,
            fout,
            fin,
            self.value(x),
            false,
            self.value(w),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(vec![batch, fout], out, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution without bias: `x [B, C_in, H, W]`, `w [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sw, &sx));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape("conv2d input channels", &[sw[1]], &[sx[1]]));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::invalid(format!(
                "conv2d: kernel {} with pad {pad} stride {stride} does not fit input {:?}",
                sw[2], sx
            )));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kernel: sw[2],
            stride,
            pad,
            h_out: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            w_out: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let out = conv_forward(&geom, self.value(x), self.value(w));
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            vec![geom.batch, geom.c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    /// Batch norm with batch statistics over every axis but the channel axis 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let (c, groups, inner) = self.bn_layout(x, gamma, beta)?;
        let xs = self.value(x);
        let count = groups * inner;
        let n: T = cast(count);
        let mut mean = vec![T::zero(); c];
        let mut var_b = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for g in 0..groups {
                let base = (g * c + ch) * inner;
                s += xs[base..base + inner].iter().copied().sum::<T>();
            }
            let m = s / n;
            let mut q = T::zero();
            for g in 0..groups {
                let base = (g * c + ch) * inner;
                q += xs[base..base + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            mean[ch] = m;
            var_b[ch] = q / n;
        }
        let eps = T::of_f32(eps);
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for g in 0..groups {
            for ch in 0..c {
                let base = (g * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gm[ch] * h + bt[ch];
                }
            }
        }
        let unbias = if count > 1 { n / cast(count - 1) } else { T::one() };
        let stats = BatchStats {
            mean: mean.iter().map(|v| v.as_f32()).collect(),
            var: var_b.iter().map(|&v| (v * unbias).as_f32()).collect(),
        };
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            shape,
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (c, groups, inner) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm running stats", &[c], &[running_mean.len()]));
        }
        let mean: Vec<T> = running_mean.iter().map(|&v| T::of_f32(v)).collect();
        let eps = T::of_f32(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (T::of_f32(v) + eps).sqrt())
            .collect();
        let xs = self.value(x);
        let (gm, bt) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xs.len()];
        for g in 0..groups {
            for ch in 0..c {
                let base = (g * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = gm[ch] * (xs[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", &[0, 0], s));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm affine", &[c], self.shape(gamma)));
        }
        Ok((c, s[0], s[2..].iter().product()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), rg)
    }

    pub fn hardtanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.max(-T::one()).min(T::one())).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::HardTanh(a), rg)
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &[0, 0, 0, 0], &s));
        }
        let inner = s[2] * s[3];
        let n: T = cast(inner);
        let v = self
            .value(a)
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[0], s[1]], v, Op::GlobalAvgPool(a), rg))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride`
    /// followed by zero channels appended up to `c_out`.
    pub fn shortcut(&mut self, a: Var, stride: usize, c_out: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || c_out < s[1] || stride == 0 {
            return Err(Error::shape("shortcut", &[s[0], c_out], &s));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let x = self.value(a);
        let mut out = vec![T::zero(); b * c_out * ho * wo];
        for bi in 0..b {
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        out[((bi * c_out + ch) * ho + i) * wo + j] =
                            x[((bi * c + ch) * h + i * stride) * w + j * stride];
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![b, c_out, ho, wo], out, Op::Shortcut { x: a, stride }, rg))
    }

    fn check_logits(&self, logits: Var, rows: usize, ctx: &str) -> Result<(usize, usize)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != rows {
            return Err(Error::shape(ctx, &[rows, 0], s));
        }
        Ok((s[0], s[1]))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.check_logits(logits, labels.len(), "cross_entropy")?;
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let z = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[i]];
        }
        let loss = if b > 0 { total / cast(b) } else { T::zero() };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over batch and classes of binary cross-entropy between
    /// `sigmoid(logits)` and `targets`.
    pub fn soft_bce(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return Err(Error::shape("soft_bce", self.shape(logits), &[targets.len()]));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::of_f32(t)).collect();
        let z = self.value(logits);
        let n: T = cast(z.len().max(1));
        let total: T = z
            .iter()
            .zip(&targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![], vec![total / n], Op::SoftBce { logits, targets }, rg))
    }

    /// `sum_b KL(reference_b || softmax(logits_b))`; the reference rows are
    /// constants.
    pub fn kl_from_reference(&mut self, logits: Var, reference: &[f32]) -> Result<Var> {
        let rows = self.shape(logits).first().copied().unwrap_or(0);
        let (b, k) = self.check_logits(logits, rows, "kl_from_reference")?;
        if reference.len() != b * k {
            return Err(Error::shape("kl_from_reference", &[b, k], &[reference.len()]));
        }
        let reference: Vec<T> = reference.iter().map(|&p| T::of_f32(p)).collect();
        let z = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                let logq = row[j] - lse;
                probs[i * k + j] = logq.exp();
                let p = reference[i * k + j];
                if p > T::zero() {
                    total += p * (p.ln() - logq);
                }
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![total],
            Op::KlDiv {
                logits,
                probs,
                reference,
            },
            rg,
        ))
    }

    /// `sum_b max(max_{i != y} z_i - z_y, -kappa)`. Rows sitting at the clamp
    /// contribute zero gradient; ties go to the lowest class index.
    pub fn margin_loss(&mut self, logits: Var, labels: &[usize], kappa: f32) -> Result<Var> {
        let (b, k) = self.check_logits(logits, labels.len(), "margin_loss")?;
        if k < 2 {
            return Err(Error::invalid("margin loss needs at least two classes"));
        }
        let floor = -T::of_f32(kappa);
        let z = self.value(logits);
        let mut total = T::zero();
        let mut active = Vec::with_capacity(b);
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let y = labels[i];
            if y >= k {
                return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
            }
            let mut other = usize::MAX;
            let mut best = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if j != y && v > best {
                    other = j;
                    best = v;
                }
            }
            let m = best - row[y];
            if m > floor {
                total += m;
                active.push(Some((other, y)));
            } else {
                total += floor;
                active.push(None);
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![], vec![total], Op::Margin { logits, active }, rg))
    }

    /// Symmetric uniform fake quantization with a straight-through gradient.
    pub fn quantize_ste(&mut self, w: Var, bits: u32) -> Result<Var> {
        let q = quant::fake_quantize(self.value(w), bits)?;
        let rg = self.rg(&[w]);
        Ok(self.push(self.shape(w).to_vec(), q, Op::QuantizeSte(w), rg))
    }

    /// Row-wise frequency gate: for `w [rows, n]` and `logits [n]`, returns
    /// `Re(IDFT(DFT(row) * sigmoid(logits)))` for each row.
    pub fn spectral_gain(&mut self, w: Var, logits: Var) -> Result<Var> {
        let s = self.shape(w).to_vec();
        if s.len() != 2 || self.shape(logits) != [s[1]] {
            return Err(Error::shape(
                "spectral_gain mask",
                &[s.get(1).copied().unwrap_or(0)],
                self.shape(logits),
            ));
        }
        let n = s[1];
        let mask: Vec<f64> = self.value(logits).iter().map(|&l| sigmoid64(l.as_f64())).collect();
        let sym = symmetrize(&mask);
        let mut spectra: Vec<Complex64> = self.value(w).iter().map(|&v| Complex64::new(v.as_f64(), 0.0)).collect();
        fourier::fft_rows(&mut spectra, n, false);
        let mut out = spectra.clone();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&sym).for_each(|(c, m)| *c *= *m);
        }
        fourier::fft_rows(&mut out, n, true);
        let value = out.iter().map(|c| T::of(c.re)).collect();
        let rg = self.rg(&[w, logits]);
        Ok(self.push(
            s,
            value,
            Op::SpectralGain {
                w,
                logits,
                spectra,
                mask,
            },
            rg,
        ))
    }

    /// Ideal low-pass filter of degree `degree` on `[B, C, H, W]` images,
    /// clamped to `[0, 1]`.
    pub fn low_pass(&mut self, x: Var, degree: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("low_pass", &[0, 0, 0, 0], &s));
        }
        spectral::check_degree(degree, s[2], s[3])?;
        let plane = s[2] * s[3];
        let mut raw = vec![T::zero(); self.value(x).len()];
        let src = self.value(x);
        par::for_each_chunk_mut(&mut raw, plane, |i, out| {
            let p = spectral::low_pass_plane(&src[i * plane..(i + 1) * plane], s[2], s[3], degree);
            out.iter_mut().zip(p).for_each(|(o, v)| *o = T::of(v));
        });
        let pass = raw.iter().map(|&v| v >= T::zero() && v <= T::one()).collect();
        let value = raw.iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(s, value, Op::LowPass { x, degree, pass }, rg))
    }

    /// Which side of every non-differentiable point each recorded element sits
    /// on (relu and hardtanh inputs, low-pass clamping). Two evaluations with
    /// equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).iter().map(|&x| x > T::zero())),
                Op::HardTanh(a) => out.extend(self.value(*a).iter().flat_map(|&x| [x >= -T::one(), x <= T::one()])),
                Op::LowPass { pass, .. } => out.extend_from_slice(pass),
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip(g, vb, |x, y| x * y));
                self.acc(grads, *b, || zip(g, va, |x, y| x * y));
            }
            Op::Scale(a, s) => self.acc(grads, *a, || g.iter().map(|&v| v * *s).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, || vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g[0] / cast(n.max(1));
                self.acc(grads, *a, || vec![v; n]);
            }
            Op::Reshape(a) => self.acc(grads, *a, || g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                self.acc(grads, *a, || {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, k, n, g, false, self.value(*b), true, T::zero(), &mut da);
                    da
                });
                self.acc(grads, *b, || {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, n, m, self.value(*a), true, g, false, T::zero(), &mut db);
                    db
                });
            }
            Op::Linear { x, w, b } => {
                let (batch, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                self.acc(grads, *x, || {
                    let mut dx = vec![T::zero(); batch * fin];
                    T::gemm(batch, fin, fout, g, false, self.value(*w), false, T::zero(), &mut dx);
                    dx
                });
                self.acc(grads, *w, || {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, fin, batch, g, true, self.value(*x), false, T::zero(), &mut dw);
                    dw
                });
                if let Some(b) = b {
                    self.acc(grads, *b, || {
                        let mut db = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        db
                    });
                }
            }
            Op::Conv2d { x, w, geom } => {
                self.acc(grads, *x, || conv_backward_input(geom, g, self.value(*w)));
                self.acc(grads, *w, || conv_backward_weight(geom, g, self.value(*x)));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = &node.shape;
                let (c, groups, inner) = (s[1], s[0], s[2..].iter().product::<usize>());
                let count: T = cast(groups * inner);
                let gm = self.value(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for gi in 0..groups {
                    for ch in 0..c {
                        let base = (gi * c + ch) * inner;
                        for idx in base..base + inner {
                            sum_dy[ch] += g[idx];
                            sum_dy_xhat[ch] += g[idx] * xhat[idx];
                        }
                    }
                }
                self.acc(grads, *x, || {
                    let mut dx = vec![T::zero(); g.len()];
                    for gi in 0..groups {
                        for ch in 0..c {
                            let base = (gi * c + ch) * inner;
                            let k = gm[ch] * inv_std[ch] / count;
                            for idx in base..base + inner {
                                dx[idx] = k * (count * g[idx] - sum_dy[ch] - xhat[idx] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    dx
                });
                self.acc(grads, *gamma, || sum_dy_xhat.clone());
                self.acc(grads, *beta, || sum_dy.clone());
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = &node.shape;
                let (c, groups, inner) = (s[1], s[0], s[2..].iter().product::<usize>());
                let gm = self.value(*gamma);
                let xs = self.value(*x);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for gi in 0..groups {
                    for ch in 0..c {
                        let base = (gi * c + ch) * inner;
                        for idx in base..base + inner {
                            sum_dy[ch] += g[idx];
                            sum_dy_xhat[ch] += g[idx] * (xs[idx] - mean[ch]) * inv_std[ch];
                            dx[idx] = g[idx] * gm[ch] * inv_std[ch];
                        }
                    }
                }
                self.acc(grads, *x, || dx);
                self.acc(grads, *gamma, || sum_dy_xhat);
                self.acc(grads, *beta, || sum_dy);
            }
            Op::Relu(a) => {
                let v = self.value(*a);
                self.acc(grads, *a, || {
                    zip(g, v, |d, x| if x > T::zero() { d } else { T::zero() })
                });
            }
            Op::HardTanh(a) => {
                let v = self.value(*a);
                self.acc(grads, *a, || {
                    zip(g, v, |d, x| if x >= -T::one() && x <= T::one() { d } else { T::zero() })
                });
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let inner = s[2] * s[3];
                let n: T = cast(inner);
                self.acc(grads, *a, || {
                    g.iter().flat_map(|&d| std::iter::repeat_n(d / n, inner)).collect()
                });
            }
            Op::Shortcut { x, stride } => {
                let s = self.shape(*x);
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (c_out, ho, wo) = (node.shape[1], node.shape[2], node.shape[3]);
                self.acc(grads, *x, || {
                    let mut dx = vec![T::zero(); b * c * h * w];
                    for bi in 0..b {
                        for ch in 0..c {
                            for i in 0..ho {
                                for j in 0..wo {
                                    dx[((bi * c + ch) * h + i * stride) * w + j * stride] +=
                                        g[((bi * c_out + ch) * ho + i) * wo + j];
                                }
                            }
                        }
                    }
                    dx
                });
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / cast(labels.len().max(1));
                self.acc(grads, *logits, || {
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * k + y] -= scale;
                    }
                    d
                });
            }
            Op::SoftBce { logits, targets } => {
                let z = self.value(*logits);
                let scale = g[0] / cast(z.len().max(1));
                self.acc(grads, *logits, || zip(z, targets, |x, t| (sigmoid(x) - t) * scale));
            }
            Op::KlDiv {
                logits,
                probs,
                reference,
            } => {
                self.acc(grads, *logits, || zip(probs, reference, |q, p| (q - p) * g[0]));
            }
            Op::Margin { logits, active } => {
                let k = self.shape(*logits)[1];
                self.acc(grads, *logits, || {
                    let mut d = vec![T::zero(); active.len() * k];
                    for (i, a) in active.iter().enumerate() {
                        if let Some((other, y)) = a {
                            d[i * k + other] += g[0];
                            d[i * k + y] -= g[0];
                        }
                    }
                    d
                });
            }
            Op::QuantizeSte(w) => self.acc(grads, *w, || g.to_vec()),
            Op::SpectralGain {
                w,
                logits,
                spectra,
                mask,
            } => {
                let n = mask.len();
                let mut gs: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v.as_f64(), 0.0)).collect();
                fourier::fft_rows(&mut gs, n, false);
                if self.nodes[logits.0].requires_grad {
                    // For real rows the per-bin sensitivity is already even in
                    // k, so it equals its mirror average.
                    let mut dm = vec![0.0f64; n];
                    for (grow, wrow) in gs.chunks(n).zip(spectra.chunks(n)) {
                        for k in 0..n {
                            dm[k] += (wrow[k] * grow[k].conj()).re / n as f64;
                        }
                    }
                    let dl = dm.iter().zip(mask).map(|(d, m)| T::of(d * m * (1.0 - m))).collect();
                    self.acc(grads, *logits, || dl);
                }
                if self.nodes[w.0].requires_grad {
                    let sym = symmetrize(mask);
                    for row in gs.chunks_mut(n) {
                        row.iter_mut().zip(&sym).for_each(|(c, m)| *c *= *m);
                    }
                    fourier::fft_rows(&mut gs, n, true);
                    self.acc(grads, *w, || gs.iter().map(|c| T::of(c.re)).collect());
                }
            }
            Op::LowPass { x, degree, pass } => {
                let s = &node.shape;
                let (h, w) = (s[2], s[3]);
                let plane = h * w;
                let masked: Vec<T> = g
                    .iter()
                    .zip(pass)
                    .map(|(&d, &p)| if p { d } else { T::zero() })
                    .collect();
                self.acc(grads, *x, || {
                    let mut dx = vec![T::zero(); masked.len()];
                    par::for_each_chunk_mut(&mut dx, plane, |i, out| {
                        let p = spectral::low_pass_plane(&masked[i * plane..(i + 1) * plane], h, w, *degree);
                        out.iter_mut().zip(p).for_each(|(o, v)| *o = T::of(v));
                    });
                    dx
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let d = f();
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, &x)| *e += x),
            slot @ None => *slot = Some(d),
        }
    }
}

fn zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn sigmoid64(x: f64) -> f64 {
    sigmoid(x)
}

/// Averages each bin with its mirror `(n - k) % n`. Gating a real signal's
/// spectrum by the result yields an exactly real inverse, identical to taking
/// the real part after gating with the raw mask.
pub(crate) fn symmetrize(mask: &[f64]) -> Vec<f64> {
    let n = mask.len();
    (0..n).map(|k| 0.5 * (mask[k] + mask[(n - k) % n])).collect()
}

fn im2col<T: Scalar>(geom: &ConvGeom, x: &[T], col: &mut [T]) {
    let ConvGeom {
        c_in,
        h,
        w,
        kernel,
        stride,
        pad,
        h_out,
        w_out,
        ..
    } = *geom;
    let p = h_out * w_out;
    for ci in 0..c_in {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..h_out {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oh * w_out..(oh + 1) * w_out];
                    if ih < 0 || ih >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *v = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(geom: &ConvGeom, col: &[T], dx: &mut [T]) {
    let ConvGeom {
        c_in,
        h,
        w,
        kernel,
        stride,
        pad,
        h_out,
        w_out,
        ..
    } = *geom;
    let p = h_out * w_out;
    for ci in 0..c_in {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..h_out {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ih as usize) * w;
                    for ow in 0..w_out {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dx[base + iw as usize] += src[oh * w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (geom.col_rows(), geom.col_cols());
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * p;
    let mut out = vec![T::zero(); geom.batch * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |b, dst| {
        let mut col = vec![T::zero(); k * p];
        im2col(geom, &x[b * in_len..(b + 1) * in_len], &mut col);
        T::gemm(geom.c_out, p, k, w, false, &col, false, T::zero(), dst);
    });
    out
}

fn conv_backward_input<T: Scalar>(geom: &ConvGeom, g: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (geom.col_rows(), geom.col_cols());
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * p;
    let mut dx = vec![T::zero(); geom.batch * in_len];
    par::for_each_chunk_mut(&mut dx, in_len, |b, dst| {
        let mut dcol = vec![T::zero(); k * p];
        T::gemm(
            k,
            p,
            geom.c_out,
            w,
            true,
            &g[b * out_len..(b + 1) * out_len],
            false,
            T::zero(),
            &mut dcol,
        );
        col2im(geom, &dcol, dst);
    });
    dx
}

/// Weight gradient summed over fixed groups of samples, then across groups in
/// order, so the result does not depend on the number of worker threads.
fn conv_backward_weight<T: Scalar>(geom: &ConvGeom, g: &[T], x: &[T]) -> Vec<T> {
    let (k, p) = (geom.col_rows(), geom.col_cols());
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * p;
    let groups = geom.batch.div_ceil(GRAD_GROUP);
    let partials = par::map_indexed(groups, |gi| {
        let mut dw = vec![T::zero(); geom.c_out * k];
        let mut col = vec![T::zero(); k * p];
        let end = ((gi + 1) * GRAD_GROUP).min(geom.batch);
        for b in gi * GRAD_GROUP..end {
            im2col(geom, &x[b * in_len..(b + 1) * in_len], &mut col);
            T::gemm(
                geom.c_out,
                k,
                p,
                &g[b * out_len..(b + 1) * out_len],
                false,
                &col,
                true,
                T::one(),
                &mut dw,
            );
        }
        dw
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![T::zero(); geom.c_out * k]);
    for part in iter {
        total.iter_mut().zip(&part).for_each(|(t, &v)| *t += v);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32], rg: bool) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
            .unwrap()
            .with_requires_grad(rg)
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, -2.0, 0.5], false));
        let w = g.leaf(&t(&[3], &[0.3, 0.1, 0.2], true));
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn uniform_logits_ce_gradient() {
        let k = 4;
        let mut g = Graph::new();
        let z = g.leaf(&t(&[1, k], &[0.7; 4], true));
        let l = g.cross_entropy(z, &[2]).unwrap();
        assert!((g.value(l)[0] - (k as f32).ln()).abs() < 1e-6);
        let grads = g.backward(l).unwrap();
        let d = grads.get(z).unwrap();
        for (j, v) in d.iter().enumerate() {
            let expect = 0.25 - if j == 2 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn second_backward_fails() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0], true));
        let l = g.sum(a);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0], true));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0], true));
        let b = g.leaf(&t(&[2], &[3.0, 4.0], true));
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_conv_copies_input() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0], false));
        let w = g.leaf(&t(&[1, 1, 1, 1], &[1.0], false));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 3, 8, 8]));
        let w = g.leaf(&Tensor::zeros(&[5, 3, 3, 3]));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 4, 4]);
        let bad = g.leaf(&Tensor::zeros(&[5, 4, 3, 3]));
        assert!(g.conv2d(x, bad, 1, 1).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x: Vec<f32> = (0..2 * 2 * 5 * 5).map(|i| ((i * 7 % 11) as f32) / 11.0 - 0.5).collect();
        let w: Vec<f32> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5 % 13) as f32) / 13.0 - 0.5).collect();
        let mut g = Graph::new();
        let xv = g.leaf(&t(&[2, 2, 5, 5], &x, false));
        let wv = g.leaf(&t(&[3, 2, 3, 3], &w, false));
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let (ho, wo) = (3, 3);
        for b in 0..2 {
            for co in 0..3 {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (i * 2 + ki) as isize - 1;
                                    let iw = (j * 2 + kj) as isize - 1;
                                    if (0..5).contains(&ih) && (0..5).contains(&iw) {
                                        s += x[((b * 2 + ci) * 5 + ih as usize) * 5 + iw as usize]
                                            * w[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = g.value(y)[((b * 3 + co) * ho + i) * wo + j];
                        assert!((got - s).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn margin_loss_clamp_and_sign() {
        let mut g = Graph::new();
        let z = g.leaf(&t(&[1, 2], &[3.0, 1.0], true));
        let l = g.margin_loss(z, &[0], 0.0).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap(), &[0.0, 0.0]);

        let mut g = Graph::new();
        let z = g.leaf(&t(&[1, 2], &[1.0, 3.0], true));
        let l = g.margin_loss(z, &[0], 0.0).unwrap();
        assert_eq!(g.value(l)[0], 2.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn soft_bce_symmetric_point() {
        let mut g = Graph::new();
        let z = g.leaf(&t(&[2, 3], &[0.0; 6], true));
        let l = g.soft_bce(z, &[0.5; 6]).unwrap();
        assert!((g.value(l)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn shortcut_subsamples_and_pads() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0], true));
        let y = g.shortcut(x, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 1, 1]);
        assert_eq!(g.value(y), &[1.0, 0.0]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetrized_mask_is_even() {
        let m = symmetrize(&[1.0, 0.2, 0.4, 0.6]);
        assert_eq!(m, vec![1.0, 0.4, 0.4, 0.4]);
    }

    #[test]
    fn double_tape_agrees_with_single() {
        let x = [0.3f32, -0.7, 1.2, 0.05];
        let single = {
            let mut g = Graph::new();
            let v = g.leaf(&t(&[2, 2], &x, true));
            let h = g.hardtanh(v);
            let l = g.cross_entropy(h, &[0, 1]).unwrap();
            g.backward(l).unwrap().get(v).unwrap().to_vec()
        };
        let mut g = Tape::<f64>::new();
        let v = g.leaf(&t(&[2, 2], &x, true));
        let h = g.hardtanh(v);
        let l = g.cross_entropy(h, &[0, 1]).unwrap();
        let grads = g.backward(l).unwrap();
        for (a, b) in single.iter().zip(grads.get(v).unwrap()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
