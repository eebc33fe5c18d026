//! Linear centered kernel alignment between layer activations.

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::dgemm;
use crate::nn::{Mode, Network};
use crate::par;
use crate::tensor::Tensor;

/// `m` examples by `p` flattened features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ActivationMatrix {
    pub fn new(layer: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let layer = layer.into();
        if rows < 2 || cols == 0 || data.len() != rows * cols {
            return Err(Error::in_layer(&layer)(Error::shape(
                "activation matrix (need at least 2 rows)",
                &[rows.max(2), cols.max(1)],
                &[rows, data.len().checked_div(rows).unwrap_or(0)],
            )));
        }
        Ok(Self {
            layer,
            rows,
            cols,
            data,
        })
    }

    /// Flattens every dimension after the first.
    pub fn from_tensor(layer: impl Into<String>, t: &Tensor) -> Result<Self> {
        let rows = t.shape().first().copied().unwrap_or(0);
        let cols = t.numel().checked_div(rows).unwrap_or(0);
        Self::new(layer, rows, cols, t.data().iter().map(|&v| v as f64).collect())
    }

    /// Column-centered copy; rejects an all-constant matrix.
    pub fn centered(&self) -> Result<ActivationMatrix> {
        let (m, p) = (self.rows, self.cols);
        let mut mean = vec![0.0; p];
        for row in self.data.chunks(p) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let data: Vec<f64> = self
            .data
            .chunks(p)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, mu)| v - mu))
            .collect();
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = self.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Centering leaves rounding residue of order eps * |x| on constant columns.
        if !norm.is_finite() || norm == 0.0 || norm <= 1e-12 * scale {
            return Err(Error::DegenerateActivation(self.layer.clone()));
        }
        Ok(ActivationMatrix {
            layer: self.layer.clone(),
            rows: m,
            cols: p,
            data,
        })
    }
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_rows(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
    if x.rows != y.rows {
        return Err(Error::shape(
            format!("linear CKA between `{}` and `{}`", x.layer, y.layer),
            &[x.rows],
            &[y.rows],
        ));
    }
    Ok(())
}

/// Feature-space formula `|Y'X|^2 / (|X'X| |Y'Y|)` on centered inputs.
/// Cost grows with the square of the feature counts.
pub fn cka_features(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    check_rows(x, y)?;
    let (x, y) = (x.centered()?, y.centered()?);
    let (m, p, q) = (x.rows, x.cols, y.cols);
    let mut yx = vec![0.0; q * p];
    dgemm(q, p, m, &y.data, true, &x.data, false, 0.0, &mut yx);
    let mut xx = vec![0.0; p * p];
    dgemm(p, p, m, &x.data, true, &x.data, false, 0.0, &mut xx);
    let mut yy = vec![0.0; q * q];
    dgemm(q, q, m, &y.data, true, &y.data, false, 0.0, &mut yy);
    let num = frobenius(&yx);
    Ok(num * num / (frobenius(&xx) * frobenius(&yy)))
}

/// `m x m` Gram matrix of the centered activations.
pub fn centered_gram(x: &ActivationMatrix) -> Result<Vec<f64>> {
    let x = x.centered()?;
    let m = x.rows;
    let mut k = vec![0.0; m * m];
    dgemm(m, m, x.cols, &x.data, false, &x.data, true, 0.0, &mut k);
    Ok(k)
}

fn gram_alignment(k: &[f64], l: &[f64]) -> f64 {
    let dot: f64 = k.iter().zip(l).map(|(a, b)| a * b).sum();
    dot / (frobenius(k) * frobenius(l))
}

/// Example-space formula `<K, L> / (|K| |L|)` with centered Gram matrices.
/// Cost grows with the square of the example count.
pub fn cka_gram(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    check_rows(x, y)?;
    Ok(gram_alignment(&centered_gram(x)?, &centered_gram(y)?))
}

/// Linear CKA, using whichever formulation has the smaller inner products.
pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.rows < x.cols.max(y.cols) {
        cka_gram(x, y)
    } else {
        cka_features(x, y)
    }
}

/// Symmetric `L x L` similarity matrix; row 0 is the shallowest layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaMatrix {
    pub layers: Vec<String>,
    pub values: Vec<f64>,
}

impl CkaMatrix {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// Pairwise linear CKA of already captured activations.
    pub fn from_activations(acts: &[ActivationMatrix]) -> Result<CkaMatrix> {
        let n = acts.len();
        if let Some(a) = acts.iter().find(|a| a.rows != acts[0].rows) {
            return Err(Error::shape(
                format!("activation rows of `{}`", a.layer),
                &[acts[0].rows],
                &[a.rows],
            ));
        }
        // Gram matrices once per layer, then one inner product per pair.
        let grams: Vec<Vec<f64>> = par::map_indexed(n, |i| centered_gram(&acts[i]))
            .into_iter()
            .collect::<Result<_>>()?;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let vals = par::map_indexed(pairs.len(), |k| {
            let (i, j) = pairs[k];
            gram_alignment(&grams[i], &grams[j])
        });
        let mut values = vec![0.0; n * n];
        for (&(i, j), v) in pairs.iter().zip(vals) {
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
        Ok(CkaMatrix {
            layers: acts.iter().map(|a| a.layer.clone()).collect(),
            values,
        })
    }
}

/// Which activations feed the similarity map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerFilter {
    /// Layer names in the order they should appear; `None` means every conv
    /// followed by the final linear layer.
    pub layers: Option<Vec<String>>,
    /// Capture raw conv/linear outputs instead of post-activation values.
    pub pre_activation: bool,
}

/// Captures the selected activations of `net` on `batch` (eval mode).
pub fn capture_activations(net: &Network, batch: &ImageBatch, filter: &LayerFilter) -> Result<Vec<ActivationMatrix>> {
    let mut g = Graph::new();
    let x = g.leaf(&batch.images.clone().with_requires_grad(false));
    let trace = net.forward(&mut g, x, Mode::Eval)?;
    let names = filter.layers.clone().unwrap_or_else(|| net.weighted_layer_names());
    names
        .iter()
        .map(|name| {
            let tap = trace
                .tap(name)
                .ok_or_else(|| Error::invalid(format!("no conv or linear layer named `{name}`")))?;
            let v = if filter.pre_activation { tap.pre } else { tap.post };
            ActivationMatrix::from_tensor(name.clone(), &g.to_tensor(v))
        })
        .collect()
}

pub fn cka_matrix(net: &Network, batch: &ImageBatch, filter: &LayerFilter) -> Result<CkaMatrix> {
    CkaMatrix::from_activations(&capture_activations(net, batch, filter)?)
}

/// Mean similarity between the first `ceil(split L)` layers and the last
/// `ceil(split L)` layers.
pub fn shallow_deep_similarity(m: &CkaMatrix, split: f64) -> Result<f64> {
    let l = m.len();
    if l < 2 {
        return Err(Error::invalid("shallow/deep similarity needs at least two layers"));
    }
    if !(split > 0.0 && split <= 1.0) {
        return Err(Error::invalid(format!("split must lie in (0, 1], got {split}")));
    }
    let k = ((split * l as f64).ceil() as usize).clamp(1, l);
    let mut acc = 0.0;
    for i in 0..k {
        for j in l - k..l {
            acc += m.at(i, j);
        }
    }
    Ok(acc / (k * k) as f64)
}
