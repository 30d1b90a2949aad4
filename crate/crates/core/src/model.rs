//! From-scratch differentiable classifiers over flat parameter vectors.
//!
//! An [`Architecture`] is an MLP with ReLU hidden layers and a softmax
//! cross-entropy head; an empty hidden list is multinomial logistic
//! regression. Parameters live in one flat `Vec<f64>`: for each layer, the
//! `out x in` weight matrix row-major, then the bias. All ops here are pure
//! functions of `(arch, params, data)`, so concurrent evaluation on shared
//! snapshots is safe.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Batch, Dataset};
use crate::rng::{derive, rng_from, TAG_INIT};
use crate::vecops;

/// Rows per chunk for streaming/parallel passes over a dataset.
const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    BadArchitecture(&'static str),
    #[error("parameter vector has length {got}, architecture needs {expected}")]
    BadParamLen { got: usize, expected: usize },
    #[error("batch is inconsistent with the architecture: {0}")]
    BadBatch(&'static str),
    #[error("non-finite values encountered during the forward pass")]
    NonFinite,
    #[error("gradient requested over an empty dataset")]
    EmptyData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        }
    }

    /// Multinomial logistic regression (no hidden layers).
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self::mlp(input_dim, vec![], num_classes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim < 1 {
            return Err(ModelError::BadArchitecture("input_dim must be >= 1"));
        }
        if self.num_classes < 1 {
            return Err(ModelError::BadArchitecture("num_classes must be >= 1"));
        }
        if self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(ModelError::BadArchitecture("hidden widths must be >= 1"));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push(LayerLayout {
                fan_in,
                fan_out,
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .sum()
    }
}

type LayerViews<'a> = Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)>;

fn layer_views<'a>(arch: &Architecture, params: &'a [f64]) -> Result<LayerViews<'a>, ModelError> {
    if params.len() != arch.param_count() {
        return Err(ModelError::BadParamLen {
            got: params.len(),
            expected: arch.param_count(),
        });
    }
    Ok(arch
        .layout()
        .iter()
        .map(|l| {
            let w = ArrayView2::from_shape(
                (l.fan_out, l.fan_in),
                &params[l.w_offset..l.w_offset + l.fan_in * l.fan_out],
            )
            .expect("layout is consistent");
            let b = ArrayView1::from(&params[l.b_offset..l.b_offset + l.fan_out]);
            (w, b)
        })
        .collect())
}

/// Glorot-uniform weights (`s = sqrt(6 / (fan_in + fan_out))`), zero biases.
/// Deterministic in `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(derive(seed, &[TAG_INIT]));
    let mut params = vec![0.0; arch.param_count()];
    for l in arch.layout() {
        let s = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        for w in params[l.w_offset..l.w_offset + l.fan_in * l.fan_out].iter_mut() {
            *w = rng.gen_range(-s..s);
        }
        // biases stay zero
    }
    params
}

fn check_batch(arch: &Architecture, batch: &Batch) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::BadBatch("empty batch"));
    }
    if batch.features.ncols() != arch.input_dim {
        return Err(ModelError::BadBatch("feature width != input_dim"));
    }
    if batch.labels.iter().any(|&l| l >= arch.num_classes) {
        return Err(ModelError::BadBatch("label out of range"));
    }
    Ok(())
}

struct ForwardCache {
    /// Pre-activations per layer; the last entry holds the logits.
    zs: Vec<Array2<f64>>,
    /// Post-activation inputs per layer; `acts[0]` is the batch itself.
    acts: Vec<Array2<f64>>,
}

fn forward(
    layers: &[(ArrayView2<f64>, ArrayView1<f64>)],
    x: &Array2<f64>,
) -> Result<ForwardCache, ModelError> {
    let n_layers = layers.len();
    let mut zs = Vec::with_capacity(n_layers);
    let mut acts = Vec::with_capacity(n_layers);
    acts.push(x.clone());
    for (i, (w, b)) in layers.iter().enumerate() {
        let z = acts[i].dot(&w.t()) + b;
        if i + 1 < n_layers {
            acts.push(z.mapv(|v| v.max(0.0)));
        }
        zs.push(z);
    }
    if !zs[n_layers - 1].iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    Ok(ForwardCache { zs, acts })
}

/// Per-row `logsumexp` with max subtraction.
fn logsumexp_rows(logits: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(logits.nrows());
    for (i, row) in logits.outer_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out[i] = m + s.ln();
    }
    out
}

/// Mean softmax cross-entropy and its exact gradient w.r.t. the flat
/// parameter vector.
pub fn loss_and_grad(
    arch: &Architecture,
    params: &[f64],
    batch: &Batch,
) -> Result<(f64, Vec<f64>), ModelError> {
    check_batch(arch, batch)?;
    let layers = layer_views(arch, params)?;
    let cache = forward(&layers, &batch.features)?;
    let n = batch.len();
    let n_layers = layers.len();

    let logits = &cache.zs[n_layers - 1];
    let lse = logsumexp_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        loss += lse[i] - logits[(i, y)];
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite);
    }

    // dL/dlogits = (softmax - onehot) / n
    let mut dz = Array2::zeros(logits.raw_dim());
    for i in 0..n {
        for j in 0..arch.num_classes {
            dz[(i, j)] = (logits[(i, j)] - lse[i]).exp();
        }
        dz[(i, batch.labels[i])] -= 1.0;
    }
    dz.mapv_inplace(|v| v / n as f64);

    let mut grad = vec![0.0; params.len()];
    let layout = arch.layout();
    for l in (0..n_layers).rev() {
        let dw = dz.t().dot(&cache.acts[l]);
        let db = dz.sum_axis(Axis(0));
        let ll = &layout[l];
        grad[ll.w_offset..ll.w_offset + ll.fan_in * ll.fan_out]
            .copy_from_slice(dw.as_slice().expect("dot output is standard layout"));
        grad[ll.b_offset..ll.b_offset + ll.fan_out]
            .copy_from_slice(db.as_slice().expect("sum_axis output is contiguous"));
        if l > 0 {
            let mut da = dz.dot(&layers[l].0);
            da.zip_mut_with(&cache.zs[l - 1], |a, &z| {
                if z <= 0.0 {
                    *a = 0.0;
                }
            });
            dz = da;
        }
    }
    Ok((loss, grad))
}

/// Loss and gradient over an index subset of a dataset, streamed in chunks
/// so memory stays `O(d + chunk)`. Equals the single-batch computation up to
/// floating-point reassociation.
pub fn full_loss_and_grad(
    arch: &Architecture,
    params: &[f64],
    dataset: &Dataset,
    idx: &[usize],
) -> Result<(f64, Vec<f64>), ModelError> {
    if idx.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let n = idx.len();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for chunk in idx.chunks(CHUNK) {
        let batch = dataset
            .gather(chunk)
            .map_err(|_| ModelError::BadBatch("index out of range"))?;
        let (l, g) = loss_and_grad(arch, params, &batch)?;
        let w = chunk.len() as f64 / n as f64;
        loss += w * l;
        vecops::axpy(&mut grad, w, &g);
    }
    Ok((loss, grad))
}

/// Gradient of the mean loss over `idx`; see [`full_loss_and_grad`].
pub fn full_grad(
    arch: &Architecture,
    params: &[f64],
    dataset: &Dataset,
    idx: &[usize],
) -> Result<Vec<f64>, ModelError> {
    full_loss_and_grad(arch, params, dataset, idx).map(|(_, g)| g)
}

/// Accuracy (argmax with ties broken toward the lowest class index) and mean
/// loss over a dataset. Chunks are evaluated in parallel and reduced in
/// order, so results are bit-stable.
pub fn evaluate(
    arch: &Architecture,
    params: &[f64],
    dataset: &Dataset,
) -> Result<(f64, f64), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let layers = layer_views(arch, params)?;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(CHUNK).collect();
    let partials: Vec<Result<(usize, f64), ModelError>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch = dataset
                .gather(chunk)
                .map_err(|_| ModelError::BadBatch("index out of range"))?;
            check_batch(arch, &batch)?;
            let cache = forward(&layers, &batch.features)?;
            let logits = &cache.zs[layers.len() - 1];
            let lse = logsumexp_rows(logits);
            let mut correct = 0;
            let mut loss_sum = 0.0;
            for (i, &y) in batch.labels.iter().enumerate() {
                let row = logits.row(i);
                let mut best = 0;
                for j in 1..arch.num_classes {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == y {
                    correct += 1;
                }
                loss_sum += lse[i] - logits[(i, y)];
            }
            Ok((correct, loss_sum))
        })
        .collect();
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for p in partials {
        let (c, l) = p?;
        correct += c;
        loss_sum += l;
    }
    let n = dataset.len() as f64;
    let loss = loss_sum / n;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok((correct as f64 / n, loss))
}
