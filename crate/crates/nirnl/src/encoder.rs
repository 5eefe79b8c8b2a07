//! Modality sub-networks: stacks of affine layers with relu/identity
//! activations mapping raw features into the shared d-dimensional space.
//! Deterministic initialization, exact reverse-mode gradients, and a
//! manifest+blob checkpoint format.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub weight: Matrix<T>, // d_out × d_in
    pub bias: Vec<T>,      // d_out
    pub activation: Activation,
}

/// Ordered layers; adjacent dims chain and the final layer emits the
/// common-space dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Float> EncoderParams<T> {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    /// Total scalar parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Weights then biases, in layer order. Inverse of [`unflatten_like`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
        }
        for l in &self.layers {
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Rebuild parameters with this encoder's shapes from a flat vector.
    pub fn unflatten_like(&self, flat: &[T]) -> Result<EncoderParams<T>> {
        ensure!(
            flat.len() == self.param_count(),
            "flat length {} does not match parameter count {}",
            flat.len(),
            self.param_count()
        );
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut pos = 0;
        for l in &self.layers {
            let len = l.weight.data().len();
            let weight =
                Matrix::from_vec(l.weight.rows(), l.weight.cols(), flat[pos..pos + len].to_vec())?;
            pos += len;
            layers.push(Layer {
                weight,
                bias: vec![T::zero(); l.bias.len()],
                activation: l.activation,
            });
        }
        for l in layers.iter_mut() {
            let len = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        Ok(EncoderParams { layers })
    }
}

impl EncoderParams<f32> {
    pub fn to_f64(&self) -> EncoderParams<f64> {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.to_f64(),
                    bias: l.bias.iter().map(|&b| b as f64).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// Per-layer gradients, same shapes as the parameters they refer to.
#[derive(Debug, Clone)]
pub struct ParamGrads<T = f32> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Float> ParamGrads<T> {
    pub fn zeros_like(params: &EncoderParams<T>) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: params.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    /// Same layout as [`EncoderParams::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for w in &self.weights {
            out.extend_from_slice(w.data());
        }
        for b in &self.biases {
            out.extend_from_slice(b);
        }
        out
    }
}

/// Weights ~ U[−1/√d_in, +1/√d_in], biases zero; hidden layers relu, final
/// layer identity. `dims` lists input, hidden..., output widths.
pub fn init_params(dims: &[usize], rng: &mut Rng) -> Result<EncoderParams<f32>> {
    ensure!(
        dims.len() >= 2,
        "need input and output dims, got {:?}",
        dims
    );
    ensure!(dims.iter().all(|&d| d > 0), "layer dims must be positive, got {:?}", dims);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (d_in, d_out) = (w[0], w[1]);
        let bound = 1.0 / (d_in as f32).sqrt();
        let mut weight = Matrix::zeros(d_out, d_in);
        for v in weight.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        layers.push(Layer {
            weight,
            bias: vec![0.0; d_out],
            activation: Activation::Relu,
        });
    }
    layers.last_mut().unwrap().activation = Activation::Identity;
    Ok(EncoderParams { layers })
}

fn apply_layer<T: Float>(layer: &Layer<T>, input: &Matrix<T>) -> Matrix<T> {
    // z = x Wᵀ + b, then activation
    let mut z = input.matmul_nt(&layer.weight);
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        for (v, &b) in row.iter_mut().zip(&layer.bias) {
            *v = *v + b;
        }
    }
    if layer.activation == Activation::Relu {
        for v in z.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    z
}

/// Row-wise composition of the layers over a batch.
pub fn forward<T: Float>(params: &EncoderParams<T>, batch: &Matrix<T>) -> Result<Matrix<T>> {
    ensure!(
        batch.cols() == params.input_dim(),
        "batch has {} columns, encoder expects {}",
        batch.cols(),
        params.input_dim()
    );
    let mut act = apply_layer(&params.layers[0], batch);
    for layer in &params.layers[1..] {
        act = apply_layer(layer, &act);
    }
    Ok(act)
}

/// Forward pass keeping pre-activations for the backward pass.
fn forward_cached<T: Float>(
    params: &EncoderParams<T>,
    batch: &Matrix<T>,
) -> (Vec<Matrix<T>>, Vec<Matrix<T>>) {
    // pre[l] = z before activation, post[l] = activated output
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post = Vec::with_capacity(params.layers.len());
    let mut input = batch;
    for layer in &params.layers {
        let mut z = input.matmul_nt(&layer.weight);
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (v, &b) in row.iter_mut().zip(&layer.bias) {
                *v = *v + b;
            }
        }
        pre.push(z.clone());
        if layer.activation == Activation::Relu {
            for v in z.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        post.push(z);
        input = post.last().unwrap();
    }
    (pre, post)
}

/// Exact reverse-mode gradients of the forward composition. Returns the
/// parameter gradients and the gradient on the batch.
pub fn backward<T: Float>(
    params: &EncoderParams<T>,
    batch: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<(ParamGrads<T>, Matrix<T>)> {
    ensure!(
        batch.cols() == params.input_dim(),
        "batch has {} columns, encoder expects {}",
        batch.cols(),
        params.input_dim()
    );
    ensure!(
        upstream.rows() == batch.rows() && upstream.cols() == params.output_dim(),
        "upstream is {}x{}, expected {}x{}",
        upstream.rows(),
        upstream.cols(),
        batch.rows(),
        params.output_dim()
    );
    let (pre, post) = forward_cached(params, batch);
    let mut grads = ParamGrads::zeros_like(params);
    let mut g = upstream.clone();
    for l in (0..params.layers.len()).rev() {
        if params.layers[l].activation == Activation::Relu {
            let z = &pre[l];
            for (gv, zv) in g.data_mut().iter_mut().zip(z.data()) {
                if *zv <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        let input = if l == 0 { batch } else { &post[l - 1] };
        grads.weights[l] = g.matmul_tn(input);
        let db = &mut grads.biases[l];
        for r in 0..g.rows() {
            for (acc, &gv) in db.iter_mut().zip(g.row(r)) {
                *acc = *acc + gv;
            }
        }
        g = g.matmul(&params.layers[l].weight);
    }
    Ok((grads, g))
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    d_out: usize,
    d_in: usize,
    activation: Activation,
    weight_offset: usize,
    bias_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    layers: Vec<LayerManifest>,
    total_bytes: usize,
}

/// Write `params.json` (shapes, activations, byte offsets) and `params.f32`
/// (all weights then all biases, layer order, little-endian) into `dir`.
pub fn save_checkpoint(params: &EncoderParams<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = CheckpointManifest {
        layers: Vec::with_capacity(params.layers.len()),
        total_bytes: 0,
    };
    let mut offset = 0usize;
    for l in &params.layers {
        manifest.layers.push(LayerManifest {
            d_out: l.weight.rows(),
            d_in: l.weight.cols(),
            activation: l.activation,
            weight_offset: offset,
            bias_offset: 0, // filled below
        });
        offset += l.weight.data().len() * 4;
    }
    for (m, l) in manifest.layers.iter_mut().zip(&params.layers) {
        m.bias_offset = offset;
        offset += l.bias.len() * 4;
    }
    manifest.total_bytes = offset;

    let mut blob = Vec::with_capacity(offset);
    for l in &params.layers {
        for v in l.weight.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in &params.layers {
        for v in &l.bias {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("params.json"), json)?;
    fs::write(dir.join("params.f32"), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<EncoderParams<f32>> {
    let manifest_path = dir.join("params.json");
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    let blob_path = dir.join("params.f32");
    let blob = fs::read(&blob_path).with_context(|| format!("reading {}", blob_path.display()))?;
    ensure!(
        blob.len() == manifest.total_bytes,
        "{}: expected {} bytes, found {}",
        blob_path.display(),
        manifest.total_bytes,
        blob.len()
    );
    let read_f32s = |offset: usize, count: usize| -> Result<Vec<f32>> {
        let end = offset + count * 4;
        ensure!(end <= blob.len(), "blob segment {}..{} out of range", offset, end);
        Ok(blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for m in &manifest.layers {
        let weight = Matrix::from_vec(m.d_out, m.d_in, read_f32s(m.weight_offset, m.d_out * m.d_in)?)?;
        let bias = read_f32s(m.bias_offset, m.d_out)?;
        ensure!(weight.is_finite(), "checkpoint weight contains non-finite values");
        ensure!(bias.iter().all(|v| v.is_finite()), "checkpoint bias contains non-finite values");
        layers.push(Layer {
            weight,
            bias,
            activation: m.activation,
        });
    }
    ensure!(!layers.is_empty(), "checkpoint has no layers");
    for w in layers.windows(2) {
        ensure!(
            w[1].weight.cols() == w[0].weight.rows(),
            "layer dims do not chain: {} then {}",
            w[0].weight.rows(),
            w[1].weight.cols()
        );
    }
    Ok(EncoderParams { layers })
}
