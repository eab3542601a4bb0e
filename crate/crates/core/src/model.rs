//! A small fully-connected classifier with analytic gradients.
//!
//! Zero or more ReLU hidden layers feed a classification head. The head is
//! either affine (`W h + b`) or cosine: `scale * <w_c, h> / (|w_c| |h|)`
//! with no bias, which decouples logit magnitude from weight-row norm. All
//! parameters live in `f64` and gradients are computed by hand, so the
//! whole model can be checked against finite differences.
//!
//! Checkpoints are a single line of JSON (dims, head, seed, step) followed
//! by the parameters as little-endian 64-bit floats in canonical order
//! (per layer: weights row-major, then bias). Identical parameters always
//! produce identical bytes.

use crate::numerics::LogitMatrix;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Guard for cosine denominators so a zero hidden vector cannot produce NaN.
const COSINE_EPS: f64 = 1e-12;

/// Classification head variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Affine,
    Cosine { scale: f64 },
}

impl Head {
    pub const DEFAULT_COSINE_SCALE: f64 = 16.0;
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weights: Vec<f64>, // out x in, row-major
    bias: Vec<f64>,    // empty for the cosine head layer
    in_dim: usize,
    out_dim: usize,
}

impl Layer {
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = if self.bias.is_empty() { 0.0 } else { self.bias[o] };
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Gradients with the same shape as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<(Vec<f64>, Vec<f64>)>, // (d_weights, d_bias) per layer
}

impl Gradients {
    pub fn zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v *= factor);
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Canonical flat order, matching [`MlpClassifier::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Serialized checkpoint header; field order is the file format.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Vec<usize>,
    head: Head,
    seed: u64,
    step: u64,
}

/// Multi-layer perceptron classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    layers: Vec<Layer>,
    head: Head,
    input_dim: usize,
    class_count: usize,
    init_seed: u64,
}

impl MlpClassifier {
    /// Initializes with uniform fan-in weights: every parameter of a layer
    /// with fan-in `n` is drawn from U(-1/sqrt(n), 1/sqrt(n)).
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        class_count: usize,
        head: Head,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if class_count < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {class_count}"
            )));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dimensions must be positive".into()));
        }
        if let Head::Cosine { scale } = head {
            if !scale.is_finite() || scale <= 0.0 {
                return Err(Error::Config(format!(
                    "cosine scale must be positive and finite, got {scale}"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden_dims {
            layers.push(init_layer(&mut rng, prev, h, true));
            prev = h;
        }
        let head_has_bias = matches!(head, Head::Affine);
        layers.push(init_layer(&mut rng, prev, class_count, head_has_bias));
        Ok(Self {
            layers,
            head,
            input_dim,
            class_count,
            init_seed: seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Layer widths from input to classes.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Appends freshly initialized head rows for new classes; existing
    /// parameters are untouched.
    pub fn expand_classes(&mut self, new_class_count: usize, seed: u64) -> Result<()> {
        if new_class_count <= self.class_count {
            return Err(Error::Config(format!(
                "cannot shrink classes from {} to {new_class_count}",
                self.class_count
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = self.layers.last_mut().expect("model always has a head layer");
        let bound = 1.0 / (head.in_dim as f64).sqrt();
        let extra_rows = new_class_count - self.class_count;
        for _ in 0..extra_rows * head.in_dim {
            head.weights.push(rng.random_range(-bound..bound));
        }
        if !head.bias.is_empty() {
            for _ in 0..extra_rows {
                head.bias.push(rng.random_range(-bound..bound));
            }
        }
        head.out_dim = new_class_count;
        self.class_count = new_class_count;
        Ok(())
    }

    /// Logits for one input row.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// Logits for a batch of rows stored flat (n * input_dim).
    pub fn batch_logits(&self, features: &[f64]) -> Result<LogitMatrix> {
        if features.is_empty() || !features.len().is_multiple_of(self.input_dim) {
            return Err(Error::LengthMismatch {
                context: "batch_logits features",
                expected: self.input_dim,
                got: features.len() % self.input_dim.max(1),
            });
        }
        let n = features.len() / self.input_dim;
        let mut values = Vec::with_capacity(n * self.class_count);
        for row in features.chunks_exact(self.input_dim) {
            values.extend(self.forward(row)?);
        }
        LogitMatrix::from_flat(values, n, self.class_count)
    }

    fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim {
            return Err(Error::LengthMismatch {
                context: "forward input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input"));
        }
        let hidden_count = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(hidden_count);
        let mut post = Vec::with_capacity(hidden_count);
        let mut current = x.to_vec();
        for layer in &self.layers[..hidden_count] {
            let mut z = Vec::new();
            layer.affine(&current, &mut z);
            current = z.iter().map(|&v| v.max(0.0)).collect();
            pre.push(z);
            post.push(current.clone());
        }
        let logits = match self.head {
            Head::Affine => {
                let mut out = Vec::new();
                self.layers[hidden_count].affine(&current, &mut out);
                out
            }
            Head::Cosine { scale } => {
                let head = &self.layers[hidden_count];
                let h_norm = l2_norm(&current);
                (0..head.out_dim)
                    .map(|c| {
                        let row = &head.weights[c * head.in_dim..(c + 1) * head.in_dim];
                        let dot: f64 = row.iter().zip(&current).map(|(w, h)| w * h).sum();
                        scale * dot / (l2_norm(row) * h_norm).max(COSINE_EPS)
                    })
                    .collect()
            }
        };
        Ok(Trace {
            pre,
            post,
            logits,
        })
    }

    /// Fresh zero gradients with the model's shape.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    /// Adds d(upstream . logits)/d(theta) into `grads`, where `upstream` is
    /// the loss gradient with respect to the logits at input `x`.
    pub fn accumulate_backward(
        &self,
        x: &[f64],
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if upstream.len() != self.class_count {
            return Err(Error::LengthMismatch {
                context: "backward upstream",
                expected: self.class_count,
                got: upstream.len(),
            });
        }
        let trace = self.forward_trace(x)?;
        let hidden_count = self.layers.len() - 1;
        let h = if hidden_count == 0 {
            x
        } else {
            &trace.post[hidden_count - 1]
        };

        // Head layer.
        let head = &self.layers[hidden_count];
        let (head_dw, head_db) = &mut grads.layers[hidden_count];
        let mut dh = vec![0.0; head.in_dim];
        match self.head {
            Head::Affine => {
                for c in 0..head.out_dim {
                    let g = upstream[c];
                    let row = &head.weights[c * head.in_dim..(c + 1) * head.in_dim];
                    for i in 0..head.in_dim {
                        head_dw[c * head.in_dim + i] += g * h[i];
                        dh[i] += g * row[i];
                    }
                    head_db[c] += g;
                }
            }
            Head::Cosine { scale } => {
                let h_norm = l2_norm(h);
                for c in 0..head.out_dim {
                    let g = upstream[c];
                    let row = &head.weights[c * head.in_dim..(c + 1) * head.in_dim];
                    let w_norm = l2_norm(row);
                    let dot: f64 = row.iter().zip(h).map(|(w, v)| w * v).sum();
                    let denom = w_norm * h_norm;
                    if denom > COSINE_EPS {
                        // d/dw [s u / (|w||h|)] = s/(|w||h|) (h - u w / |w|^2)
                        let coeff = g * scale / denom;
                        for i in 0..head.in_dim {
                            head_dw[c * head.in_dim + i] +=
                                coeff * (h[i] - dot * row[i] / (w_norm * w_norm));
                            dh[i] += coeff * (row[i] - dot * h[i] / (h_norm * h_norm));
                        }
                    } else {
                        // Degenerate norms: treat the denominator as constant.
                        let coeff = g * scale / COSINE_EPS;
                        for i in 0..head.in_dim {
                            head_dw[c * head.in_dim + i] += coeff * h[i];
                            dh[i] += coeff * row[i];
                        }
                    }
                }
            }
        }

        // Hidden layers, in reverse.
        for l in (0..hidden_count).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { x } else { &trace.post[l - 1] };
            // ReLU: pass gradient only where the pre-activation was positive.
            let dz: Vec<f64> = dh
                .iter()
                .zip(&trace.pre[l])
                .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                .collect();
            let (dw, db) = &mut grads.layers[l];
            let mut dinput = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    dw[o * layer.in_dim + i] += dz[o] * input[i];
                    dinput[i] += dz[o] * row[i];
                }
                db[o] += dz[o];
            }
            dh = dinput;
        }
        Ok(())
    }

    /// All parameters in canonical flat order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn load_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                context: "flat parameters",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flat parameters"));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w_len = layer.weights.len();
            layer.weights.copy_from_slice(&params[offset..offset + w_len]);
            offset += w_len;
            let b_len = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b_len]);
            offset += b_len;
        }
        Ok(())
    }

    /// True at flat positions holding bias terms; these are exempt from
    /// weight decay.
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            mask.extend(std::iter::repeat_n(false, layer.weights.len()));
            mask.extend(std::iter::repeat_n(true, layer.bias.len()));
        }
        mask
    }

    /// Writes the JSON header line and the little-endian parameter blob.
    pub fn save_checkpoint(&self, path: &Path, step: u64) -> Result<()> {
        let header = CheckpointHeader {
            dims: self.dims(),
            head: self.head,
            seed: self.init_seed,
            step,
        };
        let mut file = std::fs::File::create(path)?;
        let mut text = serde_json::to_string(&header)?;
        text.push('\n');
        file.write_all(text.as_bytes())?;
        for v in self.flatten_params() {
            file.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("checkpoint missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        if header.dims.len() < 2 {
            return Err(Error::Parse("checkpoint needs input and class dims".into()));
        }
        let input_dim = header.dims[0];
        let class_count = *header.dims.last().expect("checked above");
        let hidden = &header.dims[1..header.dims.len() - 1];
        let mut model = Self::init(input_dim, hidden, class_count, header.head, header.seed)?;
        let blob = &bytes[newline + 1..];
        let expected = model.param_count() * 8;
        if blob.len() != expected {
            return Err(Error::Parse(format!(
                "checkpoint blob has {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let params: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        model.load_flat_params(&params)?;
        Ok((model, header.step))
    }
}

struct Trace {
    pre: Vec<Vec<f64>>,  // hidden pre-activations
    post: Vec<Vec<f64>>, // hidden activations after ReLU
    logits: Vec<f64>,
}

fn init_layer(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, with_bias: bool) -> Layer {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weights = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let bias = if with_bias {
        (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect()
    } else {
        Vec::new()
    };
    Layer {
        weights,
        bias,
        in_dim,
        out_dim,
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
