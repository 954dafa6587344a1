//! Dense tanh networks with a hand-written backward pass, softmax, Adam and a
//! small binary checkpoint format.
//!
//! Hidden layers compute `x_k = tanh(W_k x_{k-1} + b_k)`; the final layer is
//! affine, optionally followed by a softmax. Weights are stored row-major as
//! `out x in`.
//!
//! Checkpoint layout: an ASCII magic line `LSIM-MLP 1`, one JSON header line
//! with the layer shapes and optional optimizer metadata, then little-endian
//! `f64` payloads (weights then bias per layer, followed by the Adam first and
//! second moments when present).

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LsimError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major, `out_dim * in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_rows(rows: &[&[f64]], bias: &[f64]) -> Self {
        let out_dim = rows.len();
        let in_dim = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == in_dim), "ragged weight rows");
        assert_eq!(bias.len(), out_dim, "bias length");
        Self {
            in_dim,
            out_dim,
            weights: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            bias: bias.to_vec(),
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn same_shape(&self, other: &DenseLayer) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub output: OutputActivation,
}

/// Per-layer activations of one forward pass: the input followed by each
/// layer's output (after its nonlinearity).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn activations(&self) -> &[Vec<f64>] {
        &self.activations
    }
}

/// Gradients with the same layout as the network, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<DenseLayer>,
    pub input: Vec<f64>,
}

impl MlpGradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(|l| DenseLayer::zeros(l.in_dim, l.out_dim)).collect(),
            input: vec![0.0; mlp.input_dim()],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MlpGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
        }
        self.input.iter_mut().zip(&other.input).for_each(|(x, y)| *x += scale * y);
    }

    /// Parameter gradients flattened in [`Mlp::param`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|g| *g == 0.0)
    }
}

impl Mlp {
    /// Builds a network with layer widths `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least one layer");
        let layers = dims.windows(2).map(|w| DenseLayer::glorot(w[0], w[1], rng)).collect();
        Self { layers, output }
    }

    pub fn from_layers(layers: Vec<DenseLayer>, output: OutputActivation) -> Result<Self> {
        let mlp = Self { layers, output };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(LsimError::ShapeMismatch("mlp has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.in_dim * layer.out_dim || layer.bias.len() != layer.out_dim {
                return Err(LsimError::ShapeMismatch(format!("layer {i} payload size")));
            }
            if i > 0 && self.layers[i - 1].out_dim != layer.in_dim {
                return Err(LsimError::ShapeMismatch(format!(
                    "layer {} outputs {} but layer {i} expects {}",
                    i - 1,
                    self.layers[i - 1].out_dim,
                    layer.in_dim
                )));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(LsimError::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.out_dim, l.in_dim)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (li, layer) in self.layers.iter().enumerate() {
            if index < layer.weights.len() {
                return (li, true, index);
            }
            index -= layer.weights.len();
            if index < layer.bias.len() {
                return (li, false, index);
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access: per layer, weights (row-major) then bias.
    pub fn param(&self, index: usize) -> f64 {
        let (li, is_w, i) = self.locate(index);
        let l = &self.layers[li];
        if is_w {
            l.weights[i]
        } else {
            l.bias[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (li, is_w, i) = self.locate(index);
        let l = &mut self.layers[li];
        if is_w {
            l.weights[i] = value;
        } else {
            l.bias[i] = value;
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(LsimError::ShapeMismatch(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(activations.last().expect("input pushed"));
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            } else if self.output == OutputActivation::Softmax {
                z = softmax(&z)?;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(LsimError::NonFinite(format!("layer {i} activation")));
            }
            activations.push(z);
        }
        let output = activations.last().expect("at least one layer").clone();
        Ok((output, ForwardCache { activations }))
    }

    pub fn backward(&self, cache: &ForwardCache, output_gradient: &[f64]) -> Result<MlpGradients> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(LsimError::ShapeMismatch("cache depth does not match network".into()));
        }
        for (layer, act) in self.layers.iter().zip(&cache.activations) {
            if act.len() != layer.in_dim {
                return Err(LsimError::ShapeMismatch("cache activations do not match network".into()));
            }
        }
        if output_gradient.len() != self.output_dim() {
            return Err(LsimError::ShapeMismatch(format!(
                "output gradient has {} entries, network outputs {}",
                output_gradient.len(),
                self.output_dim()
            )));
        }
        let last = self.layers.len() - 1;
        // gradient w.r.t. the pre-activation of the current layer
        let mut delta: Vec<f64> = match self.output {
            OutputActivation::Identity => output_gradient.to_vec(),
            OutputActivation::Softmax => {
                let p = &cache.activations[last + 1];
                let gp: f64 = output_gradient.iter().zip(p).map(|(g, p)| g * p).sum();
                p.iter().zip(output_gradient).map(|(p, g)| p * (g - gp)).collect()
            }
        };
        let mut grads = MlpGradients::zeros_like(self);
        for li in (0..=last).rev() {
            let layer = &self.layers[li];
            let x = &cache.activations[li];
            let g = &mut grads.layers[li];
            for o in 0..layer.out_dim {
                let d = delta[o];
                g.bias[o] = d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    row.iter_mut().zip(x).for_each(|(w, xv)| *w = d * xv);
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                dx.iter_mut().zip(row).for_each(|(acc, w)| *acc += d * w);
            }
            if li > 0 {
                // x = tanh(z) for every hidden activation
                delta = dx.iter().zip(x).map(|(g, a)| g * (1.0 - a * a)).collect();
            } else {
                grads.input = dx;
            }
        }
        Ok(grads)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(LsimError::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(LsimError::NonFinite("softmax input".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `ln(softmax(logits)[i])` for every `i`, computed without exponentiating
/// large values.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(LsimError::InvalidInput("log-softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|v| v - lse).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<DenseLayer>,
    pub second_moment: Vec<DenseLayer>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp) -> Self {
        Self::with_hyperparams(mlp, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(mlp: &Mlp, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        assert!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && epsilon > 0.0);
        let zeros = || mlp.layers.iter().map(|l| DenseLayer::zeros(l.in_dim, l.out_dim)).collect();
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut Mlp, gradients: &MlpGradients, state: &mut AdamState, learning_rate: f64) -> Result<()> {
    if learning_rate <= 0.0 {
        return Err(LsimError::InvalidInput("learning rate must be positive".into()));
    }
    let shapes_ok = params.layers.len() == gradients.layers.len()
        && params.layers.len() == state.first_moment.len()
        && params
            .layers
            .iter()
            .zip(&gradients.layers)
            .zip(&state.first_moment)
            .all(|((p, g), m)| p.same_shape(g) && p.same_shape(m));
    if !shapes_ok {
        return Err(LsimError::ShapeMismatch("adam: params, gradients and state disagree".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for li in 0..params.layers.len() {
        let p = &mut params.layers[li];
        let g = &gradients.layers[li];
        let m = &mut state.first_moment[li];
        let v = &mut state.second_moment[li];
        update(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights);
        update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "LSIM-MLP 1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    output: OutputActivation,
    /// `(out, in)` per layer.
    shapes: Vec<(usize, usize)>,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

fn write_layers<W: Write>(out: &mut W, layers: &[DenseLayer]) -> std::io::Result<()> {
    for l in layers {
        for v in l.weights.iter().chain(&l.bias) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_layers<R: Read>(input: &mut R, shapes: &[(usize, usize)]) -> Result<Vec<DenseLayer>> {
    let mut buf = [0u8; 8];
    let mut next = |input: &mut R| -> Result<f64> {
        input
            .read_exact(&mut buf)
            .map_err(|e| LsimError::Checkpoint(format!("truncated payload: {e}")))?;
        Ok(f64::from_le_bytes(buf))
    };
    shapes
        .iter()
        .map(|&(out_dim, in_dim)| {
            let weights = (0..out_dim * in_dim).map(|_| next(input)).collect::<Result<_>>()?;
            let bias = (0..out_dim).map(|_| next(input)).collect::<Result<_>>()?;
            Ok(DenseLayer {
                in_dim,
                out_dim,
                weights,
                bias,
            })
        })
        .collect()
}

pub fn checkpoint_bytes(mlp: &Mlp, adam: Option<&AdamState>) -> Vec<u8> {
    let header = CheckpointHeader {
        output: mlp.output,
        shapes: mlp.shapes(),
        adam: adam.map(|a| AdamHeader {
            step_count: a.step_count,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        }),
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    write_layers(&mut out, &mlp.layers).expect("vec write");
    if let Some(a) = adam {
        write_layers(&mut out, &a.first_moment).expect("vec write");
        write_layers(&mut out, &a.second_moment).expect("vec write");
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Mlp, Option<AdamState>)> {
    let mut reader = std::io::BufReader::new(bytes);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(LsimError::Checkpoint(format!("bad magic {:?}", line.trim_end())));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| LsimError::Checkpoint(format!("bad header: {e}")))?;
    let layers = read_layers(&mut reader, &header.shapes)?;
    let mlp = Mlp::from_layers(layers, header.output)?;
    let adam = match header.adam {
        Some(h) => Some(AdamState {
            first_moment: read_layers(&mut reader, &header.shapes)?,
            second_moment: read_layers(&mut reader, &header.shapes)?,
            step_count: h.step_count,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.epsilon,
        }),
        None => None,
    };
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(LsimError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((mlp, adam))
}

pub fn save_checkpoint(path: impl AsRef<Path>, mlp: &Mlp, adam: Option<&AdamState>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(mlp, adam))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Mlp, Option<AdamState>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(LsimError::MissingArtifact(path.to_path_buf()));
    }
    checkpoint_from_bytes(&std::fs::read(path)?)
}
