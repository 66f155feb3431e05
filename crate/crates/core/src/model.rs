//! Small differentiable classifier: a tanh MLP with a linear head, manual
//! backpropagation, SGD with momentum, and a binary checkpoint format.

use std::io::Read;
use std::path::Path;

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::numerics::{DataMatrix, SeededRng};

const CHECKPOINT_MAGIC: &[u8; 5] = b"UAST1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed in terms of the activation output.
    fn derivative_from_output(&self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Activation::Tanh => 1,
            Activation::Identity => 0,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            t => Err(Error::Parse {
                line: 0,
                detail: format!("unknown activation tag {t} in checkpoint"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// d_in x d_out weight matrix.
    pub weights: DataMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Feed-forward classifier. The output of the penultimate layer is the
/// feature space in which bases live; the final layer is the linear head
/// producing one logit per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Result of a forward pass.
pub struct ForwardPass {
    /// Penultimate-layer output (the input itself for a single-layer model).
    pub features: DataMatrix,
    pub logits: DataMatrix,
}

/// Per-layer gradients with the same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub weights: DataMatrix,
    pub bias: Vec<f64>,
}

/// Loss attached to the logits for backpropagation.
pub enum LossSpec<'a> {
    /// Mean negative log-likelihood over the batch.
    Nll { labels: &'a [Label] },
    /// `(1/N) * sum_i w_i * nll_i`; reduces to `Nll` when every weight is 1.
    WeightedNll {
        labels: &'a [Label],
        weights: &'a [f64],
    },
}

impl MlpModel {
    /// Builds a classifier with the given hidden widths (tanh) and a final
    /// identity layer with `class_count` outputs. Weights and biases are
    /// initialized uniformly in `[-1/sqrt(d_in), +1/sqrt(d_in)]`.
    pub fn new(input_dims: usize, hidden: &[usize], class_count: usize, rng: &mut SeededRng) -> Self {
        assert!(input_dims > 0 && class_count > 0);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut d_in = input_dims;
        for &width in hidden {
            layers.push(Layer::random(d_in, width, Activation::Tanh, rng));
            d_in = width;
        }
        layers.push(Layer::random(d_in, class_count, Activation::Identity, rng));
        MlpModel { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].weights.cols() != w[1].weights.rows() {
                return Err(Error::shape(
                    "MlpModel::from_layers",
                    format!(
                        "layer output {} does not chain into next input {}",
                        w[0].weights.cols(),
                        w[1].weights.rows()
                    ),
                ));
            }
        }
        Ok(MlpModel { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dims(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().weights.cols()
    }

    /// Dimension of the feature space the head consumes.
    pub fn feature_dims(&self) -> usize {
        self.layers.last().unwrap().weights.rows()
    }

    /// Final linear layer (weights d_feat x C, bias C).
    pub fn head(&self) -> &Layer {
        self.layers.last().unwrap()
    }

    pub fn forward(&self, x: &DataMatrix) -> Result<ForwardPass> {
        let activations = self.forward_trace(x)?;
        let n = activations.len();
        let logits = activations[n - 1].clone();
        let features = activations[n - 2].clone();
        Ok(ForwardPass { features, logits })
    }

    /// All layer outputs including the input: `trace[0] = x`,
    /// `trace[i] = act_i(trace[i-1] W_i + b_i)`.
    fn forward_trace(&self, x: &DataMatrix) -> Result<Vec<DataMatrix>> {
        if x.cols() != self.input_dims() {
            return Err(Error::shape(
                "MlpModel::forward",
                format!("input has {} columns, model expects {}", x.cols(), self.input_dims()),
            ));
        }
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            let prev = trace.last().unwrap();
            let mut out = crate::numerics::matmul(prev, &layer.weights)?;
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                for (c, v) in row.iter_mut().enumerate() {
                    *v = layer.activation.apply(*v + layer.bias[c]);
                }
            }
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("forward pass output of layer {idx}"),
                });
            }
            trace.push(out);
        }
        Ok(trace)
    }

    /// Loss value and gradients of every parameter for the given loss.
    pub fn backward(&self, x: &DataMatrix, loss: &LossSpec) -> Result<(f64, Gradients)> {
        let trace = self.forward_trace(x)?;
        let logits = trace.last().unwrap();
        let n = logits.rows();

        let (labels, weights) = match loss {
            LossSpec::Nll { labels } => (*labels, None),
            LossSpec::WeightedNll { labels, weights } => {
                if weights.len() != n {
                    return Err(Error::shape(
                        "MlpModel::backward",
                        format!("{} weights for {n} rows", weights.len()),
                    ));
                }
                (*labels, Some(*weights))
            }
        };
        if labels.len() != n {
            return Err(Error::shape(
                "MlpModel::backward",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }

        // delta = d(loss)/d(logits) = (softmax - onehot) * w_i / N, and the
        // loss itself from the same stabilized softmax pass.
        let mut delta = DataMatrix::zeros(n, logits.cols());
        let mut loss_value = 0.0;
        for r in 0..n {
            let label = labels[r].ok_or_else(|| {
                Error::Contract(format!("row {r} is unlabeled; filter before computing NLL"))
            })?;
            let w = weights.map_or(1.0, |ws| ws[r]);
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in row {
                sum += (v - max).exp();
            }
            loss_value += w * (max + sum.ln() - row[label]);
            for c in 0..row.len() {
                let softmax = (row[c] - max).exp() / sum;
                let onehot = if c == label { 1.0 } else { 0.0 };
                delta.set(r, c, w * (softmax - onehot) / n as f64);
            }
        }
        loss_value /= n as f64;

        // Walk the layers in reverse. Entering each iteration, `delta`
        // holds d(loss)/d(layer output); folding in the activation
        // derivative turns it into d(loss)/d(pre-activation).
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = delta;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let output = &trace[idx + 1];
            for r in 0..delta.rows() {
                for c in 0..delta.cols() {
                    let d = delta.get(r, c)
                        * layer.activation.derivative_from_output(output.get(r, c));
                    delta.set(r, c, d);
                }
            }
            let input = &trace[idx];
            let weight_grad = crate::numerics::matmul(&input.transpose(), &delta)?;
            let mut bias_grad = vec![0.0; layer.bias.len()];
            for r in 0..delta.rows() {
                for (c, g) in bias_grad.iter_mut().enumerate() {
                    *g += delta.get(r, c);
                }
            }
            if !weight_grad.is_finite() || !bias_grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of layer {idx}"),
                });
            }
            grads.push(LayerGradient {
                weights: weight_grad,
                bias: bias_grad,
            });
            if idx > 0 {
                delta = crate::numerics::matmul(&delta, &layer.weights.transpose())?;
            }
        }
        grads.reverse();
        Ok((loss_value, Gradients { layers: grads }))
    }

    /// Flattened view of every parameter (layer by layer, weights row-major
    /// then bias); used by finite-difference checks.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.values());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Inverse of [`MlpModel::flatten_params`].
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut cursor = 0;
        for layer in &mut self.layers {
            let w = layer.weights.values_mut();
            let need = w.len() + layer.bias.len();
            if cursor + need > flat.len() {
                return Err(Error::shape(
                    "MlpModel::set_params",
                    format!("parameter vector too short: {} values", flat.len()),
                ));
            }
            w.copy_from_slice(&flat[cursor..cursor + w.len()]);
            cursor += w.len();
            let bias_len = layer.bias.len();
            layer.bias.copy_from_slice(&flat[cursor..cursor + bias_len]);
            cursor += bias_len;
        }
        if cursor != flat.len() {
            return Err(Error::shape(
                "MlpModel::set_params",
                format!("parameter vector too long: {} values, expected {cursor}", flat.len()),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.values().len() + l.bias.len())
            .sum()
    }

    /// Argmax class per row, ties resolved to the lowest class id.
    pub fn predict(&self, x: &DataMatrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?.logits;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    // -- checkpoint format ---------------------------------------------------
    //
    // magic "UAST1" | u32 layer count | u32 class count | per layer:
    // u32 d_in | u32 d_out | u8 activation | f64-LE weights (row-major) |
    // f64-LE biases. All integers little-endian.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.class_count() as u32).to_le_bytes());
        for layer in &self.layers {
            buf.extend_from_slice(&(layer.weights.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.weights.cols() as u32).to_le_bytes());
            buf.push(layer.activation.tag());
            for v in layer.weights.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &layer.bias {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut reader = std::io::BufReader::new(file);
        let mut magic = [0u8; 5];
        reader
            .read_exact(&mut magic)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                line: 0,
                detail: "bad checkpoint magic; expected UAST1".into(),
            });
        }
        let layer_count = read_u32(&mut reader, path)? as usize;
        let class_count = read_u32(&mut reader, path)? as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let d_in = read_u32(&mut reader, path)? as usize;
            let d_out = read_u32(&mut reader, path)? as usize;
            let mut tag = [0u8; 1];
            reader
                .read_exact(&mut tag)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let activation = Activation::from_tag(tag[0])?;
            let mut values = vec![0.0; d_in * d_out];
            read_f64s(&mut reader, &mut values, path)?;
            let mut bias = vec![0.0; d_out];
            read_f64s(&mut reader, &mut bias, path)?;
            layers.push(Layer {
                weights: DataMatrix::new(d_in, d_out, values)?,
                bias,
                activation,
            });
        }
        let model = MlpModel::from_layers(layers)?;
        if model.class_count() != class_count {
            return Err(Error::Parse {
                line: 0,
                detail: format!(
                    "header declares {class_count} classes but the head has {}",
                    model.class_count()
                ),
            });
        }
        Ok(model)
    }
}

fn read_u32(reader: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s(reader: &mut impl Read, out: &mut [f64], path: &Path) -> Result<()> {
    let mut buf = [0u8; 8];
    for v in out.iter_mut() {
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(())
}

impl Layer {
    pub fn random(d_in: usize, d_out: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut weights = DataMatrix::zeros(d_in, d_out);
        for v in weights.values_mut() {
            *v = rng.uniform_in(-bound, bound);
        }
        let bias = (0..d_out).map(|_| rng.uniform_in(-bound, bound)).collect();
        Layer {
            weights,
            bias,
            activation,
        }
    }
}

/// Mean negative log-likelihood of the labels under row-wise softmax of the
/// logits. Unlabeled rows are a contract violation: filter them first.
pub fn nll_loss(logits: &DataMatrix, labels: &[Label]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "nll_loss",
            format!("{} labels for {} logit rows", labels.len(), logits.rows()),
        ));
    }
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let label = labels[r].ok_or_else(|| {
            Error::Contract(format!("row {r} is unlabeled; filter before computing NLL"))
        })?;
        let row = logits.row(r);
        if label >= row.len() {
            return Err(Error::Contract(format!(
                "row {r} has label {label} but only {} classes",
                row.len()
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        total += max + sum.ln() - row[label];
    }
    Ok(total / logits.rows() as f64)
}

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// `v = momentum * v - lr * (grad + weight_decay * param); param += v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<LayerGradient>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Parameter {
                name: "lr",
                detail: format!("must be positive, got {lr}"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter {
                name: "momentum",
                detail: format!("must be in [0, 1), got {momentum}"),
            });
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Parameter {
                name: "weight_decay",
                detail: format!("must be non-negative, got {weight_decay}"),
            });
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.layers.len() {
            return Err(Error::shape(
                "Sgd::step",
                format!(
                    "{} gradient layers for {} model layers",
                    grads.layers.len(),
                    model.layers.len()
                ),
            ));
        }
        let velocity = self.velocity.get_or_insert_with(|| {
            grads
                .layers
                .iter()
                .map(|g| LayerGradient {
                    weights: DataMatrix::zeros(g.weights.rows(), g.weights.cols()),
                    bias: vec![0.0; g.bias.len()],
                })
                .collect()
        });
        for ((layer, grad), vel) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(velocity.iter_mut())
        {
            for (i, (p, g)) in layer
                .weights
                .values_mut()
                .iter_mut()
                .zip(grad.weights.values())
                .enumerate()
            {
                let v = self.momentum * vel.weights.values()[i]
                    - self.lr * (g + self.weight_decay * *p);
                vel.weights.values_mut()[i] = v;
                *p += v;
            }
            for (i, (p, g)) in layer.bias.iter_mut().zip(&grad.bias).enumerate() {
                let v = self.momentum * vel.bias[i] - self.lr * (g + self.weight_decay * *p);
                vel.bias[i] = v;
                *p += v;
            }
            if !layer.weights.is_finite() || !layer.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::NonFinite {
                    context: "sgd parameter update".into(),
                });
            }
        }
        Ok(())
    }
}

/// Per-class and mean-over-classes accuracy on the labeled rows of `data`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AccuracyReport {
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
    pub mean_class_accuracy: f64,
}

pub fn evaluate_accuracy(model: &MlpModel, data: &Dataset) -> Result<AccuracyReport> {
    if data.dims() != model.input_dims() {
        return Err(Error::shape(
            "evaluate_accuracy",
            format!(
                "data has {} feature columns, model expects {}",
                data.dims(),
                model.input_dims()
            ),
        ));
    }
    if data.class_count != model.class_count() {
        return Err(Error::Config(format!(
            "data declares {} classes, model has {}",
            data.class_count,
            model.class_count()
        )));
    }
    let predictions = model.predict(&data.features)?;
    let mut correct = vec![0usize; data.class_count];
    let mut total = vec![0usize; data.class_count];
    for (i, label) in data.labels.iter().enumerate() {
        if let Some(truth) = label {
            total[*truth] += 1;
            if predictions[i] == *truth {
                correct[*truth] += 1;
            }
        }
    }
    let per_class_accuracy: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    let present: Vec<f64> = per_class_accuracy
        .iter()
        .zip(&total)
        .filter(|(_, &t)| t > 0)
        .map(|(&a, _)| a)
        .collect();
    if present.is_empty() {
        return Err(Error::Contract(
            "accuracy evaluation needs at least one labeled row".into(),
        ));
    }
    let mean_class_accuracy = present.iter().sum::<f64>() / present.len() as f64;
    Ok(AccuracyReport {
        per_class_accuracy,
        per_class_count: total,
        mean_class_accuracy,
    })
}
