//! MLP encoder/classifier/discriminator bundle with explicit backward
//! passes, an SGD-with-momentum optimizer, freeze-and-checksum semantics for
//! teacher models, and JSON checkpoints that round-trip parameters exactly.

use crate::hashing::f64_slices_checksum;
use crate::tensor::{
    affine_backward, affine_forward, cross_entropy_per_sample, normalized_entropy, relu_backward,
    relu_forward, softmax, GradPair, Tensor, TensorError, TensorResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model is frozen; {operation} is not allowed")]
    Frozen { operation: &'static str },
    #[error("invalid model configuration: {reason}")]
    Config { reason: String },
    #[error("checkpoint rejected: {reason}")]
    Checkpoint { reason: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// One layer of an [`Mlp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Affine { weight: Tensor, bias: Tensor },
    Relu,
}

/// Inputs seen by each layer during a cached forward pass.
#[derive(Debug)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
}

/// Per-layer parameter gradients, `None` for parameter-free layers.
#[derive(Debug, Clone)]
pub struct MlpGrads(pub Vec<Option<(Tensor, Tensor)>>);

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let entries = mlp
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Affine { weight, bias } => Some((
                    Tensor::zeros(weight.rows(), weight.cols()),
                    Tensor::zeros(bias.rows(), bias.cols()),
                )),
                Layer::Relu => None,
            })
            .collect();
        Self(entries)
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> TensorResult<()> {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if let (Some((w, b)), Some((ow, ob))) = (mine.as_mut(), theirs.as_ref()) {
                w.add_assign(ow)?;
                b.add_assign(ob)?;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|(w, b)| w.max_abs().max(b.max_abs()))
            .fold(0.0, f64::max)
    }
}

/// Feed-forward stack of affine and ReLU layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    fn xavier_affine(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Layer {
        let limit = (6.0 / (din + dout) as f64).sqrt();
        let data = (0..din * dout)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Layer::Affine {
            weight: Tensor::new(din, dout, data).expect("positive dims"),
            bias: Tensor::zeros(1, dout),
        }
    }

    /// Affine layers through `dims` with ReLU between each pair, and
    /// optionally after the last.
    pub fn new_stack(dims: &[usize], relu_after_last: bool, rng: &mut ChaCha8Rng) -> ModelResult<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(ModelError::Config {
                reason: format!("layer dims must be at least two positive sizes, got {dims:?}"),
            });
        }
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(Self::xavier_affine(w[0], w[1], rng));
            layers.push(Layer::Relu);
        }
        if !relu_after_last {
            layers.pop();
        }
        Ok(Self { layers })
    }

    /// Wraps explicit layers; dimension compatibility is checked lazily by
    /// the forward pass (and by [`Model`] validation when bundled).
    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Affine { weight, .. } => Some(weight.rows()),
            Layer::Relu => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Affine { weight, .. } => Some(weight.cols()),
            Layer::Relu => None,
        })
    }

    pub fn forward(&self, input: &Tensor) -> TensorResult<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Affine { weight, bias } => affine_forward(&x, weight, bias)?,
                Layer::Relu => relu_forward(&x),
            };
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Tensor) -> TensorResult<(Tensor, MlpCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            inputs.push(x.clone());
            x = match layer {
                Layer::Affine { weight, bias } => affine_forward(&x, weight, bias)?,
                Layer::Relu => relu_forward(&x),
            };
        }
        Ok((x, MlpCache { inputs }))
    }

    /// Gradient of the loss with respect to this stack's input and
    /// parameters, given the gradient on its output.
    pub fn backward(&self, upstream: &Tensor, cache: &MlpCache) -> TensorResult<(Tensor, MlpGrads)> {
        let mut grads = vec![None; self.layers.len()];
        let mut g = upstream.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let cached = &cache.inputs[idx];
            g = match layer {
                Layer::Affine { weight, .. } => {
                    let (gin, gw, gb) = affine_backward(&g, cached, weight)?;
                    grads[idx] = Some((gw, gb));
                    gin
                }
                Layer::Relu => relu_backward(&g, cached)?,
            };
        }
        Ok((g, MlpGrads(grads)))
    }

    /// Input gradient only; skips parameter gradients. This is the attack
    /// hot path.
    pub fn backward_input(&self, upstream: &Tensor, cache: &MlpCache) -> TensorResult<Tensor> {
        let mut g = upstream.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let cached = &cache.inputs[idx];
            g = match layer {
                Layer::Affine { weight, .. } => {
                    let (b, dout) = g.shape();
                    let din = weight.rows();
                    let mut gin = vec![0.0; b * din];
                    for i in 0..b {
                        for k in 0..din {
                            let mut acc = 0.0;
                            for j in 0..dout {
                                acc += g.get(i, j) * weight.get(k, j);
                            }
                            gin[i * din + k] = acc;
                        }
                    }
                    Tensor::new(b, din, gin)?
                }
                Layer::Relu => relu_backward(&g, cached)?,
            };
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Affine { weight, bias } = layer {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Affine { weight, bias } = layer {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    fn validate_chain(&self, expected_in: usize, expected_out: usize, name: &str) -> ModelResult<()> {
        let mut dim = expected_in;
        for (idx, layer) in self.layers.iter().enumerate() {
            if let Layer::Affine { weight, bias } = layer {
                if weight.rows() != dim {
                    return Err(ModelError::Checkpoint {
                        reason: format!(
                            "{name} layer {idx} expects input dim {dim}, weight is {}x{}",
                            weight.rows(),
                            weight.cols()
                        ),
                    });
                }
                if bias.rows() != 1 || bias.cols() != weight.cols() {
                    return Err(ModelError::Checkpoint {
                        reason: format!(
                            "{name} layer {idx} bias shape {:?} does not match width {}",
                            bias.shape(),
                            weight.cols()
                        ),
                    });
                }
                dim = weight.cols();
            }
        }
        if dim != expected_out {
            return Err(ModelError::Checkpoint {
                reason: format!("{name} produces dim {dim}, expected {expected_out}"),
            });
        }
        Ok(())
    }
}

/// Architecture and init settings for [`Model::new`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub class_count: usize,
    pub hidden: Vec<usize>,
    pub disc_hidden: usize,
    pub conditional: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, class_count: usize) -> Self {
        Self {
            input_dim,
            class_count,
            hidden: vec![64, 32],
            disc_hidden: 32,
            conditional: false,
            seed: 0,
        }
    }
}

/// Forward-pass bundle: everything downstream consumers need from a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    /// Normalized entropy of each probability row, B×1 in [0, 1].
    pub entropy: Tensor,
    pub pseudo_labels: Vec<usize>,
}

/// Row argmax; ties resolve to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Flattened outer product of feature rows with probability rows:
/// `out[i][k*c + j] = features[i][k] * probs[i][j]`. The probability side is
/// treated as a constant by [`cdan_backward_features`].
pub fn cdan_input(features: &Tensor, probs: &Tensor) -> TensorResult<Tensor> {
    if features.rows() != probs.rows() {
        return Err(TensorError::ShapeMismatch {
            context: "cdan_input",
            left: features.shape(),
            right: probs.shape(),
        });
    }
    let (b, f, c) = (features.rows(), features.cols(), probs.cols());
    let mut data = Vec::with_capacity(b * f * c);
    for i in 0..b {
        for k in 0..f {
            let fv = features.get(i, k);
            for j in 0..c {
                data.push(fv * probs.get(i, j));
            }
        }
    }
    Tensor::new(b, f * c, data)
}

/// Gradient of [`cdan_input`] with respect to the features.
pub fn cdan_backward_features(upstream: &Tensor, probs: &Tensor) -> TensorResult<Tensor> {
    let (b, c) = probs.shape();
    if upstream.rows() != b || upstream.cols() % c != 0 {
        return Err(TensorError::ShapeMismatch {
            context: "cdan_backward_features",
            left: upstream.shape(),
            right: probs.shape(),
        });
    }
    let f = upstream.cols() / c;
    let mut grad = Tensor::zeros(b, f);
    for i in 0..b {
        for k in 0..f {
            let mut acc = 0.0;
            for j in 0..c {
                acc += upstream.get(i, k * c + j) * probs.get(i, j);
            }
            grad.set(i, k, acc);
        }
    }
    Ok(grad)
}

/// Encoder + classifier + domain discriminator. A frozen model records a
/// parameter checksum and rejects updates from then on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    encoder: Mlp,
    classifier: Mlp,
    discriminator: Mlp,
    conditional: bool,
    class_count: usize,
    input_dim: usize,
    frozen: bool,
    frozen_checksum: Option<u64>,
}

/// Gradients for every trainable tensor of a [`Model`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: MlpGrads,
    pub classifier: MlpGrads,
    pub discriminator: MlpGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            encoder: MlpGrads::zeros_like(&model.encoder),
            classifier: MlpGrads::zeros_like(&model.classifier),
            discriminator: MlpGrads::zeros_like(&model.discriminator),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) -> TensorResult<()> {
        self.encoder.add_assign(&other.encoder)?;
        self.classifier.add_assign(&other.classifier)?;
        self.discriminator.add_assign(&other.discriminator)
    }

    pub fn max_abs(&self) -> f64 {
        self.encoder
            .max_abs()
            .max(self.classifier.max_abs())
            .max(self.discriminator.max_abs())
    }

    fn flatten(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for part in [&self.encoder, &self.classifier, &self.discriminator] {
            for entry in part.0.iter().flatten() {
                out.push(&entry.0);
                out.push(&entry.1);
            }
        }
        out
    }
}

impl Model {
    /// Assembles a model from prebuilt parts. Intended for targeted tests
    /// that need hand-picked weights.
    #[cfg(test)]
    pub(crate) fn from_parts(
        encoder: Mlp,
        classifier: Mlp,
        discriminator: Mlp,
        conditional: bool,
        class_count: usize,
        input_dim: usize,
    ) -> Self {
        Self {
            encoder,
            classifier,
            discriminator,
            conditional,
            class_count,
            input_dim,
            frozen: false,
            frozen_checksum: None,
        }
    }

    pub fn new(cfg: &ModelConfig) -> ModelResult<Self> {
        if cfg.class_count < 2 {
            return Err(ModelError::Config {
                reason: format!("class_count must be at least 2, got {}", cfg.class_count),
            });
        }
        if cfg.input_dim == 0 {
            return Err(ModelError::Config {
                reason: "input_dim must be positive".into(),
            });
        }
        if cfg.hidden.is_empty() {
            return Err(ModelError::Config {
                reason: "hidden must list at least one layer width".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut enc_dims = vec![cfg.input_dim];
        enc_dims.extend_from_slice(&cfg.hidden);
        let encoder = Mlp::new_stack(&enc_dims, true, &mut rng)?;
        let feat = *cfg.hidden.last().expect("hidden non-empty");
        let classifier = Mlp::new_stack(&[feat, cfg.class_count], false, &mut rng)?;
        let disc_in = if cfg.conditional {
            feat * cfg.class_count
        } else {
            feat
        };
        let discriminator = Mlp::new_stack(&[disc_in, cfg.disc_hidden, 1], false, &mut rng)?;
        Ok(Self {
            encoder,
            classifier,
            discriminator,
            conditional: cfg.conditional,
            class_count: cfg.class_count,
            input_dim: cfg.input_dim,
            frozen: false,
            frozen_checksum: None,
        })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn classifier(&self) -> &Mlp {
        &self.classifier
    }

    pub fn discriminator(&self) -> &Mlp {
        &self.discriminator
    }

    pub fn conditional(&self) -> bool {
        self.conditional
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim().expect("encoder has affine layers")
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn predict(&self, inputs: &Tensor) -> ModelResult<Prediction> {
        let features = self.encoder.forward(inputs)?;
        let logits = self.classifier.forward(&features)?;
        let probs = softmax(&logits)?;
        let entropy = normalized_entropy(&probs)?;
        let pseudo_labels = argmax_rows(&logits);
        Ok(Prediction {
            features,
            logits,
            probs,
            entropy,
            pseudo_labels,
        })
    }

    /// Per-sample cross-entropy against `labels` plus the gradient of the
    /// batch mean with respect to the inputs. Parameters stay untouched.
    pub fn input_loss_grad(&self, inputs: &Tensor, labels: &[usize]) -> ModelResult<GradPair> {
        let (features, enc_cache) = self.encoder.forward_cached(inputs)?;
        let (logits, cls_cache) = self.classifier.forward_cached(&features)?;
        let per_sample = cross_entropy_per_sample(&logits, labels)?;
        let grad_features = self.classifier.backward_input(&per_sample.grad, &cls_cache)?;
        let grad_inputs = self.encoder.backward_input(&grad_features, &enc_cache)?;
        Ok(GradPair {
            value: per_sample.value,
            grad: grad_inputs,
        })
    }

    /// Discriminator input for a batch: raw features, or the flattened
    /// feature/probability outer product when the model is conditional.
    pub fn discriminator_input(&self, features: &Tensor, probs: &Tensor) -> TensorResult<Tensor> {
        if self.conditional {
            cdan_input(features, probs)
        } else {
            Ok(features.clone())
        }
    }

    /// Maps a gradient on the discriminator input back onto the features.
    pub fn discriminator_input_backward(
        &self,
        upstream: &Tensor,
        probs: &Tensor,
    ) -> TensorResult<Tensor> {
        if self.conditional {
            cdan_backward_features(upstream, probs)
        } else {
            Ok(upstream.clone())
        }
    }

    fn all_params(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.params();
        out.extend(self.classifier.params());
        out.extend(self.discriminator.params());
        out
    }

    fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        let mut cls = self.classifier.params_mut();
        let mut disc = self.discriminator.params_mut();
        out.append(&mut cls);
        out.append(&mut disc);
        out
    }

    pub fn param_checksum(&self) -> u64 {
        f64_slices_checksum(self.all_params().into_iter().map(|t| t.data()))
    }

    /// Marks the model immutable and records its parameter checksum.
    pub fn freeze(&mut self) {
        self.frozen_checksum = Some(self.param_checksum());
        self.frozen = true;
    }

    /// Confirms a frozen model's parameters still match the checksum taken
    /// at freeze time.
    pub fn verify_frozen(&self) -> ModelResult<()> {
        match self.frozen_checksum {
            None => Err(ModelError::Config {
                reason: "model was never frozen".into(),
            }),
            Some(expected) => {
                let now = self.param_checksum();
                if now == expected {
                    Ok(())
                } else {
                    Err(ModelError::Checkpoint {
                        reason: format!(
                            "frozen parameter checksum changed: {expected:016x} -> {now:016x}"
                        ),
                    })
                }
            }
        }
    }

    /// Deep copy that is trainable again.
    pub fn clone_into_student(&self) -> Model {
        let mut student = self.clone();
        student.frozen = false;
        student.frozen_checksum = None;
        student
    }

    /// One optimizer step. Rejected outright on frozen models.
    pub fn apply_update(&mut self, grads: &ModelGrads, opt: &mut Sgd) -> ModelResult<()> {
        if self.frozen {
            return Err(ModelError::Frozen {
                operation: "apply_update",
            });
        }
        let flat_grads: Vec<Tensor> = grads.flatten().into_iter().cloned().collect();
        let mut params = self.all_params_mut();
        if params.len() != flat_grads.len() {
            return Err(ModelError::Config {
                reason: format!(
                    "gradient set has {} tensors, model has {} parameters",
                    flat_grads.len(),
                    params.len()
                ),
            });
        }
        opt.step(&mut params, &flat_grads)?;
        Ok(())
    }

    fn validate(&self) -> ModelResult<()> {
        self.encoder
            .validate_chain(self.input_dim, self.feature_dim_checked()?, "encoder")?;
        self.classifier
            .validate_chain(self.feature_dim_checked()?, self.class_count, "classifier")?;
        let disc_in = if self.conditional {
            self.feature_dim_checked()? * self.class_count
        } else {
            self.feature_dim_checked()?
        };
        self.discriminator
            .validate_chain(disc_in, 1, "discriminator")
    }

    fn feature_dim_checked(&self) -> ModelResult<usize> {
        self.encoder.output_dim().ok_or_else(|| ModelError::Checkpoint {
            reason: "encoder has no affine layers".into(),
        })
    }

    pub fn save_checkpoint(&self, path: &Path, provenance: &Provenance) -> ModelResult<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            provenance: provenance.clone(),
            param_checksum: format!("{:016x}", self.param_checksum()),
            model: self.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| ModelError::Checkpoint {
            reason: format!("serialize failed: {e}"),
        })?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> ModelResult<(Model, Provenance)> {
        let json = fs::read_to_string(path)?;
        let file: CheckpointFile =
            serde_json::from_str(&json).map_err(|e| ModelError::Checkpoint {
                reason: format!("parse failed: {e}"),
            })?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint {
                reason: format!(
                    "format_version {} is not supported (expected {})",
                    file.format_version, CHECKPOINT_FORMAT_VERSION
                ),
            });
        }
        file.model.validate()?;
        let stored = u64::from_str_radix(&file.param_checksum, 16).map_err(|_| {
            ModelError::Checkpoint {
                reason: format!("param_checksum {:?} is not hex", file.param_checksum),
            }
        })?;
        let actual = file.model.param_checksum();
        if stored != actual {
            return Err(ModelError::Checkpoint {
                reason: format!(
                    "parameter checksum mismatch: stored {stored:016x}, computed {actual:016x}"
                ),
            });
        }
        Ok((file.model, file.provenance))
    }
}

/// Where a checkpoint came from, for audit trails.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub step: String,
    pub toolkit_version: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    provenance: Provenance,
    param_checksum: String,
    model: Model,
}

/// SGD hyperparameters. The update is
/// `v <- momentum*v + (g + weight_decay*theta); theta <- theta - lr*v`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// SGD with momentum and decoupled-from-nothing weight decay (decay is
/// folded into the gradient before the momentum buffer, the common
/// framework convention).
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocities: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub(crate) fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> TensorResult<()> {
        if self.velocities.is_empty() {
            self.velocities = params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect();
        }
        if self.velocities.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                context: "sgd velocity count",
                left: (self.velocities.len(), 0),
                right: (params.len(), 0),
            });
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            if param.shape() != grad.shape() || param.shape() != vel.shape() {
                return Err(TensorError::ShapeMismatch {
                    context: "sgd step",
                    left: param.shape(),
                    right: grad.shape(),
                });
            }
            let p = param.data_mut();
            let g = grad.data();
            let v = vel.data_mut();
            for i in 0..p.len() {
                let adjusted = g[i] + self.cfg.weight_decay * p[i];
                v[i] = self.cfg.momentum * v[i] + adjusted;
                p[i] -= self.cfg.learning_rate * v[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            class_count: 2,
            hidden: vec![4, 3],
            disc_hidden: 4,
            conditional: false,
            seed,
        }
    }

    fn central_diff(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
        let mut grad = Tensor::zeros(at.rows(), at.cols());
        for idx in 0..at.data().len() {
            let mut plus = at.clone();
            plus.data_mut()[idx] += h;
            let mut minus = at.clone();
            minus.data_mut()[idx] -= h;
            grad.data_mut()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn xavier_init_bounds_and_zero_biases() {
        let model = Model::new(&tiny_config(3)).unwrap();
        for layer in model.encoder().layers() {
            if let Layer::Affine { weight, bias } = layer {
                let limit = (6.0 / (weight.rows() + weight.cols()) as f64).sqrt();
                for &v in weight.data() {
                    assert!(v.abs() < limit);
                }
                assert!(bias.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = Model::new(&tiny_config(9)).unwrap();
        let b = Model::new(&tiny_config(9)).unwrap();
        let c = Model::new(&tiny_config(10)).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        assert_ne!(a.param_checksum(), c.param_checksum());
    }

    #[test]
    fn predict_shapes_probabilities_and_entropy() {
        let model = Model::new(&tiny_config(1)).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.2, 0.3], [1.0, 0.5, -1.0]]).unwrap();
        let pred = model.predict(&x).unwrap();
        assert_eq!(pred.features.shape(), (2, 3));
        assert_eq!(pred.logits.shape(), (2, 2));
        assert_eq!(pred.entropy.shape(), (2, 1));
        assert_eq!(pred.pseudo_labels.len(), 2);
        for i in 0..2 {
            let sum: f64 = pred.probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        let t = Tensor::from_rows(&[[1.0, 1.0, 0.5], [0.0, 0.2, 0.2]]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn input_loss_grad_matches_finite_differences() {
        let model = Model::new(&tiny_config(5)).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.7, 0.2], [0.9, 0.4, -0.5]]).unwrap();
        let labels = vec![1, 0];
        let pair = model.input_loss_grad(&x, &labels).unwrap();
        let numeric = central_diff(
            |t| {
                let pred = model.predict(t).unwrap();
                crate::tensor::cross_entropy(&pred.logits, &labels).unwrap().0
            },
            &x,
            1e-5,
        );
        assert!(max_rel_err(&pair.grad, &numeric) <= 1e-5);
        // Per-sample losses average to the batch loss.
        let mean: f64 = pair.value.data().iter().sum::<f64>() / 2.0;
        let pred = model.predict(&x).unwrap();
        let (batch, _) = crate::tensor::cross_entropy(&pred.logits, &labels).unwrap();
        assert!((mean - batch).abs() <= 1e-12);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let model = Model::new(&tiny_config(7)).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.7, 0.2], [0.9, 0.4, -0.5], [-0.2, 0.8, 0.1]]).unwrap();
        let labels = vec![1, 0, 1];

        let (features, enc_cache) = model.encoder.forward_cached(&x).unwrap();
        let (logits, cls_cache) = model.classifier.forward_cached(&features).unwrap();
        let (_, ce_grad) = crate::tensor::cross_entropy(&logits, &labels).unwrap();
        let (grad_feat, cls_grads) = model.classifier.backward(&ce_grad, &cls_cache).unwrap();
        let (_, enc_grads) = model.encoder.backward(&grad_feat, &enc_cache).unwrap();

        let loss_of = |m: &Model| {
            let pred = m.predict(&x).unwrap();
            crate::tensor::cross_entropy(&pred.logits, &labels).unwrap().0
        };

        // Finite differences over every encoder and classifier parameter.
        let analytic: Vec<Tensor> = enc_grads
            .0
            .iter()
            .chain(cls_grads.0.iter())
            .flatten()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect();
        let h = 1e-5;
        let mut param_idx = 0;
        let trainable = model.encoder.params().len() + model.classifier.params().len();
        for t in 0..trainable {
            let shape = {
                let mut probe = model.clone();
                let params = probe.all_params_mut();
                params[t].shape()
            };
            let mut numeric = Tensor::zeros(shape.0, shape.1);
            for idx in 0..shape.0 * shape.1 {
                let mut plus = model.clone();
                plus.all_params_mut()[t].data_mut()[idx] += h;
                let mut minus = model.clone();
                minus.all_params_mut()[t].data_mut()[idx] -= h;
                numeric.data_mut()[idx] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            }
            assert!(
                max_rel_err(&analytic[param_idx], &numeric) <= 1e-4,
                "param tensor {t}"
            );
            param_idx += 1;
        }
    }

    #[test]
    fn sgd_two_step_hand_recurrence() {
        let mut theta = Tensor::from_rows(&[[1.0]]).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        let g1 = Tensor::from_rows(&[[0.5]]).unwrap();
        let g2 = Tensor::from_rows(&[[0.25]]).unwrap();
        opt.step(&mut [&mut theta], std::slice::from_ref(&g1)).unwrap();
        assert!((theta.get(0, 0) - 0.95).abs() <= 1e-15);
        opt.step(&mut [&mut theta], std::slice::from_ref(&g2)).unwrap();
        // v2 = 0.9*0.5 + 0.25 = 0.7; theta = 0.95 - 0.07
        assert!((theta.get(0, 0) - 0.88).abs() <= 1e-15);
    }

    #[test]
    fn sgd_weight_decay_hand_recurrence() {
        let mut theta = Tensor::from_rows(&[[1.0]]).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
        });
        let g1 = Tensor::from_rows(&[[0.5]]).unwrap();
        let g2 = Tensor::from_rows(&[[0.25]]).unwrap();
        opt.step(&mut [&mut theta], std::slice::from_ref(&g1)).unwrap();
        // v1 = 0.5 + 0.1*1.0 = 0.6; theta = 1 - 0.06 = 0.94
        assert!((theta.get(0, 0) - 0.94).abs() <= 1e-15);
        opt.step(&mut [&mut theta], std::slice::from_ref(&g2)).unwrap();
        // v2 = 0.9*0.6 + (0.25 + 0.094) = 0.884; theta = 0.94 - 0.0884
        assert!((theta.get(0, 0) - 0.8516).abs() <= 1e-15);
    }

    #[test]
    fn frozen_model_rejects_updates_and_checksum_survives_student_training() {
        let mut teacher = Model::new(&tiny_config(2)).unwrap();
        teacher.freeze();
        let before = teacher.param_checksum();

        let grads = ModelGrads::zeros_like(&teacher);
        let mut opt = Sgd::new(SgdConfig::default());
        let err = teacher.apply_update(&grads, &mut opt).unwrap_err();
        assert!(matches!(err, ModelError::Frozen { .. }));

        let mut student = teacher.clone_into_student();
        assert!(!student.is_frozen());
        let mut grads = ModelGrads::zeros_like(&student);
        if let Some((w, _)) = grads.encoder.0[0].as_mut() {
            w.data_mut()[0] = 1.0;
        }
        student.apply_update(&grads, &mut opt).unwrap();
        assert_ne!(student.param_checksum(), before);
        teacher.verify_frozen().unwrap();
        assert_eq!(teacher.param_checksum(), before);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut model = Model::new(&tiny_config(42)).unwrap();
        model.freeze();
        let prov = Provenance {
            config_hash: "deadbeef".into(),
            seed: 42,
            step: "pretrain".into(),
            toolkit_version: "0.1.0".into(),
        };
        model.save_checkpoint(&path, &prov).unwrap();
        let (loaded, loaded_prov) = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded_prov, prov);
        assert!(loaded.is_frozen());
        assert_eq!(loaded.param_checksum(), model.param_checksum());
        let a = model.all_params();
        let b = loaded.all_params();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x
                .data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_bad_version_and_tampered_params() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model = Model::new(&tiny_config(4)).unwrap();
        let prov = Provenance {
            config_hash: "0".into(),
            seed: 4,
            step: "pretrain".into(),
            toolkit_version: "0.1.0".into(),
        };
        model.save_checkpoint(&path, &prov).unwrap();

        let json = std::fs::read_to_string(&path).unwrap();
        let versioned = json.replace("\"format_version\":1", "\"format_version\":99");
        std::fs::write(&path, &versioned).unwrap();
        let err = Model::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("format_version"), "{err}");

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["model"]["encoder"]["layers"][0]["Affine"]["weight"]["data"][0] =
            serde_json::Value::from(12.5);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let err = Model::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn checkpoint_shape_mismatch_is_descriptive() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model = Model::new(&tiny_config(4)).unwrap();
        let prov = Provenance {
            config_hash: "0".into(),
            seed: 4,
            step: "pretrain".into(),
            toolkit_version: "0.1.0".into(),
        };
        model.save_checkpoint(&path, &prov).unwrap();
        let mut value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        // Claim a different classifier input width than the encoder emits.
        value["model"]["classifier"]["layers"][0]["Affine"]["weight"]["rows"] =
            serde_json::Value::from(7);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let err = Model::load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("length") || msg.contains("classifier") || msg.contains("shape"),
            "{msg}"
        );
    }

    #[test]
    fn cdan_input_hand_case_and_feature_gradient() {
        let f = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let p = Tensor::from_rows(&[[0.25, 0.75]]).unwrap();
        let out = cdan_input(&f, &p).unwrap();
        assert_eq!(out.data(), &[0.25, 0.75, 0.5, 1.5]);

        let coef = Tensor::from_rows(&[[0.3, -0.2, 0.7, 0.1]]).unwrap();
        let analytic = cdan_backward_features(&coef, &p).unwrap();
        let numeric = central_diff(
            |t| {
                cdan_input(t, &p)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(coef.data())
                    .map(|(o, c)| o * c)
                    .sum()
            },
            &f,
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
    }

    #[test]
    fn conditional_model_widens_discriminator_input() {
        let mut cfg = tiny_config(6);
        cfg.conditional = true;
        let model = Model::new(&cfg).unwrap();
        assert_eq!(
            model.discriminator().input_dim(),
            Some(model.feature_dim() * model.class_count())
        );
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let pred = model.predict(&x).unwrap();
        let din = model.discriminator_input(&pred.features, &pred.probs).unwrap();
        let z = model.discriminator().forward(&din).unwrap();
        assert_eq!(z.shape(), (1, 1));
    }
}
