//! The white-box target classifier: a compact convolutional network with a
//! checkpoint format, plain-SGD training, and input-gradient access.
//!
//! Architecture per [`ModelConfig`]: a chain of conv blocks (3x3 kernels,
//! stride 1, same padding, relu, 2x2 max pool, no conv bias), then dense
//! hidden layers with relu, then a `k`-way linear head. An empty
//! `conv_filters`/`dense_widths` pair yields a plain linear-softmax model.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geodata::{Classifier, ImageChip};
use crate::io_util::write_atomic;
use crate::scalar::Scalar;
use crate::tape::{Padding, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("chip shape {actual:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

/// Hyperparameters fixing the architecture and its deterministic
/// initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side length in pixels.
    pub input_size: usize,
    pub channels: usize,
    pub class_count: usize,
    /// Output channels of each conv block (3x3, stride 1, same padding,
    /// relu, 2x2 max pool).
    pub conv_filters: Vec<usize>,
    /// Widths of the hidden dense layers.
    pub dense_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: 3,
            class_count: 6,
            conv_filters: vec![16, 32, 64],
            dense_widths: vec![128],
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.class_count < 2 {
            return Err(ModelError::Config(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.input_size == 0 || self.channels == 0 {
            return Err(ModelError::Config("input extents must be positive".into()));
        }
        let divisor = 1usize << self.conv_filters.len();
        if self.input_size % divisor != 0 {
            return Err(ModelError::Config(format!(
                "input_size {} not divisible by 2^{} pool layers",
                self.input_size,
                self.conv_filters.len()
            )));
        }
        if self.conv_filters.iter().any(|&f| f == 0)
            || self.dense_widths.iter().any(|&w| w == 0)
        {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Declared parameter tensors in checkpoint order: `(name, shape)`.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut layers = Vec::new();
        let mut channels = self.channels;
        for (i, &filters) in self.conv_filters.iter().enumerate() {
            layers.push((format!("conv{i}"), vec![3, 3, channels, filters]));
            channels = filters;
        }
        let spatial = self.input_size >> self.conv_filters.len();
        let mut width = spatial * spatial * channels;
        for (i, &next) in self.dense_widths.iter().enumerate() {
            layers.push((format!("dense{i}_w"), vec![width, next]));
            layers.push((format!("dense{i}_b"), vec![next]));
            width = next;
        }
        layers.push(("head_w".into(), vec![width, self.class_count]));
        layers.push(("head_b".into(), vec![self.class_count]));
        layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

/// A built classifier. Parameters are owned tensors; forward passes mount
/// them on a caller-provided tape, so a trained model is freely shareable
/// across concurrent attack tasks.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
}

/// Parameter leaves registered on a tape for one forward pass.
pub struct MountedModel {
    vars: Vec<Var>,
}

impl MountedModel {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> Model<T> {
    /// Deterministic He-style uniform initialization from the config seed:
    /// each weight layer draws from `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    /// Hidden dense biases start at 0.01 so relu units are not born dead;
    /// the head bias starts at zero.
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for (name, shape) in config.layer_shapes() {
            let numel: usize = shape.iter().product();
            let tensor = if name == "head_b" {
                Tensor::zeros(shape)
            } else if name.ends_with("_b") {
                Tensor::filled(shape, T::from_f64(0.01))
            } else {
                let fan_in: usize = match shape.len() {
                    4 => shape[0] * shape[1] * shape[2],
                    2 => shape[0],
                    _ => numel,
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let data: Vec<T> = (0..numel)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data).unwrap()
            };
            params.push(tensor);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Registers every parameter on `tape`; `trainable` decides whether
    /// gradients accumulate into them.
    pub fn mount(&self, tape: &mut Tape<T>, trainable: bool) -> MountedModel {
        MountedModel {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), trainable))
                .collect(),
        }
    }

    /// Forward pass from an input var already on the tape; returns logits.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        mounted: &MountedModel,
        input: Var,
    ) -> Result<Var, ModelError> {
        let expected = vec![
            self.config.input_size,
            self.config.input_size,
            self.config.channels,
        ];
        if tape.value(input).shape() != expected.as_slice() {
            return Err(ModelError::InputShape {
                expected,
                actual: tape.value(input).shape().to_vec(),
            });
        }
        let mut vars = mounted.vars.iter().copied();
        let mut x = input;
        for _ in &self.config.conv_filters {
            let kernel = vars.next().expect("mounted model matches config");
            let c = tape.conv2d(x, kernel, 1, Padding::Same)?;
            let r = tape.relu(c);
            x = tape.maxpool2(r)?;
        }
        let mut flat = tape.flatten(x);
        for _ in &self.config.dense_widths {
            let w = vars.next().expect("mounted model matches config");
            let b = vars.next().expect("mounted model matches config");
            let d = tape.dense(flat, w, b)?;
            flat = tape.relu(d);
        }
        let w = vars.next().expect("mounted model matches config");
        let b = vars.next().expect("mounted model matches config");
        Ok(tape.dense(flat, w, b)?)
    }

    fn chip_tensor(&self, chip: &ImageChip) -> Tensor<T> {
        chip.pixels.cast::<T>()
    }

    /// Argmax label and softmax probabilities for a chip. Ties break to the
    /// lowest class index; the model is never mutated.
    pub fn predict(&self, chip: &ImageChip) -> Result<(usize, Vec<T>), ModelError> {
        self.predict_pixels(&self.chip_tensor(chip))
    }

    /// As [`Model::predict`] but over an already-cast pixel tensor.
    pub fn predict_pixels(&self, pixels: &Tensor<T>) -> Result<(usize, Vec<T>), ModelError> {
        let mut tape = Tape::new();
        let mounted = self.mount(&mut tape, false);
        let x = tape.constant(pixels.clone());
        let logits = self.forward(&mut tape, &mounted, x)?;
        let data = tape.value(logits).data();
        let max = data
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut probs: Vec<T> = data.iter().map(|&v| (v - max).exp()).collect();
        let denom = probs.iter().fold(T::zero(), |a, &p| a + p);
        for p in probs.iter_mut() {
            *p = *p / denom;
        }
        let mut best = 0;
        for (i, &p) in data.iter().enumerate() {
            if p > data[best] {
                best = i;
            }
        }
        Ok((best, probs))
    }

    /// Cross-entropy loss toward `label` and its gradient with respect to
    /// the chip pixels, parameters held fixed.
    pub fn loss_and_input_grad(
        &self,
        chip: &ImageChip,
        label: usize,
    ) -> Result<(T, Tensor<T>), ModelError> {
        self.loss_and_input_grad_pixels(&self.chip_tensor(chip), label)
    }

    pub fn loss_and_input_grad_pixels(
        &self,
        pixels: &Tensor<T>,
        label: usize,
    ) -> Result<(T, Tensor<T>), ModelError> {
        if label >= self.config.class_count {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.config.class_count,
            });
        }
        let mut tape = Tape::new();
        let mounted = self.mount(&mut tape, false);
        let x = tape.leaf(pixels.clone(), true);
        let logits = self.forward(&mut tape, &mounted, x)?;
        let loss = tape.softmax_cross_entropy(logits, label)?;
        tape.backward(loss)?;
        let grad = tape.grad(x).expect("input is a requires_grad leaf");
        Ok((tape.value(loss).item(), grad))
    }

    // ── Training ────────────────────────────────────────────────────

    /// Minibatch SGD on cross-entropy. Deterministic given the option seed;
    /// the log carries per-epoch mean training loss and held-out accuracy.
    pub fn train(
        &mut self,
        train_set: &[(Tensor<f32>, usize)],
        val_set: &[(Tensor<f32>, usize)],
        opts: &TrainOptions,
    ) -> Result<TrainingLog, ModelError> {
        if train_set.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        for (_, label) in train_set.iter().chain(val_set) {
            if *label >= self.config.class_count {
                return Err(ModelError::LabelOutOfRange {
                    label: *label,
                    classes: self.config.class_count,
                });
            }
        }
        let cast: Vec<(Tensor<T>, usize)> = train_set
            .iter()
            .map(|(px, label)| (px.cast::<T>(), *label))
            .collect();
        let val_cast: Vec<(Tensor<T>, usize)> = val_set
            .iter()
            .map(|(px, label)| (px.cast::<T>(), *label))
            .collect();

        let lr = T::from_f64(opts.learning_rate);
        let batch = opts.batch_size.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..cast.len()).collect();
        let mut log = TrainingLog { epochs: Vec::new() };

        for epoch in 0..opts.epochs {
            // Fisher-Yates with the run RNG keeps shuffling reproducible.
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut loss_total = 0.0f64;
            for chunk in order.chunks(batch) {
                let mut tape = Tape::new();
                let mounted = self.mount(&mut tape, true);
                let mut batch_loss: Option<Var> = None;
                for &idx in chunk {
                    let (pixels, label) = &cast[idx];
                    let x = tape.constant(pixels.clone());
                    let logits = self.forward(&mut tape, &mounted, x)?;
                    let loss = tape.softmax_cross_entropy(logits, *label)?;
                    batch_loss = Some(match batch_loss {
                        None => loss,
                        Some(acc) => tape.add(acc, loss)?,
                    });
                }
                let total = batch_loss.expect("non-empty chunk");
                let mean = tape.scale(total, T::one() / T::from_usize(chunk.len()));
                loss_total += tape.value(mean).item().to_f64() * chunk.len() as f64;
                tape.backward(mean)?;
                for (param, var) in self.params.iter_mut().zip(mounted.param_vars()) {
                    if let Some(grad) = tape.grad(*var) {
                        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                            *p = *p - lr * g;
                        }
                    }
                }
            }
            let mean_loss = loss_total / cast.len() as f64;
            let val_accuracy = self.accuracy(&val_cast)?;
            log.epochs.push(EpochStats {
                epoch,
                mean_loss,
                val_accuracy,
            });
            if let Some(threshold) = opts.early_stop_val_accuracy {
                if val_accuracy >= threshold {
                    break;
                }
            }
        }
        Ok(log)
    }

    fn accuracy(&self, set: &[(Tensor<T>, usize)]) -> Result<f64, ModelError> {
        if set.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (pixels, label) in set {
            let (predicted, _) = self.predict_pixels(pixels)?;
            if predicted == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / set.len() as f64)
    }

    // ── Checkpoint I/O ──────────────────────────────────────────────

    /// Writes the checkpoint: one JSON header line, a blank line, then the
    /// little-endian `f32` parameter blob in declared layer order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            layers: self
                .config
                .layer_shapes()
                .into_iter()
                .map(|(name, shape)| LayerShape { name, shape })
                .collect(),
            param_count: self.parameter_count(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.extend_from_slice(b"\n\n");
        for param in &self.params {
            for &v in param.data() {
                bytes.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        write_atomic(path, &bytes).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads a checkpoint written by [`Model::save_checkpoint`]. Fails on
    /// version mismatch or a truncated blob, leaving no partial model.
    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ckpt_err = |message: String| ModelError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| ckpt_err("missing blank line after header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| ckpt_err(format!("malformed header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "format version {} unsupported (expected {})",
                header.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        header.config.validate()?;
        let declared = header.config.layer_shapes();
        if declared.len() != header.layers.len()
            || declared
                .iter()
                .zip(&header.layers)
                .any(|((name, shape), layer)| *name != layer.name || *shape != layer.shape)
        {
            return Err(ckpt_err("layer table does not match config".into()));
        }
        let expected_count = header.config.parameter_count();
        if header.param_count != expected_count {
            return Err(ckpt_err(format!(
                "declared param_count {} does not match config ({})",
                header.param_count, expected_count
            )));
        }
        let blob = &bytes[split + 2..];
        if blob.len() != expected_count * 4 {
            return Err(ckpt_err(format!(
                "blob holds {} bytes, expected {}",
                blob.len(),
                expected_count * 4
            )));
        }
        let mut params = Vec::with_capacity(declared.len());
        let mut offset = 0usize;
        for (_, shape) in declared {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = blob[offset..offset + numel * 4]
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            offset += numel * 4;
            params.push(Tensor::new(shape, data).unwrap());
        }
        Ok(Self {
            config: header.config,
            params,
        })
    }

    #[cfg(test)]
    pub(crate) fn zero_parameters(&mut self) {
        for p in self.params.iter_mut() {
            for v in p.data_mut() {
                *v = T::zero();
            }
        }
    }
}

impl<T: Scalar> Classifier for Model<T> {
    fn classify(&self, chip: &ImageChip) -> Result<usize, String> {
        self.predict(chip).map(|(label, _)| label).map_err(|e| e.to_string())
    }
}

/// JSON header at the top of a checkpoint file.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub layers: Vec<LayerShape>,
    pub param_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after the first epoch whose held-out accuracy reaches this
    /// value; None trains for the full epoch budget.
    #[serde(default)]
    pub early_stop_val_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.08,
            batch_size: 16,
            seed: 42,
            early_stop_val_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainingLog {
    pub fn final_val_accuracy(&self) -> f64 {
        self.epochs.last().map(|e| e.val_accuracy).unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            channels: 3,
            class_count: 3,
            conv_filters: vec![4],
            dense_widths: vec![16],
            seed: 7,
        }
    }

    fn random_pixels(size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![size, size, 3], data).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(tiny_config()).unwrap();
        let b = Model::<f32>::build(tiny_config()).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn minimal_config_forward_is_finite() {
        let config = ModelConfig {
            input_size: 32,
            channels: 3,
            class_count: 2,
            conv_filters: vec![4, 8],
            dense_widths: vec![16],
            seed: 1,
        };
        let model = Model::<f32>::build(config).unwrap();
        let zeros = Tensor::zeros(vec![32, 32, 3]);
        let (_, probs) = model.predict_pixels(&zeros).unwrap();
        assert_eq!(probs.len(), 2);
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn default_parameter_count_matches_hand_computed_sum() {
        let config = ModelConfig::default();
        // conv: 3*3*3*16 + 3*3*16*32 + 3*3*32*64
        // dense: 8*8*64*128 + 128, head: 128*6 + 6
        let expected = 432 + 4608 + 18432 + 4096 * 128 + 128 + 128 * 6 + 6;
        assert_eq!(config.parameter_count(), expected);
        let model = Model::<f32>::build(config).unwrap();
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn indivisible_input_size_is_rejected() {
        let config = ModelConfig {
            input_size: 30,
            conv_filters: vec![8, 8],
            ..tiny_config()
        };
        assert!(Model::<f32>::build(config).is_err());
        let config = ModelConfig {
            class_count: 1,
            ..tiny_config()
        };
        assert!(Model::<f32>::build(config).is_err());
    }

    #[test]
    fn probabilities_sum_to_one_and_predict_is_pure() {
        let model = Model::<f32>::build(tiny_config()).unwrap();
        let pixels = random_pixels(8, 3);
        let (label_a, probs_a) = model.predict_pixels(&pixels).unwrap();
        let (label_b, probs_b) = model.predict_pixels(&pixels).unwrap();
        assert_eq!(label_a, label_b);
        assert_eq!(probs_a, probs_b);
        let total: f32 = probs_a.iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut model = Model::<f32>::build(tiny_config()).unwrap();
        let before: Vec<Vec<f32>> = model.parameters().iter().map(|p| p.data().to_vec()).collect();
        let data = vec![(random_pixels(8, 5), 0usize), (random_pixels(8, 6), 1)];
        let log = model
            .train(
                &data,
                &[],
                &TrainOptions {
                    epochs: 3,
                    learning_rate: 0.0,
                    batch_size: 2,
                    seed: 9,
                    early_stop_val_accuracy: None,
                },
            )
            .unwrap();
        for (p, b) in model.parameters().iter().zip(&before) {
            assert_eq!(p.data(), b.as_slice());
        }
        let losses: Vec<f64> = log.epochs.iter().map(|e| e.mean_loss).collect();
        assert!(losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
    }

    #[test]
    fn single_example_is_memorized() {
        let mut model = Model::<f32>::build(tiny_config()).unwrap();
        let data = vec![(random_pixels(8, 11), 2usize)];
        let log = model
            .train(
                &data,
                &data,
                &TrainOptions {
                    epochs: 60,
                    learning_rate: 0.2,
                    batch_size: 1,
                    seed: 1,
                    early_stop_val_accuracy: None,
                },
            )
            .unwrap();
        assert!(
            log.epochs.last().unwrap().mean_loss < 0.05,
            "final loss {}",
            log.epochs.last().unwrap().mean_loss
        );
        assert_eq!(log.final_val_accuracy(), 1.0);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let run = || {
            let mut model = Model::<f32>::build(tiny_config()).unwrap();
            let data = vec![
                (random_pixels(8, 21), 0usize),
                (random_pixels(8, 22), 1),
                (random_pixels(8, 23), 2),
            ];
            model
                .train(
                    &data,
                    &[],
                    &TrainOptions {
                        epochs: 4,
                        learning_rate: 0.1,
                        batch_size: 2,
                        seed: 33,
                        early_stop_val_accuracy: None,
                    },
                )
                .unwrap();
            model
                .parameters()
                .iter()
                .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = Model::<f32>::build(tiny_config()).unwrap();
        assert!(matches!(
            model.train(&[], &[], &TrainOptions::default()),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn uniform_logits_lose_ln_k() {
        let mut model = Model::<f64>::build(tiny_config()).unwrap();
        model.zero_parameters();
        let pixels = random_pixels(8, 31).cast::<f64>();
        let (loss, _) = model.loss_and_input_grad_pixels(&pixels, 1).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = Model::<f64>::build(tiny_config()).unwrap();
        let pixels = random_pixels(8, 41).cast::<f64>();
        let (_, grad) = model.loss_and_input_grad_pixels(&pixels, 0).unwrap();
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        // Spot-check a deterministic stripe of coordinates.
        for i in (0..pixels.numel()).step_by(17) {
            let mut plus = pixels.clone();
            plus.data_mut()[i] += step;
            let mut minus = pixels.clone();
            minus.data_mut()[i] -= step;
            let (lp, _) = model.loss_and_input_grad_pixels(&plus, 0).unwrap();
            let (lm, _) = model.loss_and_input_grad_pixels(&minus, 0).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
        assert!(worst <= 1e-3, "max rel err {}", worst);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let model = Model::<f32>::build(tiny_config()).unwrap();
        let pixels = random_pixels(8, 51);
        assert!(matches!(
            model.loss_and_input_grad_pixels(&pixels, 3),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn descending_the_input_gradient_reduces_loss() {
        let model = Model::<f64>::build(tiny_config()).unwrap();
        let pixels = random_pixels(8, 61).cast::<f64>();
        let (loss, grad) = model.loss_and_input_grad_pixels(&pixels, 2).unwrap();
        let mut stepped = pixels.clone();
        for (p, &g) in stepped.data_mut().iter_mut().zip(grad.data()) {
            *p -= 1e-3 * g;
        }
        let (loss_after, _) = model.loss_and_input_grad_pixels(&stepped, 2).unwrap();
        assert!(loss_after < loss, "{} !< {}", loss_after, loss);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::build(tiny_config()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = Model::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in loaded.parameters().iter().zip(model.parameters()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let pixels = random_pixels(8, 71);
        assert_eq!(
            loaded.predict_pixels(&pixels).unwrap().0,
            model.predict_pixels(&pixels).unwrap().0
        );

        // Header bookkeeping: blob length is 4 bytes per declared parameter.
        let bytes = std::fs::read(&path).unwrap();
        let split = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split]).unwrap();
        assert_eq!(header.param_count, (bytes.len() - split - 2) / 4);
    }

    #[test]
    fn truncated_checkpoint_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::build(tiny_config()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            Model::<f32>::load_checkpoint(&path),
            Err(ModelError::Checkpoint { .. })
        ));
    }

    #[test]
    fn version_mismatch_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::build(tiny_config()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let split = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
        let mut header: CheckpointHeader = serde_json::from_slice(&bytes[..split]).unwrap();
        header.format_version = 99;
        let mut rewritten = serde_json::to_vec(&header).unwrap();
        rewritten.extend_from_slice(b"\n\n");
        rewritten.extend_from_slice(&bytes[split + 2..]);
        std::fs::write(&path, rewritten).unwrap();
        let err = Model::<f32>::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
