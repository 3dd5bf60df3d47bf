//! Attack optimizers: single-image FGS and iterative FGS baselines, the
//! stochastic transform sampler, and the joint multi-frame patch attack.
//!
//! The patch attack minimizes, over the element colors r, the mean over the
//! attacked frames of `J(overlay(t_i(x_i), t_i(r)), target) + d(...)`,
//! where `t_i` renders at frame i's ground sample distance and places the
//! patch at a jittered scene center, and `d` is the edge-aware penalty. One
//! fixed r serves every frame; projection keeps elements in `[0, 1]` after
//! each step. Non-targeted mode ascends the true-label loss instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edges::{canny, CannyParams, EdgeError, EdgeMask, PenaltyWeights};
use crate::eval::{evaluate_attack, AttackResult, EvalError};
use crate::geodata::{ImageChip, SceneSequence};
use crate::model::{Model, ModelError};
use crate::patch::{
    overlay_on_tape, render_map, render_on_tape, PatchError, PhysicalPatch, Placement, RenderMap,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("targeted attack must not target the sequence's true label {0}")]
    TargetIsTrueLabel(usize),
    #[error("frames_attacked {requested} outside 1..={available}")]
    FramesAttacked { requested: usize, available: usize },
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("sample set sizes disagree: {0} originals vs {1} composites")]
    SampleSizeMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One segment of the learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub learning_rate: f64,
}

/// Configuration of one patch attack against one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Class the attack drives the prediction toward; None runs the
    /// non-targeted variant (ascend the true-label loss).
    pub target: Option<usize>,
    /// How many leading frames the attacker can see.
    pub frames_attacked: usize,
    /// Elements per patch side (n).
    pub patch_elements: usize,
    pub element_size_m: f64,
    pub weights: PenaltyWeights,
    /// Two-phase schedule by default: 1000 epochs at 100, 1000 at 20.
    pub phases: Vec<Phase>,
    /// Training-time positional uncertainty bound (pixels).
    pub jitter_px: i32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            target: None,
            frames_attacked: 1,
            patch_elements: 60,
            element_size_m: 0.5,
            weights: PenaltyWeights::default(),
            phases: vec![
                Phase {
                    epochs: 1000,
                    learning_rate: 100.0,
                },
                Phase {
                    epochs: 1000,
                    learning_rate: 20.0,
                },
            ],
            jitter_px: 2,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, seq: &SceneSequence, class_count: usize) -> Result<(), AttackError> {
        if self.patch_elements == 0 || !(self.element_size_m > 0.0) {
            return Err(AttackError::Config(
                "patch geometry must be positive".into(),
            ));
        }
        if self.phases.is_empty() {
            return Err(AttackError::Config("need at least one phase".into()));
        }
        if self.jitter_px < 0 {
            return Err(AttackError::Config("jitter_px must be non-negative".into()));
        }
        if self.frames_attacked == 0 || self.frames_attacked > seq.frames.len() {
            return Err(AttackError::FramesAttacked {
                requested: self.frames_attacked,
                available: seq.frames.len(),
            });
        }
        if let Some(target) = self.target {
            if target >= class_count {
                return Err(AttackError::Config(format!(
                    "target {target} out of range for {class_count} classes"
                )));
            }
            if target == seq.true_label {
                return Err(AttackError::TargetIsTrueLabel(target));
            }
        }
        Ok(())
    }
}

/// Samples the stochastic part of the sensing transform: per-frame integer
/// translation jitter, uniform over `[-J, J]^2`. Scale is not sampled; it
/// comes deterministically from each frame's recorded GSD.
pub struct TransformSampler {
    jitter_px: i32,
    rng: ChaCha8Rng,
}

impl TransformSampler {
    pub fn new(jitter_px: i32, seed: u64) -> Self {
        Self {
            jitter_px,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One offset per frame; deterministic (all zeros) when the bound is 0.
    pub fn sample_offsets(&mut self, frames: usize) -> Vec<(i32, i32)> {
        (0..frames)
            .map(|_| {
                if self.jitter_px == 0 {
                    (0, 0)
                } else {
                    (
                        self.rng.gen_range(-self.jitter_px..=self.jitter_px),
                        self.rng.gen_range(-self.jitter_px..=self.jitter_px),
                    )
                }
            })
            .collect()
    }
}

// ── FGS baselines ───────────────────────────────────────────────────

/// Signed-gradient step before clamping: `x + eps * sign(grad J(x, label))`.
/// Exposed separately so tests can check the pre-clamp arithmetic.
pub fn fgs_step_pixels<T: Scalar>(
    model: &Model<T>,
    pixels: &Tensor<T>,
    label: usize,
    epsilon: f64,
) -> Result<(Tensor<T>, Tensor<T>), AttackError> {
    let (_, grad) = model.loss_and_input_grad_pixels(pixels, label)?;
    let eps = T::from_f64(epsilon);
    let stepped: Vec<T> = pixels
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| {
            let sign = if g > T::zero() {
                T::one()
            } else if g < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            x + eps * sign
        })
        .collect();
    Ok((
        Tensor::new(pixels.shape().to_vec(), stepped).unwrap(),
        grad,
    ))
}

/// Fast gradient sign: one signed step of magnitude `epsilon` away from the
/// model's current prediction for the chip, clamped back into `[0, 1]`.
pub fn fgs<T: Scalar>(
    model: &Model<T>,
    chip: &ImageChip,
    epsilon: f64,
) -> Result<ImageChip, AttackError> {
    if epsilon < 0.0 {
        return Err(AttackError::Config("epsilon must be non-negative".into()));
    }
    let pixels = chip.pixels.cast::<T>();
    let (label, _) = model.predict_pixels(&pixels)?;
    let (stepped, _) = fgs_step_pixels(model, &pixels, label, epsilon)?;
    let clamped: Vec<f32> = stepped
        .data()
        .iter()
        .map(|&v| v.to_f64().clamp(0.0, 1.0) as f32)
        .collect();
    Ok(ImageChip {
        pixels: Tensor::new(pixels.shape().to_vec(), clamped).unwrap(),
        metadata: chip.metadata.clone(),
    })
}

/// Iterated signed steps of size `alpha`, each projected onto the
/// l-infinity ball of radius `epsilon` around the original chip intersected
/// with `[0, 1]`. The loss label is fixed at the model's prediction for the
/// original input.
pub fn iterative_fgs<T: Scalar>(
    model: &Model<T>,
    chip: &ImageChip,
    epsilon: f64,
    alpha: f64,
    iterations: usize,
) -> Result<ImageChip, AttackError> {
    if !(alpha > 0.0) {
        return Err(AttackError::Config("alpha must be positive".into()));
    }
    if epsilon < 0.0 {
        return Err(AttackError::Config("epsilon must be non-negative".into()));
    }
    let original = chip.pixels.cast::<T>();
    let (label, _) = model.predict_pixels(&original)?;
    let mut current = original.clone();
    for _ in 0..iterations {
        let (stepped, _) = fgs_step_pixels(model, &current, label, alpha)?;
        let projected: Vec<T> = stepped
            .data()
            .iter()
            .zip(original.data())
            .map(|(&v, &x0)| {
                let lo = (x0.to_f64() - epsilon).max(0.0);
                let hi = (x0.to_f64() + epsilon).min(1.0);
                T::from_f64(v.to_f64().clamp(lo, hi))
            })
            .collect();
        current = Tensor::new(original.shape().to_vec(), projected).unwrap();
    }
    let pixels: Vec<f32> = current.data().iter().map(|&v| v.to_f32()).collect();
    Ok(ImageChip {
        pixels: Tensor::new(original.shape().to_vec(), pixels).unwrap(),
        metadata: chip.metadata.clone(),
    })
}

// ── Joint multi-frame patch attack ──────────────────────────────────

/// Everything an attack run produces: the optimized patch, the per-frame
/// evaluation over the whole sequence, and the objective trace.
#[derive(Debug)]
pub struct AttackOutput {
    pub patch: PhysicalPatch,
    pub result: AttackResult,
    /// Mean objective value at each epoch, in order.
    pub objective_trace: Vec<f64>,
}

struct FrameSetup<T> {
    pixels: Tensor<T>,
    map: RenderMap,
    edges: EdgeMask,
}

fn prepare_frames<T: Scalar>(
    seq: &SceneSequence,
    cfg: &AttackConfig,
) -> Result<Vec<FrameSetup<T>>, AttackError> {
    let mut setups = Vec::with_capacity(cfg.frames_attacked);
    for frame in seq.frames.iter().take(cfg.frames_attacked) {
        let map = render_map(
            cfg.patch_elements,
            cfg.element_size_m,
            frame.metadata.gsd_m_per_px,
        )?;
        let edges = canny(&frame.grayscale(), CannyParams::default())?;
        setups.push(FrameSetup {
            pixels: frame.pixels.cast::<T>(),
            map,
            edges,
        });
    }
    Ok(setups)
}

/// Element initialization: the mean of the chip pixels each element covers
/// in the first attacked frame (elements left uncovered by subsampling get
/// the global mean of the covered region).
fn init_elements<T: Scalar>(
    frame: &FrameSetup<T>,
    chip_size: usize,
    n: usize,
) -> Result<Tensor<T>, AttackError> {
    let p = frame.map.pixels_per_side;
    let footprint = crate::patch::clip_footprint(chip_size, p, &Placement::centered(chip_size))?;
    let rect = footprint.rect;
    let chip = frame.pixels.data();
    let map = frame.map.indices();

    let mut sums = vec![0.0f64; n * n * 3];
    let mut counts = vec![0usize; n * n * 3];
    let mut global = [0.0f64; 3];
    let mut global_count = 0usize;
    for r in 0..rect.rows {
        for c in 0..rect.cols {
            let chip_idx = ((rect.base_row0 + r) * chip_size + rect.base_col0 + c) * 3;
            let raster_idx = ((rect.patch_row0 + r) * p + rect.patch_col0 + c) * 3;
            for ch in 0..3 {
                let v = chip[chip_idx + ch].to_f64();
                let e = map[raster_idx + ch];
                sums[e] += v;
                counts[e] += 1;
                global[ch] += v;
            }
            global_count += 1;
        }
    }
    let data: Vec<T> = (0..n * n * 3)
        .map(|i| {
            let v = if counts[i] > 0 {
                sums[i] / counts[i] as f64
            } else {
                global[i % 3] / global_count.max(1) as f64
            };
            T::from_f64(v.clamp(0.0, 1.0))
        })
        .collect();
    Ok(Tensor::new(vec![n, n, 3], data).unwrap())
}

/// Optimizes one patch against one admissible sequence and evaluates it
/// across every frame (attacked and held out). Jitter is resampled every
/// epoch; evaluation applies none.
pub fn attack_sequence<T: Scalar>(
    model: &Model<T>,
    seq: &SceneSequence,
    cfg: &AttackConfig,
    sampler: &mut TransformSampler,
) -> Result<AttackOutput, AttackError> {
    cfg.validate(seq, model.config().class_count)?;
    let chip_size = seq.frames[0].size();
    let n = cfg.patch_elements;
    let frames = prepare_frames::<T>(seq, cfg)?;
    let mut elements = init_elements(&frames[0], chip_size, n)?;

    let mut objective_trace = Vec::new();
    for phase in &cfg.phases {
        let lr = T::from_f64(phase.learning_rate);
        for _ in 0..phase.epochs {
            let offsets = sampler.sample_offsets(frames.len());
            let mut tape: Tape<T> = Tape::new();
            let mounted = model.mount(&mut tape, false);
            let elems_var = tape.leaf(elements.clone(), true);
            let mut total: Option<Var> = None;
            for (frame, &offset) in frames.iter().zip(&offsets) {
                let raster = render_on_tape(&mut tape, elems_var, &frame.map)?;
                let chip_var = tape.constant(frame.pixels.clone());
                let placement = Placement::jittered(chip_size, offset);
                let (composite, footprint) =
                    overlay_on_tape(&mut tape, chip_var, raster, &placement)?;
                let logits = model.forward(&mut tape, &mounted, composite)?;
                let ce_term = match cfg.target {
                    Some(target) => tape.softmax_cross_entropy(logits, target)?,
                    None => {
                        let ce = tape.softmax_cross_entropy(logits, seq.true_label)?;
                        tape.scale(ce, -T::one())
                    }
                };
                let pen = crate::edges::penalty_on_tape(
                    &mut tape,
                    composite,
                    chip_var,
                    &footprint,
                    &frame.edges,
                    &cfg.weights,
                )?;
                let frame_loss = tape.add(ce_term, pen)?;
                total = Some(match total {
                    None => frame_loss,
                    Some(acc) => tape.add(acc, frame_loss)?,
                });
            }
            let total = total.expect("at least one attacked frame");
            let mean = tape.scale(total, T::one() / T::from_usize(frames.len()));
            objective_trace.push(tape.value(mean).item().to_f64());
            tape.backward(mean)?;
            let grad = tape.grad(elems_var).expect("elements require grad");
            for (e, &g) in elements.data_mut().iter_mut().zip(grad.data()) {
                let stepped = *e - lr * g;
                let one = T::one();
                *e = if stepped < T::zero() {
                    T::zero()
                } else if stepped > one {
                    one
                } else {
                    stepped
                };
            }
        }
    }

    let patch_elements: Vec<f32> = elements.data().iter().map(|&v| v.to_f32()).collect();
    let patch = PhysicalPatch::new(
        n,
        cfg.element_size_m,
        Tensor::new(vec![n, n, 3], patch_elements).unwrap(),
    )?;
    let result = evaluate_attack(model, seq, &patch, cfg)?;
    Ok(AttackOutput {
        patch,
        result,
        objective_trace,
    })
}

/// Empirical expectation-over-transformation distance: the mean of a
/// distance metric over explicit (original, composite) sample pairs.
pub fn eot_distance<T: Scalar>(
    originals: &[Tensor<T>],
    composites: &[Tensor<T>],
    metric: impl Fn(&Tensor<T>, &Tensor<T>) -> f64,
) -> Result<f64, AttackError> {
    if originals.is_empty() {
        return Err(AttackError::EmptySampleSet);
    }
    if originals.len() != composites.len() {
        return Err(AttackError::SampleSizeMismatch(
            originals.len(),
            composites.len(),
        ));
    }
    let total: f64 = originals
        .iter()
        .zip(composites)
        .map(|(a, b)| metric(a, b))
        .sum();
    Ok(total / originals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{FrameMetadata, PixelBox};
    use crate::model::ModelConfig;
    use chrono::TimeZone;

    fn meta(gsd: f64, ts: i64) -> FrameMetadata {
        FrameMetadata {
            gsd_m_per_px: gsd,
            off_nadir_deg: 5.0,
            cloud_cover_frac: 0.0,
            sun_elevation_deg: 75.0,
            timestamp: chrono::Utc.timestamp_opt(ts, 0).unwrap(),
            bbox: PixelBox {
                x: 0,
                y: 0,
                width: 16,
                height: 16,
            },
            registration_offset_px: None,
        }
    }

    fn random_chip(size: usize, seed: u64, gsd: f64, ts: i64) -> ImageChip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageChip {
            pixels: Tensor::new(vec![size, size, 3], data).unwrap(),
            metadata: meta(gsd, ts),
        }
    }

    fn linear_model(seed: u64, size: usize, classes: usize) -> Model<f64> {
        Model::build(ModelConfig {
            input_size: size,
            channels: 3,
            class_count: classes,
            conv_filters: vec![],
            dense_widths: vec![],
            seed,
        })
        .unwrap()
    }

    #[test]
    fn fgs_with_zero_epsilon_is_identity() {
        let model = linear_model(1, 8, 3);
        let chip = random_chip(8, 2, 0.5, 0);
        let adv = fgs(&model, &chip, 0.0).unwrap();
        assert_eq!(adv.pixels, chip.pixels);
    }

    #[test]
    fn fgs_stays_within_epsilon_in_sup_norm() {
        let model = linear_model(3, 8, 3);
        let chip = random_chip(8, 4, 0.5, 0);
        let eps = 0.07;
        let adv = fgs(&model, &chip, eps).unwrap();
        for (&a, &x) in adv.pixels.data().iter().zip(chip.pixels.data()) {
            assert!((a - x).abs() <= eps as f32 + 1e-6);
        }
    }

    #[test]
    fn fgs_first_order_increase_matches_analytic_linear_gradient() {
        // On a linear-softmax model the input gradient has the closed form
        // W (p - e_y) reshaped over pixels; the first-order loss increase of
        // the signed step is exactly eps * l1-norm of that gradient.
        let model = linear_model(5, 6, 2);
        let chip = random_chip(6, 6, 0.5, 0);
        let pixels = chip.pixels.cast::<f64>();
        let (label, probs) = model.predict_pixels(&pixels).unwrap();
        let eps = 0.05;
        let (_, grad) = fgs_step_pixels(&model, &pixels, label, eps).unwrap();

        // Analytic gradient: head weights are parameter 0 ([d, k]).
        let weights = &model.parameters()[0];
        let k = model.config().class_count;
        let d = pixels.numel();
        let mut analytic = vec![0.0f64; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..k {
                let indicator = if j == label { 1.0 } else { 0.0 };
                acc += weights.data()[i * k + j] * (probs[j] - indicator);
            }
            analytic[i] = acc;
        }
        let mut l1 = 0.0;
        for (&a, &g) in analytic.iter().zip(grad.data()) {
            assert!((a - g).abs() < 1e-9, "autodiff vs closed form: {a} vs {g}");
            l1 += a.abs();
        }
        let first_order: f64 = grad
            .data()
            .iter()
            .map(|&g| {
                let s = if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g * eps * s
            })
            .sum();
        assert!((first_order - eps * l1).abs() < 1e-6);
    }

    #[test]
    fn iterative_fgs_matches_fgs_on_linear_model() {
        // Binary linear-softmax keeps sign(grad) constant along the path,
        // so iterated projected steps land exactly on the fgs output.
        let model = linear_model(7, 6, 2);
        let chip = random_chip(6, 8, 0.5, 0);
        let eps = 0.05;
        let single = fgs(&model, &chip, eps).unwrap();
        for iterations in [1usize, 3, 7] {
            let alpha = eps / iterations as f64;
            let multi = iterative_fgs(&model, &chip, eps, alpha, iterations).unwrap();
            let max_diff: f32 = multi
                .pixels
                .data()
                .iter()
                .zip(single.pixels.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(max_diff <= 1e-6, "iterations {iterations}: {max_diff}");
        }
        // Oversized steps are clipped onto the ball: same answer.
        let clipped = iterative_fgs(&model, &chip, eps, eps, 4).unwrap();
        assert_eq!(clipped.pixels.data(), single.pixels.data());
    }

    #[test]
    fn iterative_stays_within_ball() {
        let model = linear_model(9, 6, 3);
        let chip = random_chip(6, 10, 0.5, 0);
        let eps = 0.03;
        let adv = iterative_fgs(&model, &chip, eps, 0.02, 10).unwrap();
        for (&a, &x) in adv.pixels.data().iter().zip(chip.pixels.data()) {
            assert!((a - x).abs() <= eps as f32 + 1e-6);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    fn toy_sequence(frames: usize, size: usize) -> SceneSequence {
        let frames: Vec<ImageChip> = (0..frames)
            .map(|i| random_chip(size, 100 + i as u64, 0.5, i as i64 * 1000))
            .collect();
        SceneSequence {
            scene_id: "toy".into(),
            true_label: 0,
            frames,
        }
    }

    fn toy_attack_config(target: Option<usize>, frames_attacked: usize) -> AttackConfig {
        AttackConfig {
            target,
            frames_attacked,
            patch_elements: 4,
            element_size_m: 0.5,
            weights: PenaltyWeights::default(),
            phases: vec![Phase {
                epochs: 25,
                learning_rate: 0.01,
            }],
            jitter_px: 0,
            seed: 3,
        }
    }

    #[test]
    fn objective_decreases_on_convex_toy_problem() {
        // Linear model, all frames attacked, no edge term: each epoch of
        // small-step descent on a convex objective must not increase it
        // (jitter disabled, so the objective is deterministic).
        let model = linear_model(11, 16, 2);
        let seq = toy_sequence(3, 16);
        let mut cfg = toy_attack_config(Some(1), 3);
        cfg.weights = PenaltyWeights {
            lambda1: 1e-3,
            lambda2: 0.0,
        };
        let mut sampler = TransformSampler::new(0, 5);
        let out = attack_sequence(&model, &seq, &cfg, &mut sampler).unwrap();
        let trace = &out.objective_trace;
        assert!(trace.len() == 25);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
        }
        assert!(trace.last().unwrap() < trace.first().unwrap());
    }

    #[test]
    fn attack_is_deterministic_given_seed() {
        let model = linear_model(13, 16, 3);
        let seq = toy_sequence(4, 16);
        let run = || {
            let cfg = toy_attack_config(Some(2), 2);
            let mut sampler = TransformSampler::new(cfg.jitter_px, cfg.seed);
            attack_sequence(&model, &seq, &cfg, &mut sampler).unwrap()
        };
        let a = run();
        let b = run();
        let bits = |p: &PhysicalPatch| -> Vec<u32> {
            p.elements().data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a.patch), bits(&b.patch));
        assert_eq!(
            serde_json::to_string(&a.result).unwrap(),
            serde_json::to_string(&b.result).unwrap()
        );
    }

    #[test]
    fn huge_image_match_weight_pulls_patch_toward_scene() {
        // With an enormous lambda1 and no class term influence to speak of,
        // the optimum is the covered original pixels themselves.
        let model = linear_model(15, 16, 2);
        let seq = toy_sequence(1, 16);
        let cfg = AttackConfig {
            target: Some(1),
            frames_attacked: 1,
            patch_elements: 4,
            element_size_m: 0.5,
            weights: PenaltyWeights {
                lambda1: 1e5,
                lambda2: 0.0,
            },
            phases: vec![Phase {
                epochs: 300,
                learning_rate: 2e-6,
            }],
            jitter_px: 0,
            seed: 1,
        };
        let mut sampler = TransformSampler::new(0, 1);
        let out = attack_sequence(&model, &seq, &cfg, &mut sampler).unwrap();

        // Compare against the per-element means of the covered pixels.
        let frames = prepare_frames::<f64>(&seq, &cfg).unwrap();
        let target = init_elements(&frames[0], 16, 4).unwrap();
        let max_diff: f64 = out
            .patch
            .elements()
            .cast::<f64>()
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 0.05, "patch strayed {max_diff} from scene pixels");
    }

    #[test]
    fn config_validation_rejects_bad_targets() {
        let model = linear_model(17, 16, 3);
        let seq = toy_sequence(2, 16);
        let cfg = toy_attack_config(Some(0), 1); // target == true label
        let mut sampler = TransformSampler::new(0, 1);
        assert!(matches!(
            attack_sequence(&model, &seq, &cfg, &mut sampler),
            Err(AttackError::TargetIsTrueLabel(0))
        ));
        let cfg = toy_attack_config(Some(1), 9); // more frames than exist
        assert!(matches!(
            attack_sequence(&model, &seq, &cfg, &mut sampler),
            Err(AttackError::FramesAttacked { .. })
        ));
    }

    #[test]
    fn render_below_resolution_fails_the_attack() {
        let model = linear_model(19, 16, 2);
        let mut seq = toy_sequence(1, 16);
        seq.frames[0].metadata.gsd_m_per_px = 100.0;
        let cfg = toy_attack_config(Some(1), 1);
        let mut sampler = TransformSampler::new(0, 1);
        assert!(matches!(
            attack_sequence(&model, &seq, &cfg, &mut sampler),
            Err(AttackError::Patch(PatchError::BelowResolution { .. }))
        ));
    }

    #[test]
    fn sampler_with_zero_bound_is_deterministic() {
        let mut s = TransformSampler::new(0, 99);
        assert!(s.sample_offsets(5).iter().all(|&o| o == (0, 0)));
        let mut s = TransformSampler::new(2, 99);
        let offsets = s.sample_offsets(100);
        assert!(offsets
            .iter()
            .all(|&(r, c)| r.abs() <= 2 && c.abs() <= 2));
        assert!(offsets.iter().any(|&o| o != (0, 0)));
    }

    #[test]
    fn eot_distance_is_the_sample_mean() {
        let a = Tensor::<f64>::filled(vec![2], 0.0);
        let b = Tensor::<f64>::filled(vec![2], 1.0);
        let l1 = |x: &Tensor<f64>, y: &Tensor<f64>| -> f64 {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| (u - v).abs())
                .sum()
        };
        // Identical pairs: zero.
        assert_eq!(
            eot_distance(&[a.clone()], &[a.clone()], l1).unwrap(),
            0.0
        );
        // One pair: the metric itself.
        assert_eq!(eot_distance(&[a.clone()], &[b.clone()], l1).unwrap(), 2.0);
        // Two pairs: the arithmetic mean.
        assert_eq!(
            eot_distance(&[a.clone(), a.clone()], &[a.clone(), b], l1).unwrap(),
            1.0
        );
        assert!(matches!(
            eot_distance(&[], &[], l1),
            Err(AttackError::EmptySampleSet)
        ));
        assert!(matches!(
            eot_distance(&[a.clone()], &[], l1),
            Err(AttackError::SampleSizeMismatch(1, 0))
        ));
    }
}
