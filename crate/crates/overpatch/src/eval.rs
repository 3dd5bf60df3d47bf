//! Attack evaluation and experiment aggregation.
//!
//! [`evaluate_attack`] replays a finished patch over every frame of a
//! sequence at scene-center placement with no jitter (the sequence's own
//! registration offsets already exercise positional error) and records one
//! [`FrameRecord`] per frame, attacked or held out. [`aggregate`] folds
//! many results into per-frame and per-sequence rates, a per-(true, target)
//! success matrix ordered by attack size, and pixel-count histograms.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::attack::AttackConfig;
use crate::edges::{canny, penalty_on_tape, CannyParams, EdgeError};
use crate::geodata::SceneSequence;
use crate::model::{Model, ModelError};
use crate::patch::{clip_footprint, render_tensor, PatchError, PhysicalPatch, Placement};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no results to aggregate")]
    Empty,
    #[error("results mix attack configurations ({0} vs {1}); pass allow_mixed to override")]
    MixedConfigs(String, String),
}

/// Outcome of one frame under a finished attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    /// True when this frame was visible to the optimizer.
    pub attacked: bool,
    pub pre_label: usize,
    /// Prediction on the composite; None when the frame was unevaluable.
    pub post_label: Option<usize>,
    /// Chip pixels the patch manipulated at this frame's GSD.
    pub pixel_count: usize,
    /// Objective value (class term plus penalty) at evaluation placement.
    pub loss: Option<f64>,
    pub evaluable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl FrameRecord {
    pub fn targeted_success(&self, target: Option<usize>) -> bool {
        match (self.post_label, target) {
            (Some(post), Some(t)) => post == t,
            _ => false,
        }
    }

    pub fn is_error(&self, true_label: usize) -> bool {
        matches!(self.post_label, Some(post) if post != true_label)
    }
}

/// Everything recorded about one (sequence, target) attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub scene_id: String,
    pub true_label: usize,
    pub target_label: Option<usize>,
    /// Exactly one record per sequence frame, in time order.
    pub frames: Vec<FrameRecord>,
    /// Path of the saved patch, when one was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_file: Option<String>,
    pub config: AttackConfig,
    pub seed: u64,
}

/// Which frame records enter the aggregate rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    AllFrames,
    HeldOutOnly,
}

impl Scope {
    pub fn label(self) -> &'static str {
        match self {
            Scope::AllFrames => "all-frames",
            Scope::HeldOutOnly => "held-out-only",
        }
    }

    fn keeps(self, record: &FrameRecord) -> bool {
        match self {
            Scope::AllFrames => true,
            Scope::HeldOutOnly => !record.attacked,
        }
    }
}

/// Replays a patch over every frame of a sequence. Frames whose GSD puts
/// the patch below sensor resolution are marked unevaluable and carry a
/// warning instead of failing the whole evaluation.
pub fn evaluate_attack<T: Scalar>(
    model: &Model<T>,
    seq: &SceneSequence,
    patch: &PhysicalPatch,
    cfg: &AttackConfig,
) -> Result<AttackResult, EvalError> {
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (frame_index, frame) in seq.frames.iter().enumerate() {
        let attacked = frame_index < cfg.frames_attacked;
        let (pre_label, _) = model.predict(frame)?;
        let chip_size = frame.size();
        let rendered = render_tensor(patch, frame.metadata.gsd_m_per_px);
        let (raster, p) = match rendered {
            Ok(pair) => pair,
            Err(PatchError::BelowResolution { .. }) => {
                frames.push(FrameRecord {
                    frame_index,
                    attacked,
                    pre_label,
                    post_label: None,
                    pixel_count: 0,
                    loss: None,
                    evaluable: false,
                    warning: Some(format!(
                        "patch below sensor resolution at gsd {}",
                        frame.metadata.gsd_m_per_px
                    )),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };

        let placement = Placement::centered(chip_size);
        let footprint = match clip_footprint(chip_size, p, &placement) {
            Ok(fp) => fp,
            Err(PatchError::FootprintOutsideChip) => {
                frames.push(FrameRecord {
                    frame_index,
                    attacked,
                    pre_label,
                    post_label: None,
                    pixel_count: 0,
                    loss: None,
                    evaluable: false,
                    warning: Some("footprint fully outside chip".into()),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };

        // Value-level composite (no gradients needed at evaluation time).
        let mut composite = frame.pixels.clone();
        {
            let rect = footprint.rect;
            let dst = composite.data_mut();
            let src = raster.data();
            for r in 0..rect.rows {
                let d0 = ((rect.base_row0 + r) * chip_size + rect.base_col0) * 3;
                let s0 = ((rect.patch_row0 + r) * p + rect.patch_col0) * 3;
                dst[d0..d0 + rect.cols * 3].copy_from_slice(&src[s0..s0 + rect.cols * 3]);
            }
        }
        let composite_t = composite.cast::<T>();
        let (post_label, _) = model.predict_pixels(&composite_t)?;

        // Objective value at evaluation: class term plus penalty.
        let mut tape: Tape<T> = Tape::new();
        let mounted = model.mount(&mut tape, false);
        let comp_var = tape.constant(composite_t.clone());
        let orig_var = tape.constant(frame.pixels.cast::<T>());
        let logits = model.forward(&mut tape, &mounted, comp_var)?;
        let ce = match cfg.target {
            Some(target) => tape.softmax_cross_entropy(logits, target)?,
            None => {
                let ce = tape.softmax_cross_entropy(logits, seq.true_label)?;
                tape.scale(ce, -T::one())
            }
        };
        let edges = canny(&frame.grayscale(), CannyParams::default())?;
        let pen = penalty_on_tape(&mut tape, comp_var, orig_var, &footprint, &edges, &cfg.weights)?;
        let loss_var = tape.add(ce, pen)?;
        let loss = tape.value(loss_var).item().to_f64();

        frames.push(FrameRecord {
            frame_index,
            attacked,
            pre_label,
            post_label: Some(post_label),
            pixel_count: footprint.pixel_count(),
            loss: Some(loss),
            evaluable: true,
            warning: None,
        });
    }
    Ok(AttackResult {
        scene_id: seq.scene_id.clone(),
        true_label: seq.true_label,
        target_label: cfg.target,
        frames,
        patch_file: None,
        config: cfg.clone(),
        seed: cfg.seed,
    })
}

/// One row of the per-(true, target) success matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRow {
    pub true_label: usize,
    /// Mean manipulated-pixel count of attacks against this class; rows are
    /// sorted by this value, descending.
    pub mean_pixels: f64,
    /// (target label, targeted success rate) pairs, ascending by target.
    pub per_target: Vec<(usize, f64)>,
}

/// Histogram bin of manipulated-pixel counts, fixed width 100.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin_lo: usize,
    pub count: usize,
}

pub const HISTOGRAM_BIN_WIDTH: usize = 100;

/// Aggregate rates and distributions over one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment_id: String,
    pub scope: String,
    pub n: usize,
    pub element_size_m: f64,
    pub frames_attacked: usize,
    /// Evaluable frame records in scope.
    pub record_count: usize,
    /// Per-frame rates over records in scope.
    pub targeted_success_rate: f64,
    pub total_error_rate: f64,
    /// Per-sequence variant: an attack counts as a success/error when it
    /// fools the classifier on a strict majority of its evaluable frames.
    pub sequence_success_rate: f64,
    pub sequence_error_rate: f64,
    pub matrix: Vec<MatrixRow>,
    pub success_pixel_histogram: Vec<HistBin>,
    pub failure_pixel_histogram: Vec<HistBin>,
}

fn histogram(counts: &[usize]) -> Vec<HistBin> {
    let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts {
        *bins.entry((c / HISTOGRAM_BIN_WIDTH) * HISTOGRAM_BIN_WIDTH).or_default() += 1;
    }
    bins.into_iter()
        .map(|(bin_lo, count)| HistBin { bin_lo, count })
        .collect()
}

/// Folds attack results into an [`EvalReport`]. All results must share the
/// patch geometry and frames-attacked setting unless `allow_mixed` is set.
pub fn aggregate(
    experiment_id: &str,
    results: &[AttackResult],
    scope: Scope,
    allow_mixed: bool,
) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let signature = |r: &AttackResult| {
        format!(
            "n={} element={} frames={}",
            r.config.patch_elements, r.config.element_size_m, r.config.frames_attacked
        )
    };
    let first_sig = signature(&results[0]);
    if !allow_mixed {
        for r in results.iter().skip(1) {
            let sig = signature(r);
            if sig != first_sig {
                return Err(EvalError::MixedConfigs(first_sig, sig));
            }
        }
    }

    let mut record_count = 0usize;
    let mut successes = 0usize;
    let mut errors = 0usize;
    let mut seq_successes = 0usize;
    let mut seq_errors = 0usize;
    let mut success_pixels = Vec::new();
    let mut failure_pixels = Vec::new();
    // (true, target) -> (successes, total); true -> pixel counts.
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    let mut class_pixels: BTreeMap<usize, Vec<usize>> = BTreeMap::new();

    for result in results {
        let mut frame_successes = 0usize;
        let mut frame_errors = 0usize;
        let mut evaluable = 0usize;
        for record in result.frames.iter().filter(|r| r.evaluable && scope.keeps(r)) {
            evaluable += 1;
            record_count += 1;
            let success = record.targeted_success(result.target_label);
            let error = record.is_error(result.true_label);
            if success {
                successes += 1;
                frame_successes += 1;
                success_pixels.push(record.pixel_count);
            } else {
                failure_pixels.push(record.pixel_count);
            }
            if error {
                errors += 1;
                frame_errors += 1;
            }
            if let Some(target) = result.target_label {
                let cell = cells.entry((result.true_label, target)).or_insert((0, 0));
                cell.1 += 1;
                if success {
                    cell.0 += 1;
                }
            }
            class_pixels
                .entry(result.true_label)
                .or_default()
                .push(record.pixel_count);
        }
        if evaluable > 0 {
            if frame_successes * 2 > evaluable {
                seq_successes += 1;
            }
            if frame_errors * 2 > evaluable {
                seq_errors += 1;
            }
        }
    }

    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut matrix: Vec<MatrixRow> = class_pixels
        .iter()
        .map(|(&true_label, pixels)| {
            let mean_pixels =
                pixels.iter().sum::<usize>() as f64 / pixels.len().max(1) as f64;
            let per_target: Vec<(usize, f64)> = cells
                .iter()
                .filter(|((t, _), _)| *t == true_label)
                .map(|((_, target), &(s, n))| (*target, rate(s, n)))
                .collect();
            MatrixRow {
                true_label,
                mean_pixels,
                per_target,
            }
        })
        .collect();
    matrix.sort_by(|a, b| {
        b.mean_pixels
            .partial_cmp(&a.mean_pixels)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.true_label.cmp(&b.true_label))
    });

    let first = &results[0].config;
    Ok(EvalReport {
        experiment_id: experiment_id.to_string(),
        scope: scope.label().to_string(),
        n: first.patch_elements,
        element_size_m: first.element_size_m,
        frames_attacked: first.frames_attacked,
        record_count,
        targeted_success_rate: rate(successes, record_count),
        total_error_rate: rate(errors, record_count),
        sequence_success_rate: rate(seq_successes, results.len()),
        sequence_error_rate: rate(seq_errors, results.len()),
        matrix,
        success_pixel_histogram: histogram(&success_pixels),
        failure_pixel_histogram: histogram(&failure_pixels),
    })
}

/// Composites a patch onto a chip at scene center and dumps it, for visual
/// inspection of attack outputs.
pub fn composite_to_ppm(
    frame: &crate::geodata::ImageChip,
    patch: &PhysicalPatch,
) -> Result<Vec<u8>, EvalError> {
    let (raster, p) = render_tensor(patch, frame.metadata.gsd_m_per_px)?;
    let chip_size = frame.size();
    let footprint = clip_footprint(chip_size, p, &Placement::centered(chip_size))?;
    let mut composite = frame.pixels.clone();
    let rect = footprint.rect;
    {
        let dst = composite.data_mut();
        for r in 0..rect.rows {
            let d0 = ((rect.base_row0 + r) * chip_size + rect.base_col0) * 3;
            let s0 = ((rect.patch_row0 + r) * p + rect.patch_col0) * 3;
            dst[d0..d0 + rect.cols * 3].copy_from_slice(&raster.data()[s0..s0 + rect.cols * 3]);
        }
    }
    let rgb: Vec<u8> = composite
        .data()
        .iter()
        .map(|&v| crate::ppm::quantize(v))
        .collect();
    Ok(crate::ppm::encode_p6(chip_size, chip_size, &rgb))
}
