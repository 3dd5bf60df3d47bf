//! Subcommand implementations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use overpatch::attack::{attack_sequence, AttackConfig, AttackError, TransformSampler};
use overpatch::edges::CannyParams;
use overpatch::eval::{aggregate, composite_to_ppm, AttackResult, EvalError, Scope};
use overpatch::geodata::{filter_admissible, load_sequence, FilterOutcome, GeodataError};
use overpatch::io_util::write_atomic;
use overpatch::model::{Model, ModelError};
use overpatch::patch::{PatchError, PhysicalPatch};
use overpatch::report::write_reports;
use overpatch::seeds;
use overpatch::synth::{generate_dataset, labeled_chips, load_split, Split, SynthError};
use overpatch::tensor::TensorError;

use crate::config::ExperimentConfig;
use crate::GlobalArgs;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
    fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<GeodataError> for CliError {
    fn from(e: GeodataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Geodata(inner) => inner.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        match e {
            PatchError::BelowResolution { .. } | PatchError::FootprintOutsideChip => {
                CliError::numeric(e.to_string())
            }
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::numeric(e.to_string())
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Patch(inner) => inner.into(),
            AttackError::Tensor(inner) => inner.into(),
            AttackError::Model(inner) => inner.into(),
            AttackError::Eval(inner) => inner.into(),
            AttackError::Edge(inner) => CliError::numeric(inner.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Patch(inner) => inner.into(),
            EvalError::Tensor(inner) => inner.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<overpatch::report::ReportError> for CliError {
    fn from(e: overpatch::report::ReportError) -> Self {
        CliError::data(e.to_string())
    }
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &global.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::usage(format!("unreadable config {}: {e}", path.display())))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| CliError::usage(format!("malformed config {}: {e}", path.display())))?
        }
    };
    if let Some(seed) = global.seed {
        config.override_seed(seed);
    }
    Ok(config)
}

fn require_out(global: &GlobalArgs) -> Result<&Path, CliError> {
    global
        .out
        .as_deref()
        .ok_or_else(|| CliError::usage("--out is required for this command"))
}

// ── synth-data ──────────────────────────────────────────────────────

pub fn synth_data(global: &GlobalArgs) -> Result<(), CliError> {
    let config = load_config(global)?;
    let out = require_out(global)?;
    let manifest = generate_dataset(&config.synth, out, global.force)?;
    eprintln!(
        "wrote {} train and {} val scenes to {}",
        manifest.train.len(),
        manifest.val.len(),
        out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

pub fn train(global: &GlobalArgs, data: &Path) -> Result<(), CliError> {
    let config = load_config(global)?;
    let out = require_out(global)?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;

    let train_set = labeled_chips(&load_split(data, Split::Train)?);
    let val_set = labeled_chips(&load_split(data, Split::Val)?);
    let mut model = Model::<f32>::build(config.model.clone())?;
    let log = model.train(&train_set, &val_set, &config.train)?;
    let ckpt = out.join("model.ckpt");
    model.save_checkpoint(&ckpt)?;
    let log_json = serde_json::to_vec_pretty(&log).expect("log serializes");
    write_atomic(&out.join("training_log.json"), &log_json)
        .map_err(|e| CliError::data(format!("training_log.json: {e}")))?;
    eprintln!(
        "trained {} epochs to held-out accuracy {:.4}; checkpoint at {}",
        log.epochs.len(),
        log.final_val_accuracy(),
        ckpt.display()
    );
    Ok(())
}

// ── attack ──────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct AttackRunSummary {
    master_seed: u64,
    completed: Vec<AttackTaskSummary>,
    skipped: Vec<SkippedPair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttackTaskSummary {
    scene_id: String,
    target: usize,
    result_file: String,
    patch_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SkippedPair {
    scene_id: String,
    target: usize,
    reason: String,
}

pub fn attack(
    global: &GlobalArgs,
    data: &Path,
    model_path: &Path,
    dump_composites: bool,
) -> Result<(), CliError> {
    let config = load_config(global)?;
    let out = require_out(global)?;
    if out.exists()
        && std::fs::read_dir(out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false)
        && !global.force
    {
        return Err(CliError::data(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;

    let model = Model::<f32>::load_checkpoint(model_path)?;
    let split = match config.attack.split.as_str() {
        "val" => Split::Val,
        "train" => Split::Train,
        other => return Err(CliError::usage(format!("unknown split {other:?}"))),
    };
    let sequences = load_split(data, split)?;
    let master_seed = global.seed.unwrap_or(config.synth.master_seed);

    // Admissibility filtering, then the (sequence x target) manifest.
    let mut admissible = Vec::new();
    let mut skipped = Vec::new();
    for seq in &sequences {
        match filter_admissible(seq, &model, &config.filter)? {
            FilterOutcome::Admissible(kept) => admissible.push(kept),
            FilterOutcome::Rejected { kept, required } => skipped.push(SkippedPair {
                scene_id: seq.scene_id.clone(),
                target: usize::MAX,
                reason: format!("sequence rejected: {kept} admissible frames < {required}"),
            }),
        }
    }
    if let Some(cap) = config.attack.max_sequences {
        admissible.truncate(cap);
    }
    let mut manifest = Vec::new();
    for seq in &admissible {
        for &target in &config.attack.targets {
            if target == seq.true_label {
                eprintln!(
                    "skipping {} target {target}: equals true label",
                    seq.scene_id
                );
                skipped.push(SkippedPair {
                    scene_id: seq.scene_id.clone(),
                    target,
                    reason: "target equals true label".into(),
                });
                continue;
            }
            manifest.push((seq, target));
        }
    }
    eprintln!(
        "attacking {} (sequence, target) pairs over {} admissible sequences",
        manifest.len(),
        admissible.len()
    );

    let jobs = global.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::data(format!("thread pool: {e}")))?;

    // Per-task seeds derive from (master, scene, target), so results do not
    // depend on scheduling order.
    let outputs: Vec<Result<AttackTaskSummary, CliError>> = pool.install(|| {
        use rayon::prelude::*;
        manifest
            .par_iter()
            .map(|(seq, target)| {
                let task_seed =
                    seeds::derive(master_seed, &[seeds::hash_str(&seq.scene_id), *target as u64]);
                let cfg = AttackConfig {
                    target: Some(*target),
                    frames_attacked: config.attack.frames_attacked,
                    patch_elements: config.attack.patch_elements,
                    element_size_m: config.attack.element_size_m,
                    weights: config.attack.weights,
                    phases: config.attack.phases.clone(),
                    jitter_px: config.attack.jitter_px,
                    seed: task_seed,
                };
                let mut sampler = TransformSampler::new(cfg.jitter_px, cfg.seed);
                let output = attack_sequence(&model, seq, &cfg, &mut sampler)?;

                let stem = format!("{}_t{}", seq.scene_id, target);
                let patch_file = format!("patch_{stem}.opatch");
                output.patch.save(&out.join(&patch_file))?;
                let mut result = output.result;
                result.patch_file = Some(patch_file.clone());
                let result_file = format!("result_{stem}.json");
                let json = serde_json::to_vec_pretty(&result).expect("result serializes");
                write_atomic(&out.join(&result_file), &json)
                    .map_err(|e| CliError::data(format!("{result_file}: {e}")))?;
                if dump_composites {
                    for (idx, frame) in seq.frames.iter().enumerate() {
                        match composite_to_ppm(frame, &output.patch) {
                            Ok(bytes) => {
                                let name = format!("composite_{stem}_f{idx:02}.ppm");
                                write_atomic(&out.join(name), &bytes)
                                    .map_err(|e| CliError::data(e.to_string()))?;
                            }
                            Err(EvalError::Patch(PatchError::BelowResolution { .. })) => {}
                            Err(e) => return Err(e.into()),
                        }
                        let mask =
                            overpatch::edges::canny(&frame.grayscale(), CannyParams::default())
                                .map_err(|e| CliError::numeric(e.to_string()))?;
                        let name = format!("edges_{stem}_f{idx:02}.pbm");
                        write_atomic(&out.join(name), &mask.to_pbm())
                            .map_err(|e| CliError::data(e.to_string()))?;
                    }
                }
                Ok(AttackTaskSummary {
                    scene_id: seq.scene_id.clone(),
                    target: *target,
                    result_file,
                    patch_file,
                })
            })
            .collect()
    });

    let mut completed = Vec::new();
    for output in outputs {
        completed.push(output?);
    }
    let summary = AttackRunSummary {
        master_seed,
        completed,
        skipped,
    };
    let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    write_atomic(&out.join("attacks.json"), &json)
        .map_err(|e| CliError::data(format!("attacks.json: {e}")))?;
    eprintln!("completed {} attacks", summary.completed.len());
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────

pub fn evaluate(
    global: &GlobalArgs,
    model_path: &Path,
    patch_path: &Path,
    scene_dir: &Path,
    target: Option<usize>,
    frames_attacked: usize,
) -> Result<(), CliError> {
    let config = load_config(global)?;
    let out = require_out(global)?;
    let model = Model::<f32>::load_checkpoint(model_path)?;
    let patch = PhysicalPatch::load(patch_path)?;
    let seq = load_sequence(scene_dir)?;
    if let Some(t) = target {
        if t == seq.true_label {
            return Err(CliError::usage(format!(
                "target {t} equals the scene's true label"
            )));
        }
    }
    let cfg = AttackConfig {
        target,
        frames_attacked,
        patch_elements: patch.elements_per_side(),
        element_size_m: patch.element_size_m(),
        weights: config.attack.weights,
        phases: config.attack.phases.clone(),
        jitter_px: config.attack.jitter_px,
        seed: global.seed.unwrap_or(0),
    };
    let mut result = overpatch::eval::evaluate_attack(&model, &seq, &patch, &cfg)?;
    result.patch_file = Some(patch_path.display().to_string());
    let json = serde_json::to_vec_pretty(&result).expect("result serializes");
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
        }
    }
    write_atomic(out, &json).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────

fn config_signature(result: &AttackResult) -> String {
    // Everything except the per-task identity (scene, target, seed).
    format!(
        "n={} element={} frames={} weights={:?} phases={:?} jitter={}",
        result.config.patch_elements,
        result.config.element_size_m,
        result.config.frames_attacked,
        result.config.weights,
        result.config.phases,
        result.config.jitter_px
    )
}

pub fn report(global: &GlobalArgs, results_dir: &Path, allow_mixed: bool) -> Result<(), CliError> {
    let out = require_out(global)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(results_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", results_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("result_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no result_*.json files under {}",
            results_dir.display()
        )));
    }
    let mut results = Vec::with_capacity(files.len());
    for file in &files {
        let bytes = std::fs::read(file)
            .map_err(|e| CliError::data(format!("{}: {e}", file.display())))?;
        let result: AttackResult = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::data(format!("{}: {e}", file.display())))?;
        results.push(result);
    }

    // Group into experiments by attack geometry, ordered by
    // (frames_attacked, n, element size); ids count up from 1.
    let mut keys: Vec<(usize, usize, String)> = results
        .iter()
        .map(|r| {
            (
                r.config.frames_attacked,
                r.config.patch_elements,
                format!("{}", r.config.element_size_m),
            )
        })
        .collect();
    keys.sort();
    keys.dedup();

    let mut reports = Vec::new();
    for (exp_index, key) in keys.iter().enumerate() {
        let group: Vec<AttackResult> = results
            .iter()
            .filter(|r| {
                (
                    r.config.frames_attacked,
                    r.config.patch_elements,
                    format!("{}", r.config.element_size_m),
                ) == *key
            })
            .cloned()
            .collect();
        // Heterogeneity beyond geometry within one experiment needs the
        // explicit override.
        let first_sig = config_signature(&group[0]);
        if !allow_mixed {
            if let Some(other) = group.iter().find(|r| config_signature(r) != first_sig) {
                return Err(CliError::data(format!(
                    "mixed attack configs within experiment {} ({} vs {}); pass --allow-mixed",
                    exp_index + 1,
                    first_sig,
                    config_signature(other)
                )));
            }
        }
        let exp_id = format!("{}", exp_index + 1);
        for scope in [Scope::AllFrames, Scope::HeldOutOnly] {
            reports.push(aggregate(&exp_id, &group, scope, allow_mixed)?);
        }
    }
    write_reports(out, &reports)?;
    eprintln!(
        "wrote report.csv, histograms.csv, report.json for {} experiments to {}",
        keys.len(),
        out.display()
    );
    Ok(())
}
