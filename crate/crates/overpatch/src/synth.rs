//! Deterministic generator of synthetic revisit sequences.
//!
//! Each scene is a procedural ground texture anchored in world coordinates
//! (meters), re-sensed once per frame under the nuisances a satellite
//! revisit would see: a fresh ground sample distance (scale), sun-driven
//! brightness, seasonal hue drift, integer registration jitter, and
//! occasional cloud blobs. Every nuisance that is applied is recorded
//! truthfully in the frame metadata.

use std::path::{Path, PathBuf};

use chrono::{Datelike, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geodata::{
    save_sequence, FrameMetadata, GeodataError, ImageChip, PixelBox, SceneSequence,
};
use crate::io_util::write_atomic;
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("output directory {path} is not empty (pass force to overwrite)")]
    OutputNotEmpty { path: PathBuf },
    #[error(transparent)]
    Geodata(#[from] GeodataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Generator parameters. The defaults are the desk-scale benchmark used by
/// the experiment suite: 6 classes, 20 scenes each, 8 frames of 64x64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub scenes_per_class: usize,
    /// Frames per sequence (m).
    pub frames_per_scene: usize,
    pub chip_size: usize,
    /// Per-frame GSD draw range in meters per pixel.
    pub gsd_range: (f64, f64),
    pub sun_elevation_range: (f64, f64),
    pub off_nadir_range: (f64, f64),
    /// Brightness law: pixel scale = floor + gain * sin(sun elevation).
    pub brightness_floor: f64,
    pub brightness_gain: f64,
    pub hue_drift_amplitude: f64,
    /// Registration jitter bound J: offsets are uniform over [-J, J]^2.
    pub jitter_px: i32,
    pub cloud_probability: f64,
    pub cloud_radius_m: (f64, f64),
    /// Fraction of scenes per class held out as the validation split.
    pub val_fraction: f64,
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            class_count: 6,
            scenes_per_class: 20,
            frames_per_scene: 8,
            chip_size: 64,
            gsd_range: (0.4, 1.2),
            sun_elevation_range: (60.0, 88.0),
            off_nadir_range: (0.0, 25.0),
            brightness_floor: 0.7,
            brightness_gain: 0.3,
            hue_drift_amplitude: 0.08,
            jitter_px: 2,
            cloud_probability: 0.04,
            cloud_radius_m: (2.0, 5.0),
            val_fraction: 0.2,
            master_seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.class_count == 0 || self.scenes_per_class == 0 || self.frames_per_scene == 0 {
            return Err(SynthError::Config("counts must be positive".into()));
        }
        if !(self.gsd_range.0 > 0.0 && self.gsd_range.1 >= self.gsd_range.0) {
            return Err(SynthError::Config(format!(
                "gsd range must satisfy 0 < min <= max, got {:?}",
                self.gsd_range
            )));
        }
        if self.jitter_px < 0 {
            return Err(SynthError::Config("jitter_px must be non-negative".into()));
        }
        if self.chip_size < 8 {
            return Err(SynthError::Config("chip_size must be at least 8".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(SynthError::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) {
            return Err(SynthError::Config("cloud_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

// ── World-anchored hash noise ────────────────────────────────────────

fn hash_cell(seed: u64, x: i64, y: i64) -> u64 {
    seeds::derive(seed, &[x as u64, y as u64])
}

/// Uniform value in [0, 1) from a lattice cell.
fn cell_unit(seed: u64, x: i64, y: i64) -> f64 {
    (hash_cell(seed, x, y) >> 11) as f64 / (1u64 << 53) as f64
}

// ── Scene textures ──────────────────────────────────────────────────

/// Per-scene texture parameters, drawn once from the scene RNG.
struct SceneStyle {
    family: usize,
    angle: f64,
    period_m: f64,
    palette: [[f64; 3]; 4],
    noise_seed: u64,
    gradient_scale_m: f64,
}

fn perturb(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    [
        (base[0] + rng.gen_range(-amount..amount)).clamp(0.02, 0.98),
        (base[1] + rng.gen_range(-amount..amount)).clamp(0.02, 0.98),
        (base[2] + rng.gen_range(-amount..amount)).clamp(0.02, 0.98),
    ]
}

fn scene_style(class: usize, rng: &mut ChaCha8Rng) -> SceneStyle {
    let family = class % 6;
    let base: [[f64; 3]; 4] = match family {
        // Striped vegetation rows.
        0 => [
            [0.20, 0.45, 0.15],
            [0.48, 0.62, 0.28],
            [0.30, 0.50, 0.20],
            [0.40, 0.55, 0.25],
        ],
        // Street grid.
        1 => [
            [0.58, 0.57, 0.55],
            [0.22, 0.22, 0.26],
            [0.48, 0.46, 0.44],
            [0.30, 0.30, 0.33],
        ],
        // Bright installations on dark ground.
        2 => [
            [0.10, 0.12, 0.10],
            [0.88, 0.84, 0.70],
            [0.14, 0.16, 0.13],
            [0.80, 0.78, 0.62],
        ],
        // Smooth large-scale gradient.
        3 => [
            [0.24, 0.34, 0.56],
            [0.58, 0.48, 0.28],
            [0.30, 0.38, 0.50],
            [0.52, 0.44, 0.32],
        ],
        // Concentric rings.
        4 => [
            [0.56, 0.34, 0.30],
            [0.29, 0.17, 0.15],
            [0.50, 0.30, 0.26],
            [0.35, 0.21, 0.18],
        ],
        // Coarse patchwork cells, warm tones only.
        _ => [
            [0.66, 0.58, 0.30],
            [0.78, 0.68, 0.40],
            [0.58, 0.50, 0.26],
            [0.72, 0.62, 0.34],
        ],
    };
    SceneStyle {
        family,
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        period_m: rng.gen_range(5.0..9.0),
        palette: [
            perturb(rng, base[0], 0.05),
            perturb(rng, base[1], 0.05),
            perturb(rng, base[2], 0.05),
            perturb(rng, base[3], 0.05),
        ],
        noise_seed: rng.gen(),
        gradient_scale_m: rng.gen_range(16.0..28.0),
    }
}

/// Base texture color at a world point, before per-frame nuisances.
fn texture(style: &SceneStyle, u: f64, v: f64) -> [f64; 3] {
    let p = &style.palette;
    let along = u * style.angle.cos() + v * style.angle.sin();
    let across = -u * style.angle.sin() + v * style.angle.cos();
    let mut color = match style.family {
        0 => {
            // Stripes with a slow cross-fade between two row palettes.
            let s = (2.0 * std::f64::consts::PI * along / style.period_m).sin();
            if s > 0.0 {
                p[0]
            } else {
                p[1]
            }
        }
        1 => {
            let line_w = 0.18;
            let fa = (along / style.period_m).rem_euclid(1.0);
            let fb = (across / style.period_m).rem_euclid(1.0);
            if fa < line_w || fb < line_w {
                p[1]
            } else {
                p[0]
            }
        }
        2 => {
            let cell_m = 1.9 * style.period_m;
            let (cx, cy) = ((u / cell_m).floor(), (v / cell_m).floor());
            let present = cell_unit(style.noise_seed ^ 0x51, cx as i64, cy as i64) < 0.7;
            if present {
                let ox = cell_unit(style.noise_seed ^ 0x52, cx as i64, cy as i64) - 0.5;
                let oy = cell_unit(style.noise_seed ^ 0x53, cx as i64, cy as i64) - 0.5;
                let center_u = (cx + 0.5 + 0.5 * ox) * cell_m;
                let center_v = (cy + 0.5 + 0.5 * oy) * cell_m;
                let r = 0.22 * cell_m
                    + 0.10 * cell_m * cell_unit(style.noise_seed ^ 0x54, cx as i64, cy as i64);
                let d2 = (u - center_u).powi(2) + (v - center_v).powi(2);
                if d2 < r * r {
                    p[1]
                } else {
                    p[0]
                }
            } else {
                p[0]
            }
        }
        3 => {
            let t = 1.0 / (1.0 + (-along / style.gradient_scale_m).exp());
            [
                p[0][0] + (p[1][0] - p[0][0]) * t,
                p[0][1] + (p[1][1] - p[0][1]) * t,
                p[0][2] + (p[1][2] - p[0][2]) * t,
            ]
        }
        4 => {
            let r = (u * u + v * v).sqrt();
            let s = (2.0 * std::f64::consts::PI * r / style.period_m).sin();
            if s > 0.0 {
                p[0]
            } else {
                p[1]
            }
        }
        _ => {
            let cell_m = 1.4 * style.period_m;
            let (cx, cy) = ((u / cell_m).floor() as i64, (v / cell_m).floor() as i64);
            let pick = (hash_cell(style.noise_seed ^ 0x61, cx, cy) % 4) as usize;
            p[pick]
        }
    };
    // Fine world-anchored speckle so frames are not piecewise constant.
    let n = cell_unit(style.noise_seed ^ 0x71, u.floor() as i64, v.floor() as i64) - 0.5;
    for ch in color.iter_mut() {
        *ch += 0.06 * n;
    }
    color
}

// ── Frame rendering ─────────────────────────────────────────────────

struct FrameNuisance {
    gsd: f64,
    sun_elevation_deg: f64,
    jitter: (i32, i32),
    season_phase: f64,
    hue_amplitude: f64,
    brightness: (f64, f64), // (floor, gain)
    clouds: Vec<(f64, f64, f64)>, // center row, center col (px), radius (px)
}

fn render_frame(
    style: &SceneStyle,
    nuisance: &FrameNuisance,
    size: usize,
) -> (Tensor<f32>, f64) {
    let half = size as f64 / 2.0;
    let mut data = vec![0.0f32; size * size * 3];
    let brightness = nuisance.brightness.0
        + nuisance.brightness.1 * nuisance.sun_elevation_deg.to_radians().sin();
    // Seasonal drift rotates channel weights around the year.
    let hue_gain: [f64; 3] = std::array::from_fn(|k| {
        let phase = nuisance.season_phase + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
        1.0 + nuisance.hue_amplitude * phase.sin()
    });
    let mut cloud_pixels = 0usize;
    for i in 0..size {
        for j in 0..size {
            let u = (i as f64 - half + nuisance.jitter.0 as f64) * nuisance.gsd;
            let v = (j as f64 - half + nuisance.jitter.1 as f64) * nuisance.gsd;
            let mut color = texture(style, u, v);
            for (ch, gain) in color.iter_mut().zip(hue_gain) {
                *ch *= gain * brightness;
            }
            let covered = nuisance
                .clouds
                .iter()
                .any(|&(cy, cx, r)| {
                    let dy = i as f64 - cy;
                    let dx = j as f64 - cx;
                    dy * dy + dx * dx < r * r
                });
            if covered {
                cloud_pixels += 1;
                const CLOUD: [f64; 3] = [0.92, 0.93, 0.95];
                const ALPHA: f64 = 0.85;
                for (ch, base) in color.iter_mut().zip(CLOUD) {
                    *ch = *ch * (1.0 - ALPHA) + base * ALPHA;
                }
            }
            let idx = (i * size + j) * 3;
            for k in 0..3 {
                data[idx + k] = (color[k].clamp(0.0, 1.0)) as f32;
            }
        }
    }
    let frac = cloud_pixels as f64 / (size * size) as f64;
    (Tensor::new(vec![size, size, 3], data).unwrap(), frac)
}

/// Generates one scene deterministically from `(class, scene_seed, config)`.
pub fn generate_scene(
    class: usize,
    scene_seed: u64,
    config: &SynthConfig,
) -> Result<SceneSequence, SynthError> {
    config.validate()?;
    if class >= config.class_count {
        return Err(SynthError::Config(format!(
            "class {} out of range for {} classes",
            class, config.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let style = scene_style(class, &mut rng);

    // Revisit cadence: a few days apart, starting at a scene-specific date.
    let base_ts = Utc
        .with_ymd_and_hms(2020, 1, 1, 10, 0, 0)
        .unwrap()
        .timestamp()
        + rng.gen_range(0..365) * 86_400;
    let mut frames = Vec::with_capacity(config.frames_per_scene);
    let mut ts = base_ts;
    for _ in 0..config.frames_per_scene {
        ts += rng.gen_range(3..9) * 86_400 + rng.gen_range(0..3600);
        let gsd = rng.gen_range(config.gsd_range.0..=config.gsd_range.1);
        let sun = rng.gen_range(config.sun_elevation_range.0..=config.sun_elevation_range.1);
        let nadir = rng.gen_range(config.off_nadir_range.0..=config.off_nadir_range.1);
        let jitter = if config.jitter_px == 0 {
            (0, 0)
        } else {
            (
                rng.gen_range(-config.jitter_px..=config.jitter_px),
                rng.gen_range(-config.jitter_px..=config.jitter_px),
            )
        };
        let timestamp = Utc.timestamp_opt(ts, 0).unwrap();
        let season_phase =
            2.0 * std::f64::consts::PI * timestamp.ordinal0() as f64 / 365.0;
        let mut clouds = Vec::new();
        if rng.gen_bool(config.cloud_probability) {
            let count = rng.gen_range(1..=2);
            for _ in 0..count {
                let cy = rng.gen_range(0.0..config.chip_size as f64);
                let cx = rng.gen_range(0.0..config.chip_size as f64);
                let radius_m = rng.gen_range(config.cloud_radius_m.0..=config.cloud_radius_m.1);
                clouds.push((cy, cx, radius_m / gsd));
            }
        }
        let nuisance = FrameNuisance {
            gsd,
            sun_elevation_deg: sun,
            jitter,
            season_phase,
            hue_amplitude: config.hue_drift_amplitude,
            brightness: (config.brightness_floor, config.brightness_gain),
            clouds,
        };
        let (pixels, cloud_frac) = render_frame(&style, &nuisance, config.chip_size);
        let metadata = FrameMetadata {
            gsd_m_per_px: gsd,
            off_nadir_deg: nadir,
            cloud_cover_frac: cloud_frac,
            sun_elevation_deg: sun,
            timestamp,
            bbox: PixelBox {
                x: 0,
                y: 0,
                width: config.chip_size as u32,
                height: config.chip_size as u32,
            },
            registration_offset_px: Some([jitter.0, jitter.1]),
        };
        frames.push(ImageChip { pixels, metadata });
    }
    Ok(SceneSequence {
        scene_id: format!("c{class}"),
        true_label: class,
        frames,
    })
}

// ── Dataset generation ──────────────────────────────────────────────

/// Root manifest written next to the `train/` and `val/` scene directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub config: SynthConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Which half of the scene split to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Writes a full dataset: scenes split by scene id (never by frame), plus a
/// manifest carrying the seeds needed to regenerate everything.
pub fn generate_dataset(
    config: &SynthConfig,
    out_dir: &Path,
    force: bool,
) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir)
            .map_err(|source| SynthError::Io {
                path: out_dir.to_path_buf(),
                source,
            })?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(SynthError::OutputNotEmpty {
                path: out_dir.to_path_buf(),
            });
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let val_per_class =
        ((config.scenes_per_class as f64) * config.val_fraction).round() as usize;
    let mut manifest = DatasetManifest {
        master_seed: config.master_seed,
        config: config.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for class in 0..config.class_count {
        for idx in 0..config.scenes_per_class {
            let scene_seed = seeds::derive(config.master_seed, &[class as u64, idx as u64]);
            let mut seq = generate_scene(class, scene_seed, config)?;
            seq.scene_id = format!("c{class}_s{idx:03}");
            let is_val = idx >= config.scenes_per_class - val_per_class;
            let split = if is_val { Split::Val } else { Split::Train };
            let dir = out_dir.join(split.dir_name()).join(&seq.scene_id);
            save_sequence(&dir, &seq)?;
            match split {
                Split::Train => manifest.train.push(seq.scene_id),
                Split::Val => manifest.val.push(seq.scene_id),
            }
        }
    }
    let manifest_path = out_dir.join("dataset.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, &json).map_err(|source| SynthError::Io {
        path: manifest_path,
        source,
    })?;
    Ok(manifest)
}

/// Reads the dataset manifest written by [`generate_dataset`].
pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest, SynthError> {
    let path = dir.join("dataset.json");
    let bytes = std::fs::read(&path).map_err(|source| SynthError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| {
        SynthError::Geodata(GeodataError::Json { path, source })
    })
}

/// Loads every sequence of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SceneSequence>, SynthError> {
    let manifest = load_dataset_manifest(dir)?;
    let ids = match split {
        Split::Train => &manifest.train,
        Split::Val => &manifest.val,
    };
    let mut sequences = Vec::with_capacity(ids.len());
    for id in ids {
        let scene_dir = dir.join(split.dir_name()).join(id);
        sequences.push(crate::geodata::load_sequence(&scene_dir)?);
    }
    Ok(sequences)
}

/// Flattens sequences into labeled chips for the trainer.
pub fn labeled_chips(sequences: &[SceneSequence]) -> Vec<(Tensor<f32>, usize)> {
    sequences
        .iter()
        .flat_map(|seq| {
            seq.frames
                .iter()
                .map(move |f| (f.pixels.clone(), seq.true_label))
        })
        .collect()
}
