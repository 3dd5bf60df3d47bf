//! Data model and on-disk format for temporal sequences of geolocated image
//! chips, plus the admissibility filter and bounding-box preprocessing.
//!
//! A scene lives in one directory: a `scene.json` manifest naming the label
//! and the frame stems, and per frame a binary PPM (`<stem>.ppm`) plus a
//! JSON metadata sidecar (`<stem>.json`). See `schemas/` for the JSON field
//! contracts.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::io_util::write_atomic;
use crate::ppm;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GeodataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Ppm { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Metadata { path: PathBuf, message: String },
    #[error("missing sidecar {path}")]
    MissingSidecar { path: PathBuf },
    #[error("{0}")]
    Validation(String),
    #[error("scene {scene}: frame timestamps are not strictly increasing")]
    TimestampOrder { scene: String },
    #[error("classifier failed during filtering: {0}")]
    Classifier(String),
}

/// Pixel-space rectangle in a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Per-frame acquisition metadata. Field names are the sidecar schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub gsd_m_per_px: f64,
    pub off_nadir_deg: f64,
    pub cloud_cover_frac: f64,
    pub sun_elevation_deg: f64,
    pub timestamp: DateTime<Utc>,
    pub bbox: PixelBox,
    /// Content shift ground truth, available for synthetic data only. The
    /// loader never corrects for it; frames stay unregistered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration_offset_px: Option<[i32; 2]>,
}

impl FrameMetadata {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gsd_m_per_px > 0.0) {
            return Err(format!("gsd_m_per_px must be > 0, got {}", self.gsd_m_per_px));
        }
        if !(0.0..90.0).contains(&self.off_nadir_deg) {
            return Err(format!(
                "off_nadir_deg must lie in [0, 90), got {}",
                self.off_nadir_deg
            ));
        }
        if !(0.0..=1.0).contains(&self.cloud_cover_frac) {
            return Err(format!(
                "cloud_cover_frac must lie in [0, 1], got {}",
                self.cloud_cover_frac
            ));
        }
        if !(self.sun_elevation_deg > 0.0 && self.sun_elevation_deg <= 90.0) {
            return Err(format!(
                "sun_elevation_deg must lie in (0, 90], got {}",
                self.sun_elevation_deg
            ));
        }
        Ok(())
    }
}

/// One preprocessed observation: square unit-interval RGB pixels plus
/// acquisition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageChip {
    pub pixels: Tensor<f32>,
    pub metadata: FrameMetadata,
}

impl ImageChip {
    /// Spatial side length in pixels.
    pub fn size(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn validate(&self) -> Result<(), String> {
        let shape = self.pixels.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(format!("chip must be [S,S,3], got {:?}", shape));
        }
        if shape[0] != shape[1] {
            return Err(format!("chip must be square, got {:?}", shape));
        }
        if !self
            .pixels
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v))
        {
            return Err("chip pixels must lie in [0, 1]".into());
        }
        self.metadata.validate()
    }

    /// Channel-mean grayscale in verification precision, as used by the
    /// edge detector.
    pub fn grayscale(&self) -> Tensor<f64> {
        let s = self.size();
        let px = self.pixels.data();
        let data: Vec<f64> = (0..s * s)
            .map(|i| {
                (px[3 * i] as f64 + px[3 * i + 1] as f64 + px[3 * i + 2] as f64) / 3.0
            })
            .collect();
        Tensor::new(vec![s, s], data).unwrap()
    }
}

/// Time-ordered frames of one geolocated scene sharing a true label.
#[derive(Debug, Clone)]
pub struct SceneSequence {
    pub scene_id: String,
    pub true_label: usize,
    pub frames: Vec<ImageChip>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    scene_id: String,
    true_label: usize,
    frames: Vec<String>,
}

/// Loads, validates and time-sorts one scene directory.
pub fn load_sequence(dir: &Path) -> Result<SceneSequence, GeodataError> {
    let manifest_path = dir.join("scene.json");
    let manifest_bytes = std::fs::read(&manifest_path).map_err(|source| GeodataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: SceneManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|source| GeodataError::Json {
            path: manifest_path,
            source,
        })?;

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for stem in &manifest.frames {
        let image_path = dir.join(format!("{stem}.ppm"));
        let sidecar_path = dir.join(format!("{stem}.json"));
        if !sidecar_path.exists() {
            return Err(GeodataError::MissingSidecar { path: sidecar_path });
        }
        let sidecar_bytes =
            std::fs::read(&sidecar_path).map_err(|source| GeodataError::Io {
                path: sidecar_path.clone(),
                source,
            })?;
        let metadata: FrameMetadata =
            serde_json::from_slice(&sidecar_bytes).map_err(|source| GeodataError::Json {
                path: sidecar_path.clone(),
                source,
            })?;
        metadata.validate().map_err(|message| GeodataError::Metadata {
            path: sidecar_path.clone(),
            message,
        })?;

        let image_bytes = std::fs::read(&image_path).map_err(|source| GeodataError::Io {
            path: image_path.clone(),
            source,
        })?;
        let image = ppm::decode_p6(&image_bytes).map_err(|message| GeodataError::Ppm {
            path: image_path.clone(),
            message,
        })?;
        if image.rows != image.cols {
            return Err(GeodataError::Ppm {
                path: image_path,
                message: format!("chip must be square, got {}x{}", image.rows, image.cols),
            });
        }
        let data: Vec<f32> = image.rgb.iter().map(|&b| ppm::dequantize(b)).collect();
        let pixels = Tensor::new(vec![image.rows, image.cols, 3], data).unwrap();
        frames.push(ImageChip { pixels, metadata });
    }
    if frames.is_empty() {
        return Err(GeodataError::Validation(format!(
            "scene {} has no frames",
            manifest.scene_id
        )));
    }
    let size = frames[0].size();
    if frames.iter().any(|f| f.size() != size) {
        return Err(GeodataError::Validation(format!(
            "scene {}: frames differ in size",
            manifest.scene_id
        )));
    }

    frames.sort_by_key(|f| f.metadata.timestamp);
    if frames
        .windows(2)
        .any(|w| w[0].metadata.timestamp >= w[1].metadata.timestamp)
    {
        return Err(GeodataError::TimestampOrder {
            scene: manifest.scene_id,
        });
    }
    Ok(SceneSequence {
        scene_id: manifest.scene_id,
        true_label: manifest.true_label,
        frames,
    })
}

/// Writes a scene directory in the on-disk format, 8-bit quantized.
pub fn save_sequence(dir: &Path, seq: &SceneSequence) -> Result<(), GeodataError> {
    std::fs::create_dir_all(dir).map_err(|source| GeodataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut stems = Vec::with_capacity(seq.frames.len());
    for (i, frame) in seq.frames.iter().enumerate() {
        let stem = format!("frame_{i:03}");
        let rgb: Vec<u8> = frame.pixels.data().iter().map(|&v| ppm::quantize(v)).collect();
        let image_path = dir.join(format!("{stem}.ppm"));
        write_atomic(&image_path, &ppm::encode_p6(frame.size(), frame.size(), &rgb)).map_err(
            |source| GeodataError::Io {
                path: image_path,
                source,
            },
        )?;
        let sidecar_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_vec_pretty(&frame.metadata).expect("metadata serializes");
        write_atomic(&sidecar_path, &json).map_err(|source| GeodataError::Io {
            path: sidecar_path,
            source,
        })?;
        stems.push(stem);
    }
    let manifest = SceneManifest {
        scene_id: seq.scene_id.clone(),
        true_label: seq.true_label,
        frames: stems,
    };
    let manifest_path = dir.join("scene.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, &json).map_err(|source| GeodataError::Io {
        path: manifest_path,
        source,
    })
}

/// Anything that can assign a class index to a chip. Implemented by the CNN
/// model; test suites substitute stubs.
pub trait Classifier {
    fn classify(&self, chip: &ImageChip) -> Result<usize, String>;
}

/// Admissibility thresholds. Defaults follow the sequence-selection rules:
/// off-nadir strictly below 30 degrees, cloud cover strictly below 20
/// percent, sun elevation at least 60 degrees (inclusive), and at least 8
/// surviving frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub max_off_nadir_deg: f64,
    pub max_cloud_cover_frac: f64,
    pub min_sun_elevation_deg: f64,
    pub min_frames: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            max_off_nadir_deg: 30.0,
            max_cloud_cover_frac: 0.20,
            min_sun_elevation_deg: 60.0,
            min_frames: 8,
        }
    }
}

/// Result of [`filter_admissible`]; rejection is a value, not an error.
#[derive(Debug)]
pub enum FilterOutcome {
    Admissible(SceneSequence),
    Rejected { kept: usize, required: usize },
}

impl FilterOutcome {
    pub fn admissible(self) -> Option<SceneSequence> {
        match self {
            FilterOutcome::Admissible(seq) => Some(seq),
            FilterOutcome::Rejected { .. } => None,
        }
    }
}

/// Keeps frames with benign sensing conditions that the classifier already
/// gets right, and rejects the sequence when too few survive.
pub fn filter_admissible(
    seq: &SceneSequence,
    model: &dyn Classifier,
    rules: &FilterRules,
) -> Result<FilterOutcome, GeodataError> {
    let mut kept = Vec::new();
    for frame in &seq.frames {
        let m = &frame.metadata;
        if m.off_nadir_deg >= rules.max_off_nadir_deg {
            continue;
        }
        if m.cloud_cover_frac >= rules.max_cloud_cover_frac {
            continue;
        }
        if m.sun_elevation_deg < rules.min_sun_elevation_deg {
            continue;
        }
        let predicted = model.classify(frame).map_err(GeodataError::Classifier)?;
        if predicted != seq.true_label {
            continue;
        }
        kept.push(frame.clone());
    }
    if kept.len() < rules.min_frames {
        return Ok(FilterOutcome::Rejected {
            kept: kept.len(),
            required: rules.min_frames,
        });
    }
    Ok(FilterOutcome::Admissible(SceneSequence {
        scene_id: seq.scene_id.clone(),
        true_label: seq.true_label,
        frames: kept,
    }))
}

/// Crops a bounding box out of a raw image, center-pads it to a square
/// (zero fill), bilinearly resizes to `target_size`, and rewrites the GSD
/// so physical scale stays representative: `gsd' = gsd * side / target`.
pub fn preprocess_chip(
    raw: &Tensor<f32>,
    bbox: PixelBox,
    target_size: usize,
    metadata: &FrameMetadata,
) -> Result<ImageChip, GeodataError> {
    let shape = raw.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(GeodataError::Validation(format!(
            "raw image must be [H,W,3], got {:?}",
            shape
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    if bbox.width == 0 || bbox.height == 0 {
        return Err(GeodataError::Validation("degenerate bbox".into()));
    }
    if (bbox.x + bbox.width) as usize > cols || (bbox.y + bbox.height) as usize > rows {
        return Err(GeodataError::Validation(format!(
            "bbox {:?} exceeds image {}x{}",
            bbox, rows, cols
        )));
    }
    if target_size == 0 {
        return Err(GeodataError::Validation("target size must be positive".into()));
    }

    let (bh, bw) = (bbox.height as usize, bbox.width as usize);
    let side = bh.max(bw);
    let (off_y, off_x) = ((side - bh) / 2, (side - bw) / 2);
    let mut square = vec![0.0f32; side * side * 3];
    let raw_data = raw.data();
    for r in 0..bh {
        for c in 0..bw {
            let src = ((bbox.y as usize + r) * cols + bbox.x as usize + c) * 3;
            let dst = ((off_y + r) * side + off_x + c) * 3;
            square[dst..dst + 3].copy_from_slice(&raw_data[src..src + 3]);
        }
    }

    let s = target_size;
    let mut out = vec![0.0f32; s * s * 3];
    let scale = side as f32 / s as f32;
    for i in 0..s {
        let sy = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let fy = sy - y0 as f32;
        for j in 0..s {
            let sx = ((j as f32 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let fx = sx - x0 as f32;
            for ch in 0..3 {
                let v00 = square[(y0 * side + x0) * 3 + ch];
                let v01 = square[(y0 * side + x1) * 3 + ch];
                let v10 = square[(y1 * side + x0) * 3 + ch];
                let v11 = square[(y1 * side + x1) * 3 + ch];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bottom = v10 * (1.0 - fx) + v11 * fx;
                out[(i * s + j) * 3 + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }

    let mut meta = metadata.clone();
    meta.gsd_m_per_px = metadata.gsd_m_per_px * side as f64 / s as f64;
    meta.bbox = bbox;
    Ok(ImageChip {
        pixels: Tensor::new(vec![s, s, 3], out).unwrap(),
        metadata: meta,
    })
}
