//! The physical attack surface: an n x n grid of piecewise-constant RGB
//! elements with a fixed physical side length, rendered into chip pixels via
//! the frame's ground sample distance and composited opaquely.
//!
//! Rendering is a pure re-indexing (each raster pixel takes the element
//! covering its center), so its gradient is exact: an element's gradient is
//! the sum over the raster pixels it covers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::io_util::write_atomic;
use crate::scalar::Scalar;
use crate::tape::{OverlayRect, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const PATCH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("patch below sensor resolution: {n} elements of {element_size_m} m render to 0 pixels at {gsd} m/px")]
    BelowResolution {
        n: usize,
        element_size_m: f64,
        gsd: f64,
    },
    #[error("patch footprint lies fully outside the chip")]
    FootprintOutsideChip,
    #[error("invalid patch: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// The optimization variable r: element colors live in `[0, 1]`, maintained
/// by the optimizer's projection step.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalPatch {
    n: usize,
    element_size_m: f64,
    elements: Tensor<f32>,
}

impl PhysicalPatch {
    pub fn new(n: usize, element_size_m: f64, elements: Tensor<f32>) -> Result<Self, PatchError> {
        if n == 0 {
            return Err(PatchError::Invalid("need at least one element per side".into()));
        }
        if !(element_size_m > 0.0) {
            return Err(PatchError::Invalid(format!(
                "element size must be positive, got {element_size_m}"
            )));
        }
        if elements.shape() != [n, n, 3] {
            return Err(PatchError::Invalid(format!(
                "elements must be [{n}, {n}, 3], got {:?}",
                elements.shape()
            )));
        }
        if !elements.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(PatchError::Invalid("element values must lie in [0, 1]".into()));
        }
        Ok(Self {
            n,
            element_size_m,
            elements,
        })
    }

    /// Mid-gray patch, the fallback initializer.
    pub fn uniform(n: usize, element_size_m: f64) -> Result<Self, PatchError> {
        Self::new(n, element_size_m, Tensor::filled(vec![n, n, 3], 0.5))
    }

    pub fn elements_per_side(&self) -> usize {
        self.n
    }

    pub fn element_size_m(&self) -> f64 {
        self.element_size_m
    }

    /// Physical side length in meters: `n * element_size_m`.
    pub fn side_length_m(&self) -> f64 {
        self.n as f64 * self.element_size_m
    }

    pub fn elements(&self) -> &Tensor<f32> {
        &self.elements
    }

    // ── File format: JSON header, blank line, f32 LE element blob ──

    pub fn save(&self, path: &Path) -> Result<(), PatchError> {
        let header = PatchHeader {
            format_version: PATCH_FORMAT_VERSION,
            n: self.n,
            element_size_m: self.element_size_m,
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.extend_from_slice(b"\n\n");
        for &v in self.elements.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &bytes).map_err(|source| PatchError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PatchError> {
        let bytes = std::fs::read(path).map_err(|source| PatchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let fmt_err = |message: String| PatchError::Format {
            path: path.to_path_buf(),
            message,
        };
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| fmt_err("missing blank line after header".into()))?;
        let header: PatchHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| fmt_err(format!("malformed header: {e}")))?;
        if header.format_version != PATCH_FORMAT_VERSION {
            return Err(fmt_err(format!(
                "format version {} unsupported",
                header.format_version
            )));
        }
        let blob = &bytes[split + 2..];
        let expected = header.n * header.n * 3 * 4;
        if blob.len() != expected {
            return Err(fmt_err(format!(
                "element blob holds {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let elements = Tensor::new(vec![header.n, header.n, 3], data).unwrap();
        Self::new(header.n, header.element_size_m, elements)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchHeader {
    format_version: u32,
    n: usize,
    element_size_m: f64,
}

// ── Rendering transform t ───────────────────────────────────────────

/// Precomputed pixel-to-element index map for one (patch geometry, gsd)
/// pair; shareable across epochs and tapes.
#[derive(Debug, Clone)]
pub struct RenderMap {
    pub pixels_per_side: usize,
    map: Arc<Vec<usize>>,
}

impl RenderMap {
    pub fn indices(&self) -> &Arc<Vec<usize>> {
        &self.map
    }

    /// How many raster pixels take their value from the given element.
    pub fn covered_pixel_count(&self, element_row: usize, element_col: usize, n: usize) -> usize {
        let base = (element_row * n + element_col) * 3;
        self.map.iter().step_by(3).filter(|&&e| e == base).count()
    }
}

/// Raster side length in pixels: `round(n * element_size_m / gsd)`.
pub fn raster_side(n: usize, element_size_m: f64, gsd: f64) -> Result<usize, PatchError> {
    if !(gsd > 0.0) {
        return Err(PatchError::Invalid(format!("gsd must be positive, got {gsd}")));
    }
    let p = (n as f64 * element_size_m / gsd).round() as usize;
    if p < 1 {
        return Err(PatchError::BelowResolution {
            n,
            element_size_m,
            gsd,
        });
    }
    Ok(p)
}

/// Builds the nearest-element map: raster pixel (i, j) reads the element
/// whose physical extent covers the pixel's center.
pub fn render_map(n: usize, element_size_m: f64, gsd: f64) -> Result<RenderMap, PatchError> {
    let p = raster_side(n, element_size_m, gsd)?;
    let mut map = Vec::with_capacity(p * p * 3);
    for i in 0..p {
        let ei = (((i as f64 + 0.5) * n as f64 / p as f64) as usize).min(n - 1);
        for j in 0..p {
            let ej = (((j as f64 + 0.5) * n as f64 / p as f64) as usize).min(n - 1);
            let base = (ei * n + ej) * 3;
            map.extend_from_slice(&[base, base + 1, base + 2]);
        }
    }
    Ok(RenderMap {
        pixels_per_side: p,
        map: Arc::new(map),
    })
}

/// Differentiable render of patch elements already on a tape.
pub fn render_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    elements: Var,
    map: &RenderMap,
) -> Result<Var, TensorError> {
    let p = map.pixels_per_side;
    tape.gather(elements, Arc::clone(&map.map), vec![p, p, 3])
}

/// Plain-value render for evaluation paths that need no gradients.
pub fn render_tensor(patch: &PhysicalPatch, gsd: f64) -> Result<(Tensor<f32>, usize), PatchError> {
    let map = render_map(patch.n, patch.element_size_m, gsd)?;
    let src = patch.elements.data();
    let data: Vec<f32> = map.map.iter().map(|&i| src[i]).collect();
    let p = map.pixels_per_side;
    Ok((Tensor::new(vec![p, p, 3], data).unwrap(), p))
}

// ── Placement and overlay ───────────────────────────────────────────

/// Where the patch center lands in chip pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub center_px: (i32, i32),
}

impl Placement {
    /// Scene-center placement.
    pub fn centered(chip_size: usize) -> Self {
        let c = (chip_size / 2) as i32;
        Self { center_px: (c, c) }
    }

    /// Scene center displaced by a jitter offset.
    pub fn jittered(chip_size: usize, offset: (i32, i32)) -> Self {
        let c = (chip_size / 2) as i32;
        Self {
            center_px: (c + offset.0, c + offset.1),
        }
    }

    /// Footprint top-left for a raster of side `p`. For the centered case
    /// this is `floor((S - p) / 2)` in both axes; odd differences place the
    /// extra row/column at the bottom/right.
    pub fn top_left(&self, chip_size: usize, p: usize) -> (i32, i32) {
        let half = (chip_size / 2) as i32;
        let shift = ((chip_size as i32) - (p as i32)).div_euclid(2) - half;
        (self.center_px.0 + shift, self.center_px.1 + shift)
    }
}

/// The chip-pixel window a rendered patch actually occupies (after clipping
/// to the chip bounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub chip_size: usize,
    pub rect: OverlayRect,
    /// Raster pixels lost to clipping.
    pub clipped: usize,
}

impl Footprint {
    pub fn pixel_count(&self) -> usize {
        self.rect.rows * self.rect.cols
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.rect.base_row0
            && row < self.rect.base_row0 + self.rect.rows
            && col >= self.rect.base_col0
            && col < self.rect.base_col0 + self.rect.cols
    }

    /// Dense boolean mask over the chip.
    pub fn mask(&self) -> Vec<bool> {
        let s = self.chip_size;
        let mut mask = vec![false; s * s];
        for r in 0..self.rect.rows {
            let row = self.rect.base_row0 + r;
            let start = row * s + self.rect.base_col0;
            mask[start..start + self.rect.cols].fill(true);
        }
        mask
    }
}

/// Clips a `p`-pixel raster placed per `placement` against the chip.
pub fn clip_footprint(
    chip_size: usize,
    p: usize,
    placement: &Placement,
) -> Result<Footprint, PatchError> {
    let (tl_r, tl_c) = placement.top_left(chip_size, p);
    let s = chip_size as i32;
    let row0 = tl_r.max(0);
    let col0 = tl_c.max(0);
    let row1 = (tl_r + p as i32).min(s);
    let col1 = (tl_c + p as i32).min(s);
    if row1 <= row0 || col1 <= col0 {
        return Err(PatchError::FootprintOutsideChip);
    }
    let rect = OverlayRect {
        base_row0: row0 as usize,
        base_col0: col0 as usize,
        patch_row0: (row0 - tl_r) as usize,
        patch_col0: (col0 - tl_c) as usize,
        rows: (row1 - row0) as usize,
        cols: (col1 - col0) as usize,
    };
    Ok(Footprint {
        chip_size,
        rect,
        clipped: p * p - rect.rows * rect.cols,
    })
}

/// Opaque composite on a tape: inside the footprint every pixel comes from
/// the raster, outside it is bit-identical to the chip. Returns the
/// composite var and the footprint mask alongside.
pub fn overlay_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    chip: Var,
    raster: Var,
    placement: &Placement,
) -> Result<(Var, Footprint), PatchError> {
    let chip_size = tape.value(chip).shape()[0];
    let p = tape.value(raster).shape()[0];
    let footprint = clip_footprint(chip_size, p, placement)?;
    let composite = tape.overlay(chip, raster, footprint.rect)?;
    Ok((composite, footprint))
}

/// Manipulated-pixel count for a patch at a given sensing resolution: the
/// rendered `p x p` square minus anything clipped by the chip boundary,
/// under scene-center placement.
pub fn pixel_count(
    patch: &PhysicalPatch,
    gsd: f64,
    chip_size: usize,
) -> Result<usize, PatchError> {
    let p = raster_side(patch.n, patch.element_size_m, gsd)?;
    let footprint = clip_footprint(chip_size, p, &Placement::centered(chip_size))?;
    Ok(footprint.pixel_count())
}
