//! Direct translation of the Canny pipeline, one pass per stage:
//! Gaussian blur, central-difference gradients, magnitude normalization,
//! non-maximum suppression over four quantized orientations, and
//! double-threshold hysteresis with 8-connectivity (recursive flood fill).
//!
//! Stage definitions (kernel radius, border clamping, bin boundaries,
//! comparison directions) follow the shared pipeline contract so that a
//! correct implementation agrees mask-exactly.

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        weights.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

fn blur(image: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut horiz = vec![0.0; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let sx = clamp_idx(x as isize + t as isize - radius, cols);
                acc += w * image[y * cols + sx];
            }
            horiz[y * cols + x] = acc;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let sy = clamp_idx(y as isize + t as isize - radius, rows);
                acc += w * horiz[sy * cols + x];
            }
            out[y * cols + x] = acc;
        }
    }
    out
}

fn gradients(blurred: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; rows * cols];
    let mut gy = vec![0.0; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let xl = clamp_idx(x as isize - 1, cols);
            let xr = clamp_idx(x as isize + 1, cols);
            let yu = clamp_idx(y as isize - 1, rows);
            let yd = clamp_idx(y as isize + 1, rows);
            gx[y * cols + x] = (blurred[y * cols + xr] - blurred[y * cols + xl]) / 2.0;
            gy[y * cols + x] = (blurred[yd * cols + x] - blurred[yu * cols + x]) / 2.0;
        }
    }
    (gx, gy)
}

fn orientation_bin(gx: f64, gy: f64) -> u8 {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        0
    } else if angle < 67.5 {
        1
    } else if angle < 112.5 {
        2
    } else {
        3
    }
}

fn suppress(
    mag: &[f64],
    gx: &[f64],
    gy: &[f64],
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for y in 1..rows - 1 {
        for x in 1..cols - 1 {
            let i = y * cols + x;
            let (n1, n2) = match orientation_bin(gx[i], gy[i]) {
                0 => (mag[i - 1], mag[i + 1]),
                1 => (mag[i + cols + 1], mag[i - cols - 1]),
                2 => (mag[i - cols], mag[i + cols]),
                _ => (mag[i + cols - 1], mag[i - cols + 1]),
            };
            if mag[i] >= n1 && mag[i] >= n2 {
                out[i] = mag[i];
            }
        }
    }
    out
}

fn follow(
    thin: &[f64],
    mask: &mut [bool],
    rows: usize,
    cols: usize,
    y: usize,
    x: usize,
    low: f64,
) {
    mask[y * cols + x] = true;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dy == 0 && dx == 0 {
                continue;
            }
            let ny = y as isize + dy;
            let nx = x as isize + dx;
            if ny < 0 || nx < 0 || ny >= rows as isize || nx >= cols as isize {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !mask[ny * cols + nx] && thin[ny * cols + nx] >= low {
                follow(thin, mask, rows, cols, ny, nx, low);
            }
        }
    }
}

/// Full pipeline over a square grayscale image in row-major order.
/// Thresholds apply to gradient magnitude normalized to a maximum of 1.
pub fn canny(image: &[f64], rows: usize, cols: usize, sigma: f64, low: f64, high: f64) -> Vec<bool> {
    assert_eq!(image.len(), rows * cols);
    assert!(low < high, "low threshold must be below high");
    let blurred = blur(image, rows, cols, sigma);
    let (gx, gy) = gradients(&blurred, rows, cols);
    let mut mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![false; rows * cols];
    }
    for m in mag.iter_mut() {
        *m /= max;
    }
    let thin = suppress(&mag, &gx, &gy, rows, cols);
    let mut mask = vec![false; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            if thin[y * cols + x] >= high && !mask[y * cols + x] {
                follow(&thin, &mut mask, rows, cols, y, x, low);
            }
        }
    }
    mask
}
