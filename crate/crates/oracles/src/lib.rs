//! Reference implementations used as independent oracles by the test suites.
//!
//! Everything here is written directly from the mathematical definition,
//! favoring obviousness over speed, and shares no code with the crates under
//! test. Tensors are passed as flat row-major `f64` slices plus explicit
//! extents.

/// Direct-summation 2-D cross-correlation (valid padding, no stride support
/// beyond 1 on purpose; callers exercise the general case elsewhere).
///
/// `input` is `[h, w, cin]`, `kernel` is `[kh, kw, cin, cout]`; the result is
/// `[h-kh+1, w-kw+1, cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_valid(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
) -> Vec<f64> {
    assert_eq!(input.len(), h * w * cin);
    assert_eq!(kernel.len(), kh * kw * cin * cout);
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cin {
                            let iv = input[((oy + ky) * w + (ox + kx)) * cin + ci];
                            let kv = kernel[((ky * kw + kx) * cin + ci) * cout + co];
                            acc += iv * kv;
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    out
}

/// Windowed max over non-overlapping 2x2 blocks of `[h, w, c]`.
pub fn maxpool2(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    assert!(h % 2 == 0 && w % 2 == 0);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = input[((2 * oy + dy) * w + (2 * ox + dx)) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(oy * wo + ox) * c + ch] = best;
            }
        }
    }
    out
}

/// Scalar-loop affine map: `input [n] x weights [n,m] + bias [m]`.
pub fn dense(input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = input.len();
    let m = bias.len();
    assert_eq!(weights.len(), n * m);
    let mut out = vec![0.0; m];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = bias[j];
        for i in 0..n {
            acc += input[i] * weights[i * m + j];
        }
        *o = acc;
    }
    out
}

/// `-log softmax(logits)[label]` evaluated directly with max subtraction.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    denom.ln() - (logits[label] - max)
}

pub mod canny;
