//! Binary PPM (P6, 8-bit) and PBM (P4) encoding and decoding.
//!
//! These are the only raster formats the crate reads or writes: frames are
//! stored as P6 with one byte per channel, edge masks dump as P4.

/// Parsed P6 image: spatial extents plus interleaved RGB bytes.
pub struct Ppm {
    pub rows: usize,
    pub cols: usize,
    pub rgb: Vec<u8>,
}

/// Decodes a binary P6 buffer. Comments (`#` to end of line) are accepted
/// in the header; the maxval must be 255.
pub fn decode_p6(bytes: &[u8]) -> Result<Ppm, String> {
    let mut pos = 0usize;

    fn skip_ws(bytes: &[u8], mut pos: usize) -> usize {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                return pos;
            }
        }
    }

    fn token(bytes: &[u8], pos: usize) -> Result<(usize, usize), String> {
        let start = skip_ws(bytes, pos);
        let mut end = start;
        while end < bytes.len() && !bytes[end].is_ascii_whitespace() {
            end += 1;
        }
        if start == end {
            return Err("unexpected end of header".into());
        }
        Ok((start, end))
    }

    let (s, e) = token(bytes, pos)?;
    if &bytes[s..e] != b"P6" {
        return Err(format!(
            "not a binary PPM: magic {:?}",
            String::from_utf8_lossy(&bytes[s..e])
        ));
    }
    pos = e;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let (s, e) = token(bytes, pos)?;
        *d = std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| "malformed header field".to_string())?;
        pos = e;
    }
    let (cols, rows, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let expected = rows * cols * 3;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(format!(
            "truncated raster: expected {expected} bytes, found {}",
            raster.len()
        ));
    }
    Ok(Ppm {
        rows,
        cols,
        rgb: raster[..expected].to_vec(),
    })
}

/// Encodes interleaved RGB bytes as a canonical P6 buffer.
pub fn encode_p6(rows: usize, cols: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), rows * cols * 3, "raster length mismatch");
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Encodes a boolean mask as a P4 bitmap, `true` rendered as black.
pub fn encode_p4(rows: usize, cols: usize, mask: &[bool]) -> Vec<u8> {
    assert_eq!(mask.len(), rows * cols, "mask length mismatch");
    let mut out = format!("P4\n{cols} {rows}\n").into_bytes();
    for row in mask.chunks(cols) {
        let mut byte = 0u8;
        let mut nbits = 0;
        for &bit in row {
            byte = (byte << 1) | u8::from(bit);
            nbits += 1;
            if nbits == 8 {
                out.push(byte);
                byte = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            out.push(byte << (8 - nbits));
        }
    }
    out
}

/// Maps an 8-bit channel value to the unit interval.
pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Rounds a unit-interval value to 8 bits, clamping first.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
