//! Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

use std::path::Path;

use comer_core::{Error, Result, Tensor};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(msg: &str) -> Error {
    Error::Config(format!("image: {msg}"))
}

/// Min-max normalizes a map to 0..=255; a map with zero range becomes 128.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, pixels)).map_err(io(path))
}

/// Header fields and the offset of the pixel data.
fn header(bytes: &[u8]) -> Result<(&[u8], [usize; 3], usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(&bytes[start..i]);
    }
    // exactly one whitespace byte separates the header from the pixels
    if i >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    let mut nums = [0usize; 3];
    for (n, f) in nums.iter_mut().zip(&fields[1..]) {
        *n = std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("non-numeric header field"))?;
    }
    Ok((fields[0], nums, i + 1))
}

/// Reads a P5 or P6 file as a `[3 × H × W]` image with values in
/// `[-0.5, 0.5]`; grayscale is replicated across channels.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f64>> {
    let (magic, [w, h, max], start) = header(bytes)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("expected a binary PGM (P5) or PPM (P6) file")),
    };
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let n = w * h * channels;
    let data = bytes
        .get(start..start + n)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let mut out = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            let v = data[p * channels + c.min(channels - 1)];
            out[c * h * w + p] = v as f64 / max as f64 - 0.5;
        }
    }
    Tensor::new(&[3, h, w], out)
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    decode_image(&std::fs::read(path).map_err(io(path))?)
}
