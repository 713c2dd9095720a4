//! Binary netpbm output: P5 for one channel, P6 for three, depth 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64, index: usize) -> Result<u8> {
    if !v.is_finite() {
        return Err(Error::NonFinite(index));
    }
    Ok((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Encodes a `[C, H, W]` or `[H, W]` image with values in `[0, 1]`.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::config(format!("image export needs [C, H, W], got {s:?}"))),
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::config(format!("image export supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let plane = h * w;
    // Planar storage becomes interleaved pixels.
    for p in 0..plane {
        for ch in 0..c {
            out.push(to_byte(data[ch * plane + p], ch * plane + p)?);
        }
    }
    Ok(out)
}

pub fn export_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pnm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Inverse of [`encode_pnm`]: returns a `[C, H, W]` tensor of `byte / 255`.
/// Accepts only the header layout this module writes, plus comments.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Data(format!("pnm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit depth is supported"));
    }
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    let plane = h * w;
    if raster.len() != c * plane {
        return Err(bad("raster length does not match header"));
    }
    let mut data = vec![0.0; c * plane];
    for (i, &b) in raster.iter().enumerate() {
        data[(i % c) * plane + i / c] = b as f64 / 255.0;
    }
    Tensor::from_vec(&[c, h, w], data)
}
