//! Binary PPM (P6) images, PFM float maps and raw f32 dumps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encodes a 3×H×W image in [0, 1] as P6 with maxval 255.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_rank("encode_ppm", 3)?;
    if image.dim(0) != 3 {
        return Err(Error::shape("encode_ppm", "axis 0", 3, image.dim(0)));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Splits off whitespace-separated header tokens, skipping `#` comments.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "header", "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(path, "header", "not ASCII"))?;
        tokens.push(tok);
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() {
        return Err(Error::format(path, "header", "missing payload"));
    }
    Ok((tokens, pos + 1))
}

fn parse_dim(tok: &str, field: &str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, field, format!("invalid value '{tok}'"))),
    }
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "P6" {
        return Err(Error::format(path, "magic", format!("expected P6, found '{}'", tok[0])));
    }
    let w = parse_dim(tok[1], "width", path)?;
    let h = parse_dim(tok[2], "height", path)?;
    let maxval = parse_dim(tok[3], "maxval", path)?;
    if maxval > 255 {
        return Err(Error::format(path, "maxval", "only 8-bit PPM is supported"));
    }
    let payload = &bytes[off..];
    if payload.len() < 3 * h * w {
        return Err(Error::format(path, "payload", format!("expected {} bytes, found {}", 3 * h * w, payload.len())));
    }
    let plane = h * w;
    let maxval = maxval as f32;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        f32::from(payload[3 * p + ch]) / maxval
    }))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Encodes an H×W map as single-channel little-endian PFM, bottom row first.
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    map.expect_rank("encode_pfm", 2)?;
    let (h, w) = (map.dim(0), map.dim(1));
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for i in (0..h).rev() {
        for &v in &map.data()[i * w..(i + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes `Pf` (H×W) or `PF` (3×H×W) in either byte order.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    let channels = match tok[0] {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(path, "magic", format!("expected Pf or PF, found '{other}'"))),
    };
    let w = parse_dim(tok[1], "width", path)?;
    let h = parse_dim(tok[2], "height", path)?;
    let scale: f32 = tok[3]
        .parse()
        .map_err(|_| Error::format(path, "scale", format!("invalid value '{}'", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "scale", "must be nonzero"));
    }
    let little = scale < 0.0;
    let payload = &bytes[off..];
    let n = channels * h * w;
    if payload.len() < 4 * n {
        return Err(Error::format(path, "payload", format!("expected {} bytes, found {}", 4 * n, payload.len())));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; n];
    for (k, c) in payload[..4 * n].chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (pix, ch) = (k / channels, k % channels);
        let (file_row, j) = (pix / w, pix % w);
        let i = h - 1 - file_row;
        out[ch * plane + i * w + j] = v;
    }
    if channels == 1 {
        Tensor::from_vec(&[h, w], out)
    } else {
        Tensor::from_vec(&[3, h, w], out)
    }
}

pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pfm(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

/// Lossless dump: magic `RF32`, u32 rank, u32 dims, little-endian f32 payload.
pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = b"RF32".to_vec();
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::format(path, "header", "truncated"))
    };
    if bytes.get(..4) != Some(b"RF32".as_slice()) {
        return Err(Error::format(path, "magic", "expected RF32"));
    }
    let rank = word(4)? as usize;
    let dims = (0..rank).map(|k| word(8 + 4 * k).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let off = 8 + 4 * rank;
    let n: usize = dims.iter().product();
    let payload = bytes
        .get(off..off + 4 * n)
        .ok_or_else(|| Error::format(path, "payload", "truncated"))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&dims, data)
}
