//! Middlebury `.flo`, grayscale PFM and binary PPM (P6) files.

use std::path::Path;

use denviscom_tensor::Tensor;

use crate::error::{io_err, Error, Result};

pub const FLO_TAG: f32 = 202021.25;

/// `.flo` stores invalid vectors as components at or above this magnitude.
pub const FLO_UNKNOWN: f32 = 1e9;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_flo(field: &Tensor) -> Result<Vec<u8>> {
    let s = field.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Contract(format!("flow field must be [2, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let d = field.data();
    for i in 0..h * w {
        out.extend_from_slice(&(d[i] as f32).to_le_bytes());
        out.extend_from_slice(&(d[h * w + i] as f32).to_le_bytes());
    }
    Ok(out)
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Decodes a `.flo` payload into a `[2, H, W]` field.
pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let tag = f32_at(bytes, 0);
    if tag != FLO_TAG {
        return Err(format_err(path, format!("bad tag {tag}")));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(format_err(path, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let mut data = vec![0.0; 2 * h * w];
    for i in 0..h * w {
        data[i] = f32_at(bytes, 12 + 8 * i) as f64;
        data[h * w + i] = f32_at(bytes, 16 + 8 * i) as f64;
    }
    Ok(Tensor::new(&[2, h, w], data)?)
}

pub fn write_flo(field: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_flo(field)?).map_err(io_err(path))
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    decode_flo(&std::fs::read(path).map_err(io_err(path))?, path)
}

/// Pixels of a `.flo` field that carry a known vector.
pub fn flo_valid_mask(field: &Tensor) -> Vec<bool> {
    let n = field.numel() / 2;
    let d = field.data();
    (0..n)
        .map(|i| d[i].abs() < FLO_UNKNOWN as f64 && d[n + i].abs() < FLO_UNKNOWN as f64)
        .collect()
}

/// Little-endian grayscale PFM, rows stored bottom to top.
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Contract(format!("disparity map must be [H, W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in map.data().chunks(w).rev() {
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads one whitespace-terminated header token starting at `*pos`.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || *pos >= bytes.len() {
        return Err(format_err(path, "truncated header"));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| format_err(path, "non-ASCII header"))?;
    *pos += 1; // the single whitespace byte ending the token
    Ok(tok)
}

fn parse_dim(tok: &str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format_err(path, format!("invalid dimension {tok:?}"))),
    }
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos, path)?;
    if magic != "Pf" {
        return Err(format_err(path, format!("expected grayscale PFM magic Pf, got {magic:?}")));
    }
    let w = parse_dim(header_token(bytes, &mut pos, path)?, path)?;
    let h = parse_dim(header_token(bytes, &mut pos, path)?, path)?;
    let scale_tok = header_token(bytes, &mut pos, path)?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| format_err(path, format!("invalid scale {scale_tok:?}")))?;
    let payload = &bytes[pos..];
    if payload.len() != 4 * w * h {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: pos + 4 * w * h,
            found: bytes.len(),
        });
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h];
    for (r, row) in payload.chunks(4 * w).enumerate() {
        let y = h - 1 - r;
        for (x, b) in row.chunks(4).enumerate() {
            let b: [u8; 4] = b.try_into().unwrap();
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            data[y * w + x] = v as f64;
        }
    }
    Ok(Tensor::from_fn(&[h, w], |i| data[i]))
}

pub fn write_pfm(map: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pfm(map)?).map_err(io_err(path))
}

/// Reads a PFM map; non-finite entries are kept and reported by
/// [`pfm_valid_mask`].
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&std::fs::read(path).map_err(io_err(path))?, path)
}

pub fn pfm_valid_mask(map: &Tensor) -> Vec<bool> {
    map.data().iter().map(|v| v.is_finite()).collect()
}

/// Decodes 8-bit P6 into a `[3, H, W]` image in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    // comments may follow the magic or any header field
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        tokens.push(header_token(bytes, &mut pos, path)?.to_string());
    }
    if tokens[0] != "P6" {
        return Err(format_err(path, format!("expected P6 magic, got {:?}", tokens[0])));
    }
    let w = parse_dim(&tokens[1], path)?;
    let h = parse_dim(&tokens[2], path)?;
    let maxval = tokens[3].parse::<u32>().ok().filter(|&m| m > 0 && m < 256);
    let Some(maxval) = maxval else {
        return Err(format_err(path, format!("unsupported maxval {:?}", tokens[3])));
    };
    let payload = &bytes[pos..];
    if payload.len() != 3 * w * h {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: pos + 3 * w * h,
            found: bytes.len(),
        });
    }
    let maxval = maxval as f64;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, pix) = (i / (h * w), i % (h * w));
        payload[3 * pix + c] as f64 / maxval
    }))
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("image must be [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for pix in 0..h * w {
        for c in 0..3 {
            let v = img.data()[c * h * w + pix].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(io_err(path))?, path)
}

pub fn write_ppm(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(io_err(path))
}
