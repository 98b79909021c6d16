//! Binary PGM (P5) and PPM (P6) images, 8 bits per sample.

use std::fs;
use std::path::Path;

use csiqa_core::Image;

use crate::error::{Error, Result};

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Pnm { path: path.to_path_buf(), msg: msg.into() }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn skip_space_and_comments(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn header_number(bytes: &[u8], i: &mut usize, what: &str) -> std::result::Result<usize, String> {
    *i = skip_space_and_comments(bytes, *i);
    let start = *i;
    while *i < bytes.len() && bytes[*i].is_ascii_digit() {
        *i += 1;
    }
    std::str::from_utf8(&bytes[start..*i])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("malformed {what} in header"))
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM (P5) or PPM (P6) file".into()),
    };
    let mut i = 2;
    let width = header_number(bytes, &mut i, "width")?;
    let height = header_number(bytes, &mut i, "height")?;
    let maxval = header_number(bytes, &mut i, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported; only 8-bit samples are read"));
    }
    match bytes.get(i) {
        Some(b) if b.is_ascii_whitespace() => Ok(Header { channels, width, height, maxval, data_start: i + 1 }),
        _ => Err("missing whitespace after maxval".into()),
    }
}

/// Decodes a P5/P6 image into `[0, 1]` samples (`sample / maxval`).
pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let h = parse_header(bytes)?;
    let n = h.channels * h.width * h.height;
    let raster =
        bytes.get(h.data_start..h.data_start + n).ok_or_else(|| format!("truncated raster: expected {n} bytes"))?;
    // Interleaved RGB to planar channels.
    let mut data = vec![0.0; n];
    let plane = h.width * h.height;
    for (p, chunk) in raster.chunks_exact(h.channels).enumerate() {
        for (c, &v) in chunk.iter().enumerate() {
            data[c * plane + p] = v as f64 / h.maxval as f64;
        }
    }
    Image::new(h.channels, h.height, h.width, data).map_err(|e| e.to_string())
}

/// Reads a P5/P6 file.
pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| bad(path, m))
}

/// Reads a P5/P6 file as luminance (BT.601 weights for colour input).
pub fn read_luma(path: &Path) -> Result<Image> {
    Ok(read(path)?.to_luma()?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a one- or three-channel image with maxval 255; samples are
/// clamped to `[0, 1]`.
pub fn encode(img: &Image) -> std::result::Result<Vec<u8>, String> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(format!("cannot store {c}-channel image as PNM")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let plane = img.width() * img.height();
    for p in 0..plane {
        for c in 0..img.channels() {
            out.push(quantize(img.data()[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    let bytes = encode(img).map_err(|m| bad(path, m))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
