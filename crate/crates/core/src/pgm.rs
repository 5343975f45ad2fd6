//! Binary PGM ("P5") reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::FaceImage;

/// Decodes a binary PGM. Accepts comments in the header and maxval up to 255.
pub fn decode(bytes: &[u8]) -> std::result::Result<FaceImage, String> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or("empty file")?;
    if magic != b"P5" {
        return Err(format!(
            "not a binary PGM (magic `{}`)",
            String::from_utf8_lossy(magic)
        ));
    }
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| format!("missing {name}"))?;
        *slot = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {name} `{}`", String::from_utf8_lossy(tok)))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (8-bit only)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() < width * height {
        return Err(format!(
            "raster truncated: {} bytes for {width}x{height}",
            raster.len()
        ));
    }
    let scale = maxval as f64;
    let pixels = raster[..width * height]
        .iter()
        .map(|&b| (b as f64 / scale).min(1.0))
        .collect();
    FaceImage::new(width, height, pixels).map_err(|e| e.to_string())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Encodes an image as 8-bit P5, rounding intensities to the nearest level.
/// `comment`, if given, is written as a header comment line.
pub fn encode(image: &FaceImage, comment: Option<&str>) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.pixels().len() + 64);
    out.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{} {}\n255\n", image.width(), image.height()).as_bytes());
    out.extend(image.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn read(path: &Path) -> Result<FaceImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(Error::structural)
}

pub fn write(path: &Path, image: &FaceImage, comment: Option<&str>) -> Result<()> {
    fs::write(path, encode(image, comment)).map_err(|e| Error::io(path, e))
}
