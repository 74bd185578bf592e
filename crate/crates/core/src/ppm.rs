//! Binary portable pixmap (P6, 8-bit) encoding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};
use crate::tensor::Image;

/// `[0, 1]` intensity to an 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an image as P6. Grayscale images are replicated to RGB.
pub fn encode(image: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + image.height() * image.width() * 3);
    out.extend_from_slice(header.as_bytes());
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..3 {
                let ch = if image.channels() == 3 { c } else { 0 };
                out.push(quantize(image.get(y, x, ch)));
            }
        }
    }
    out
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PPM",
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Decodes a P6 file with maxval 255 into an RGB image.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
            return Err(format_err(pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P6" {
        return Err(format_err(0, "not a P6 pixmap"));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| format_err(fields[i].0, "bad header number"))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(format_err(fields[3].0, "only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(format_err(bytes.len(), "truncated raster"));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(h, w, 3, data)
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    write_file(path, &encode(image))
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&read_file(path)?)
}
