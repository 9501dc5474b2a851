//! Binary PGM (`P5`, 8-bit) export for slices and masks.

use std::path::Path;

use crate::container::write_file;
use crate::error::{Error, Result};
use crate::volume::Slice2D;

pub fn encode(shape: (usize, usize), pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", shape.1, shape.0).into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Values are clipped to `[0, 1]` and scaled to `0..=255`.
pub fn slice_pixels(s: &Slice2D) -> Vec<u8> {
    s.data()
        .iter()
        .map(|&v| {
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (v * 255.0).round() as u8
        })
        .collect()
}

pub fn write_slice(path: impl AsRef<Path>, s: &Slice2D) -> Result<()> {
    write_file(path, &encode(s.shape(), &slice_pixels(s)))
}

pub fn write_mask(path: impl AsRef<Path>, shape: (usize, usize), mask: &[bool]) -> Result<()> {
    let px: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_file(path, &encode(shape, &px))
}

fn corrupt<T>(msg: &str) -> Result<T> {
    Err(Error::CorruptFile(format!("pgm: {msg}")))
}

/// Parses a `P5` image with `maxval <= 255`. Returns `(rows, cols)` and pixels.
pub fn decode(bytes: &[u8]) -> Result<((usize, usize), Vec<u8>)> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return corrupt("truncated header");
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return corrupt("not a binary PGM");
    }
    let mut num = || -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::CorruptFile("pgm: bad header number".into()))
    };
    let w = num()?;
    let h = num()?;
    let maxval = num()?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return corrupt("unsupported dimensions or maxval");
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::CorruptFile("pgm: size overflow".into()))?;
    if pos > bytes.len() || bytes.len() - pos != n {
        return corrupt("raster size mismatch");
    }
    Ok(((h, w), bytes[pos..].to_vec()))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<((usize, usize), Vec<bool>)> {
    let (shape, px) = decode(&std::fs::read(path)?)?;
    Ok((shape, px.into_iter().map(|p| p >= 128).collect()))
}
