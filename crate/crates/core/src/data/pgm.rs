//! Binary PGM (P5) reading for slice-stack import and 8-bit dumps.

use std::fs;
use std::path::Path;

use super::mvol::write_atomic;
use super::Volume;
use crate::error::{shape_err, Error, Result};

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    })
}

/// Decoded P5 image: `(h, w, maxval, samples)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, u16, Vec<u16>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return fmt_err(0, "not a binary PGM (missing P5 magic)");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return fmt_err(pos, "expected a header number");
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                msg: "header number out of range".into(),
            })?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return fmt_err(pos, "expected whitespace after maxval");
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return fmt_err(pos, format!("maxval {maxval} outside 1..=65535"));
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * bps;
    let body = &bytes[pos..];
    if body.len() < need {
        return fmt_err(
            bytes.len(),
            format!("truncated raster: {} of {need} bytes", body.len()),
        );
    }
    let samples = if bps == 2 {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        body[..need].iter().map(|&b| b as u16).collect()
    };
    Ok((h, w, maxval as u16, samples))
}

/// Stacks PGM slices (8- or 16-bit) into a volume of raw sample values.
pub fn import_pgm_stack(paths: &[impl AsRef<Path>]) -> Result<Volume<f32>> {
    let mut slices = Vec::new();
    let mut dims = None;
    for p in paths {
        let (h, w, _, s) = decode_pgm(&fs::read(p.as_ref())?)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return shape_err(format!(
                    "{} is {h}x{w}, earlier slices are {}x{}",
                    p.as_ref().display(),
                    d.0,
                    d.1
                ));
            }
            _ => {}
        }
        slices.push(s.into_iter().map(|v| v as f32).collect::<Vec<f32>>());
    }
    let Some((h, w)) = dims else {
        return Err(Error::Contract("no PGM slices given".into()));
    };
    Volume::from_slices(h, w, &slices)
}

/// 8-bit rendering of a `[0, 1]` image (values clamped).
pub fn encode_pgm8(img: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm8(path: &Path, img: &[f32], h: usize, w: usize) -> Result<()> {
    write_atomic(path, &encode_pgm8(img, h, w))
}
