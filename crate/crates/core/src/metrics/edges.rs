//! Edge-profile sharpness and width.
//!
//! Edge pixels are Sobel magnitudes above the Otsu threshold inside a mask.
//! From each one the intensity profile is walked along the gradient
//! direction (quantized to 8 neighbours) up to the nearest local maximum and
//! back down to the nearest local minimum. The edge width is the distance
//! between the 10% and 90% crossings of that rise, linearly interpolated
//! between samples; an ideal one-pixel step therefore measures 0.8.

use serde::Serialize;

use crate::error::{contract_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EdgeStats {
    /// Mean of `|I_max - I_min| / width` over edge pixels.
    pub sharpness: f64,
    /// Mean width divided by the image diagonal.
    pub edge_width: f64,
    /// Mean width in pixels.
    pub width_px: f64,
    pub edge_pixels: usize,
    /// No usable edge was found; the values above are zero.
    pub empty: bool,
}

impl EdgeStats {
    fn empty() -> Self {
        Self {
            sharpness: 0.0,
            edge_width: 0.0,
            width_px: 0.0,
            edge_pixels: 0,
            empty: true,
        }
    }
}

const DIRS: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

pub fn sobel(img: &[f32], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        img[r * w + c] as f64
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            gx[i] = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            gy[i] = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        }
    }
    (gx, gy)
}

/// Otsu threshold of `values` over 256 bins spanning `[0, max]`.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &v in values {
        hist[((v / max * 256.0) as usize).min(255)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &n) in hist.iter().enumerate().take(255) {
        w0 += n as f64;
        sum0 += k as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_k = k;
        }
    }
    (best_k + 1) as f64 / 256.0 * max
}

/// Position where the rising profile first reaches `level`.
fn crossing(profile: &[f64], level: f64) -> f64 {
    for i in 1..profile.len() {
        if profile[i] >= level {
            let (a, b) = (profile[i - 1], profile[i]);
            return (i - 1) as f64 + (level - a) / (b - a);
        }
    }
    (profile.len() - 1) as f64
}

pub fn edge_profile_stats(img: &[f32], mask: &[bool], h: usize, w: usize) -> Result<EdgeStats> {
    if img.len() != h * w || mask.len() != h * w {
        return shape_err(format!(
            "image {} and mask {} pixels for {h}x{w}",
            img.len(),
            mask.len()
        ));
    }
    if !mask.iter().any(|&m| m) {
        return contract_err("edge statistics need a non-empty mask");
    }
    let (gx, gy) = sobel(img, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let inside: Vec<f64> = mag
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    let thr = otsu_threshold(&inside);
    if thr <= 0.0 {
        return Ok(EdgeStats::empty());
    }
    let val = |r: isize, c: isize| -> Option<f64> {
        (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w)
            .then(|| img[r as usize * w + c as usize] as f64)
    };
    let (mut n, mut sum_w, mut sum_s) = (0usize, 0.0, 0.0);
    for i in (0..h * w).filter(|&i| mask[i] && mag[i] > thr) {
        let oct = ((gy[i].atan2(gx[i]) / std::f64::consts::FRAC_PI_4).round() as isize)
            .rem_euclid(8) as usize;
        let (dc, dr) = DIRS[oct];
        let step = if dc != 0 && dr != 0 {
            std::f64::consts::SQRT_2
        } else {
            1.0
        };
        let (r0, c0) = ((i / w) as isize, (i % w) as isize);
        let mut up = vec![img[i] as f64];
        let (mut r, mut c) = (r0, c0);
        while let Some(v) = val(r + dr, c + dc) {
            if v <= *up.last().expect("non-empty") {
                break;
            }
            up.push(v);
            r += dr;
            c += dc;
        }
        let mut down = Vec::new();
        let (mut r, mut c) = (r0, c0);
        let mut cur = img[i] as f64;
        while let Some(v) = val(r - dr, c - dc) {
            if v >= cur {
                break;
            }
            down.push(v);
            cur = v;
            r -= dr;
            c -= dc;
        }
        down.reverse();
        down.extend(up);
        let profile = down;
        let (lo, hi) = (profile[0], *profile.last().expect("non-empty"));
        let delta = hi - lo;
        if delta <= 0.0 {
            continue;
        }
        let width =
            (crossing(&profile, lo + 0.9 * delta) - crossing(&profile, lo + 0.1 * delta)) * step;
        n += 1;
        sum_w += width;
        sum_s += delta / width;
    }
    if n == 0 {
        return Ok(EdgeStats::empty());
    }
    let width_px = sum_w / n as f64;
    Ok(EdgeStats {
        sharpness: sum_s / n as f64,
        edge_width: width_px / ((h * h + w * w) as f64).sqrt(),
        width_px,
        edge_pixels: n,
        empty: false,
    })
}
