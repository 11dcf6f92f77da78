use crate::error::{contract_err, shape_err, Result};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return shape_err(format!("images of {a} and {b} pixels"));
    }
    Ok(())
}

/// Mean squared difference, accumulated in f64.
pub fn mean_sq_err(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    if a.is_empty() {
        return contract_err("mean squared error of empty images");
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// PSNR from an MSE; zero error gives `+inf`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return contract_err(format!("data range {data_range} must be positive"));
    }
    Ok(psnr_from_mse(mean_sq_err(a, b)?, data_range))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-region separable Gaussian filter.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&img[y * w + x..]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, a)| a * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean local SSIM over every full 11x11 Gaussian window.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, data_range: f64) -> Result<f64> {
    same_len(a.len(), b.len())?;
    same_len(a.len(), h * w)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return contract_err(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        ));
    }
    let k = ssim_kernel();
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&fa, h, w, &k);
    let mu_b = filter_valid(&fb, h, w, &k);
    let aa = filter_valid(&prod(&fa, &fa), h, w, &k);
    let bb = filter_valid(&prod(&fb, &fb), h, w, &k);
    let ab = filter_valid(&prod(&fa, &fb), h, w, &k);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}
