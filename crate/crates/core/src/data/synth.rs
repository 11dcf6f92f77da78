//! Brain-like phantom pairs: nested soft-edged ellipses with CSF/GM/WM
//! intensity tiers on a zero background (HF), and a blurred, gamma-warped,
//! noisy copy (LF).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Manifest, ManifestEntry, SubjectVolume};
use super::mvol::{save_labels, save_volume, write_atomic};
use super::volume::{normalize_01, Volume};
use crate::error::{contract_err, Result};
use crate::metrics::psnr;

pub const LABEL_CSF: u16 = 1;
pub const LABEL_GM: u16 = 2;
pub const LABEL_WM: u16 = 3;

const TIER_CSF: f64 = 0.25;
const TIER_GM: f64 = 0.6;
const TIER_WM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub blur_sigma: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub size: usize,
    pub slices: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.5,
            gamma: 0.7,
            noise_sigma: 0.02,
            size: 64,
            slices: 10,
            count: 10,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0) {
            return contract_err(format!(
                "blur sigma {} must be non-negative",
                self.blur_sigma
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return contract_err(format!("gamma {} must lie in (0, 1]", self.gamma));
        }
        if !(self.noise_sigma >= 0.0) {
            return contract_err(format!(
                "noise sigma {} must be non-negative",
                self.noise_sigma
            ));
        }
        if self.size < 8 || self.slices == 0 {
            return contract_err(format!(
                "need size >= 8 and at least one slice, got {} and {}",
                self.size, self.slices
            ));
        }
        Ok(())
    }
}

/// Ellipse with a low-order angular wobble on its radius.
#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    /// Signed distance proxy in pixels: negative inside.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        let theta = v.atan2(u);
        let wobble: f64 = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(k, a, p)| a * (k * theta + p).cos())
                .sum::<f64>();
        (r - wobble) * self.rx.min(self.ry)
    }

    /// Soft membership in `[0, 1]` with a sub-pixel edge.
    fn weight(&self, x: f64, y: f64) -> f64 {
        let d = self.distance(x, y);
        if d > 3.0 {
            0.0
        } else if d < -3.0 {
            1.0
        } else {
            1.0 / (1.0 + (d / 0.35).exp())
        }
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            rx: self.rx * f,
            ry: self.ry * f,
            ..self.clone()
        }
    }
}

fn harmonics<R: Rng>(rng: &mut R, amp: f64) -> Vec<(f64, f64, f64)> {
    (3..=7)
        .map(|k| {
            (
                k as f64,
                rng.random_range(0.0..amp),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect()
}

/// Intensity and label of one phantom slice at depth `z` in `[-1, 1]`.
fn render_slice(
    size: usize,
    brain: &Blob,
    gm: &Blob,
    wm: &Blob,
    holes: &[Blob],
    z: f64,
) -> (Vec<f64>, Vec<u16>) {
    let f = (1.0 - 0.55 * z * z).sqrt();
    let (brain, gm, wm) = (brain.scaled(f), gm.scaled(f), wm.scaled(f));
    let hf = 1.0 - z.abs();
    let holes: Vec<Blob> = holes
        .iter()
        .map(|h| h.scaled(f * (0.4 + 0.6 * hf)))
        .collect();
    let mut img = Vec::with_capacity(size * size);
    let mut lab = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let m0 = brain.weight(x, y);
            let m1 = gm.weight(x, y).min(m0);
            let m2 = wm.weight(x, y).min(m1);
            let mh = holes
                .iter()
                .map(|h| h.weight(x, y))
                .fold(0.0, f64::max)
                .min(m2);
            let v = TIER_CSF * m0 + (TIER_GM - TIER_CSF) * m1 + (TIER_WM - TIER_GM) * m2;
            img.push(v * (1.0 - mh) + TIER_CSF * mh);
            lab.push(if mh > 0.5 {
                LABEL_CSF
            } else if m2 > 0.5 {
                LABEL_WM
            } else if m1 > 0.5 {
                LABEL_GM
            } else if m0 > 0.5 {
                LABEL_CSF
            } else {
                0
            });
        }
    }
    (img, lab)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return vec![1.0];
    }
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    let r = i.rem_euclid(p);
    (if r < n { r } else { p - r }) as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img[y * w + mirror(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[mirror(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// `clamp(blur(hf)^gamma + noise, 0, 1)` on one slice.
pub fn degrade<R: Rng>(hf: &[f64], h: usize, w: usize, p: &SynthParams, rng: &mut R) -> Vec<f64> {
    let b = gaussian_blur(hf, h, w, p.blur_sigma);
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    b.into_iter()
        .map(|v| {
            let n = if p.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            (v.max(0.0).powf(p.gamma) + n).clamp(0.0, 1.0)
        })
        .collect()
}

fn subject_rngs(seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut shape = ChaCha8Rng::seed_from_u64(seed);
    shape.set_stream(2 * index as u64);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * index as u64 + 1);
    (shape, noise)
}

pub fn subject_id(i: usize) -> String {
    format!("sub{i:03}")
}

/// One phantom subject; both volumes are normalized to `[0, 1]`.
pub fn synth_subject(p: &SynthParams, index: usize) -> SubjectVolume {
    let (mut rng, mut noise_rng) = subject_rngs(p.seed, index);
    let s = p.size as f64;
    let cx = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let cy = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let angle = rng.random_range(-0.3..0.3);
    let brain = Blob {
        cx,
        cy,
        rx: rng.random_range(0.34..0.42) * s,
        ry: rng.random_range(0.38..0.46) * s,
        angle,
        harmonics: harmonics(&mut rng, 0.02),
    };
    let gm = Blob {
        harmonics: harmonics(&mut rng, 0.03),
        ..brain.scaled(rng.random_range(0.84..0.9))
    };
    let wm = Blob {
        harmonics: harmonics(&mut rng, 0.08),
        ..brain.scaled(rng.random_range(0.58..0.68))
    };
    let spread = rng.random_range(0.06..0.1) * s;
    let mut holes: Vec<Blob> = [-1.0, 1.0]
        .iter()
        .map(|side| Blob {
            cx: cx + side * spread,
            cy: cy + rng.random_range(-0.03..0.03) * s,
            rx: rng.random_range(0.035..0.06) * s,
            ry: rng.random_range(0.09..0.14) * s,
            angle: angle + side * rng.random_range(0.0..0.4),
            harmonics: Vec::new(),
        })
        .collect();
    for _ in 0..rng.random_range(0..3usize) {
        let a = rng.random_range(0.0..2.0 * PI);
        let d = rng.random_range(0.15..0.3) * s;
        holes.push(Blob {
            cx: cx + d * a.cos(),
            cy: cy + d * a.sin(),
            rx: rng.random_range(0.02..0.04) * s,
            ry: rng.random_range(0.02..0.04) * s,
            angle: 0.0,
            harmonics: Vec::new(),
        });
    }

    let n = p.size;
    let (mut hf, mut lf, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..p.slices {
        let z = if p.slices == 1 {
            0.0
        } else {
            -0.8 + 1.6 * i as f64 / (p.slices - 1) as f64
        };
        let (img, lab) = render_slice(n, &brain, &gm, &wm, &holes, z);
        lf.extend(
            degrade(&img, n, n, p, &mut noise_rng)
                .into_iter()
                .map(|v| v as f32),
        );
        hf.extend(img.into_iter().map(|v| v as f32));
        labels.extend(lab);
    }
    let dims = [p.slices, n, n];
    let hf = normalize_01(&Volume::from_vec(dims, hf).expect("dims")).0;
    let lf = normalize_01(&Volume::from_vec(dims, lf).expect("dims")).0;
    SubjectVolume {
        id: subject_id(index),
        lf,
        hf,
        labels: Some(Volume::from_vec(dims, labels).expect("dims")),
    }
}

pub fn synth_generate(p: &SynthParams) -> Result<Vec<SubjectVolume>> {
    p.validate()?;
    Ok((0..p.count).map(|i| synth_subject(p, i)).collect())
}

/// Degraded-input quality per subject: PSNR(LF, HF) of each slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectBaseline {
    pub id: String,
    pub slice_psnr: Vec<f64>,
    pub mean_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub params: SynthParams,
    pub subjects: Vec<SubjectBaseline>,
    /// Mean over all slices of all subjects.
    pub mean_psnr: f64,
}

pub fn baseline(s: &SubjectVolume) -> SubjectBaseline {
    let slice_psnr: Vec<f64> = (0..s.hf.slices())
        .map(|i| psnr(s.lf.slice(i), s.hf.slice(i), 1.0).expect("equal dims"))
        .collect();
    let mean_psnr = slice_psnr.iter().sum::<f64>() / slice_psnr.len() as f64;
    SubjectBaseline {
        id: s.id.clone(),
        slice_psnr,
        mean_psnr,
    }
}

pub fn synth_record(p: &SynthParams, subjects: &[SubjectVolume]) -> SynthRecord {
    let subjects: Vec<SubjectBaseline> = subjects.iter().map(baseline).collect();
    let all: Vec<f64> = subjects
        .iter()
        .flat_map(|b| b.slice_psnr.iter().copied())
        .collect();
    SynthRecord {
        params: p.clone(),
        mean_psnr: all.iter().sum::<f64>() / all.len().max(1) as f64,
        subjects,
    }
}

/// Writes `<id>_lf.mvol`, `<id>_hf.mvol`, `<id>_labels.mvol`,
/// `manifest.json` and `synth.json` into `dir`.
pub fn write_dataset(dir: &Path, p: &SynthParams, subjects: &[SubjectVolume]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in subjects {
        let lf = format!("{}_lf.mvol", s.id);
        let hf = format!("{}_hf.mvol", s.id);
        save_volume(&dir.join(&lf), &s.lf)?;
        save_volume(&dir.join(&hf), &s.hf)?;
        let labels_path = match &s.labels {
            Some(l) => {
                let name = format!("{}_labels.mvol", s.id);
                save_labels(&dir.join(&name), l)?;
                Some(name.into())
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            lf_path: lf.into(),
            hf_path: hf.into(),
            labels_path,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    let mut rec = serde_json::to_string_pretty(&synth_record(p, subjects))?;
    rec.push('\n');
    write_atomic(&dir.join("synth.json"), rec.as_bytes())?;
    Ok(manifest)
}
