use serde::{Deserialize, Serialize};

use super::{edge_profile_stats, histogram_match, mean_sq_err, psnr_from_mse, ssim, EdgeStats};
use crate::data::{normalize_01, Volume};
use crate::error::{shape_err, Result};

/// `2|A ∩ B| / (|A| + |B|)` for one label; two empty masks score 1.
pub fn dice(a: &[u16], b: &[u16], class: u16) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err(format!("label maps of {} and {} voxels", a.len(), b.len()));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += (x == class) as usize;
        nb += (y == class) as usize;
        both += (x == class && y == class) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Serde helpers writing non-finite floats as "inf", "-inf" or "nan".
pub mod float_str {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!(
                    "expected a number or inf/-inf/nan, got {other:?}"
                ))),
            },
        }
    }

    /// Plain-text form matching the JSON encoding.
    pub fn display(v: f64) -> String {
        if v.is_nan() {
            "nan".into()
        } else if v.is_infinite() {
            if v > 0.0 { "inf" } else { "-inf" }.into()
        } else {
            v.to_string()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(with = "float_str")]
    pub mean: f64,
    #[serde(with = "float_str")]
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value). Any
    /// infinite value makes the mean infinite and the spread undefined.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if !mean.is_finite() {
            return Self {
                mean,
                std: f64::NAN,
            };
        }
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice: usize,
    pub mse: f64,
    #[serde(with = "float_str")]
    pub psnr: f64,
    pub ssim: f64,
    pub sharpness: f64,
    pub edge_width: f64,
    pub edge_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    /// From the mean of the per-slice MSEs.
    #[serde(with = "float_str")]
    pub psnr: f64,
    pub ssim: f64,
    pub sharpness: f64,
    pub edge_width: f64,
    /// CSF, GM, WM in label-id order 1, 2, 3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<Vec<f64>>,
    pub slices: Vec<SliceMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub histogram_matched: bool,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub sharpness: MeanStd,
    pub edge_width: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<Vec<MeanStd>>,
    pub volumes: Vec<VolumeMetrics>,
}

pub const TISSUE_LABELS: [(u16, &str); 3] = [(1, "csf"), (2, "gm"), (3, "wm")];

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub apply_hm: bool,
}

/// Metrics of one reconstructed volume against its ground truth.
///
/// Both volumes are scaled by the truth's min/max so PSNR and SSIM use a
/// data range of 1. Edge statistics run on the prediction as given, over
/// pixels where the truth is positive. With `apply_hm` the prediction is
/// first histogram-matched to `lf_ref`.
pub fn evaluate_volume(
    id: &str,
    pred: &Volume<f32>,
    truth: &Volume<f32>,
    lf_ref: Option<&Volume<f32>>,
    opts: EvalOptions,
    labels: Option<(&Volume<u16>, &Volume<u16>)>,
) -> Result<VolumeMetrics> {
    if pred.dims() != truth.dims() {
        return shape_err(format!(
            "{id}: prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        ));
    }
    let (h, w) = truth.slice_dims();
    let pred = match (opts.apply_hm, lf_ref) {
        (true, Some(r)) => {
            if r.dims() != truth.dims() {
                return shape_err(format!(
                    "{id}: HM reference {:?} vs truth {:?}",
                    r.dims(),
                    truth.dims()
                ));
            }
            let (pn, prec) = normalize_01(pred);
            let (rn, _) = normalize_01(r);
            let m = histogram_match(pn.data(), rn.data(), 256);
            let range = prec.max - prec.min;
            Volume::from_vec(
                pred.dims(),
                m.into_iter().map(|v| v * range + prec.min).collect(),
            )?
        }
        _ => pred.clone(),
    };
    let (tn, rec) = normalize_01(truth);
    let range = rec.max - rec.min;
    let scale = |v: f32| {
        if range > 0.0 {
            (v - rec.min) / range
        } else {
            v - rec.min
        }
    };
    let mut slices = Vec::with_capacity(truth.slices());
    for i in 0..truth.slices() {
        let p: Vec<f32> = pred.slice(i).iter().map(|&v| scale(v)).collect();
        let t = tn.slice(i);
        let mse = mean_sq_err(&p, t)?;
        let mask: Vec<bool> = truth.slice(i).iter().map(|&v| v > 0.0).collect();
        let edges = if mask.iter().any(|&m| m) {
            edge_profile_stats(pred.slice(i), &mask, h, w)?
        } else {
            EdgeStats {
                sharpness: 0.0,
                edge_width: 0.0,
                width_px: 0.0,
                edge_pixels: 0,
                empty: true,
            }
        };
        slices.push(SliceMetrics {
            slice: i,
            mse,
            psnr: psnr_from_mse(mse, 1.0),
            ssim: ssim(&p, t, h, w, 1.0)?,
            sharpness: edges.sharpness,
            edge_width: edges.edge_width,
            edge_empty: edges.empty,
        });
    }
    let n = slices.len() as f64;
    let mean = |f: fn(&SliceMetrics) -> f64| slices.iter().map(f).sum::<f64>() / n;
    let dice = match labels {
        Some((a, b)) => Some(
            TISSUE_LABELS
                .iter()
                .map(|&(c, _)| dice(a.data(), b.data(), c))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(VolumeMetrics {
        id: id.to_string(),
        psnr: psnr_from_mse(mean(|s| s.mse), 1.0),
        ssim: mean(|s| s.ssim),
        sharpness: mean(|s| s.sharpness),
        edge_width: mean(|s| s.edge_width),
        dice,
        slices,
    })
}

impl MetricReport {
    pub fn aggregate(volumes: Vec<VolumeMetrics>, histogram_matched: bool) -> Self {
        let col =
            |f: fn(&VolumeMetrics) -> f64| MeanStd::of(&volumes.iter().map(f).collect::<Vec<_>>());
        let dice = if !volumes.is_empty() && volumes.iter().all(|v| v.dice.is_some()) {
            Some(
                (0..TISSUE_LABELS.len())
                    .map(|k| {
                        MeanStd::of(
                            &volumes
                                .iter()
                                .map(|v| v.dice.as_ref().expect("checked")[k])
                                .collect::<Vec<_>>(),
                        )
                    })
                    .collect(),
            )
        } else {
            None
        };
        Self {
            histogram_matched,
            psnr: col(|v| v.psnr),
            ssim: col(|v| v.ssim),
            sharpness: col(|v| v.sharpness),
            edge_width: col(|v| v.edge_width),
            dice,
            volumes,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per slice.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,slice,mse,psnr,ssim,sharpness,edge_width,edge_empty\n");
        for v in &self.volumes {
            for s in &v.slices {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    v.id,
                    s.slice,
                    s.mse,
                    float_str::display(s.psnr),
                    s.ssim,
                    s.sharpness,
                    s.edge_width,
                    s.edge_empty
                ));
            }
        }
        out
    }
}
