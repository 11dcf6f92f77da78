//! Image-quality and overlap measures used to score reconstructions.

mod edges;
mod histogram;
mod quality;
mod report;

pub use edges::{edge_profile_stats, otsu_threshold, sobel, EdgeStats};
pub use histogram::histogram_match;
pub use quality::{mean_sq_err, psnr, psnr_from_mse, ssim, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{
    dice, evaluate_volume, float_str, EvalOptions, MeanStd, MetricReport, SliceMetrics,
    VolumeMetrics, TISSUE_LABELS,
};
