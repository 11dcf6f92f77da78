fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

fn cdf(img: &[f32], bins: usize) -> Vec<f64> {
    let mut h = vec![0usize; bins];
    for &v in img {
        h[bin_of(v, bins)] += 1;
    }
    let n = img.len().max(1) as f64;
    let mut acc = 0usize;
    h.into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect()
}

/// Remaps `src` so its intensity distribution follows `reference`.
///
/// Each source value goes through the source CDF of its bin, then through
/// the inverse reference CDF, interpolated linearly between the centers of
/// non-empty reference bins. Values are expected in `[0, 1]`.
pub fn histogram_match(src: &[f32], reference: &[f32], bins: usize) -> Vec<f32> {
    assert!(bins > 0, "histogram needs at least one bin");
    if reference.is_empty() {
        return src.to_vec();
    }
    let sc = cdf(src, bins);
    let rc = cdf(reference, bins);
    let center = |k: usize| (k as f64 + 0.5) / bins as f64;
    // (center, cdf) of every occupied reference bin; cdf strictly increasing
    let knots: Vec<(f64, f64)> = (0..bins)
        .filter(|&k| rc[k] > if k == 0 { 0.0 } else { rc[k - 1] })
        .map(|k| (center(k), rc[k]))
        .collect();
    let lut: Vec<f32> = sc
        .iter()
        .map(|&q| {
            let j = knots.partition_point(|&(_, c)| c < q).min(knots.len() - 1);
            if j == 0 {
                return knots[0].0 as f32;
            }
            let ((x0, c0), (x1, c1)) = (knots[j - 1], knots[j]);
            (x0 + (q - c0) / (c1 - c0) * (x1 - x0)) as f32
        })
        .collect();
    src.iter().map(|&v| lut[bin_of(v, bins)]).collect()
}
