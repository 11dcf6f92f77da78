use super::{Dims, Scalar, Tensor4};
use crate::error::{contract_err, shape_err, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running mean and (unbiased) variance used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches absorbed so far; zero means uninitialized.
    pub updates: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Folds the batch statistics recorded by a train-mode forward into the
    /// running estimates. The first batch initializes them outright.
    pub fn absorb(&mut self, cache: &BatchNormCache<T>) {
        let Some((mean, var)) = cache.batch_stats() else {
            return;
        };
        let m = cache.dims.n * cache.dims.plane();
        let unbias = m as f64 / (m as f64 - 1.0);
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let rest = T::one() - mom;
        for c in 0..self.mean.len() {
            let v = T::from_f64_lossy(var[c].as_f64() * unbias);
            if self.updates == 0 {
                self.mean[c] = mean[c];
                self.var[c] = v;
            } else {
                self.mean[c] = mom * self.mean[c] + rest * mean[c];
                self.var[c] = mom * self.var[c] + rest * v;
            }
        }
        self.updates += 1;
    }
}

/// Normalization source for [`batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the current batch's statistics.
    Train,
    /// Normalize with previously accumulated running statistics.
    Infer(&'a RunningStats<T>),
}

#[derive(Debug)]
pub struct BatchNormCache<T> {
    dims: Dims,
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    /// Batch mean and biased variance, present for train-mode forwards.
    batch: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Per-channel batch normalization over (n, h, w) followed by scale and shift.
pub fn batchnorm<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    mode: BnMode<'_, T>,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let d = x.dims();
    if gamma.len() != d.c || beta.len() != d.c {
        return shape_err(format!(
            "batchnorm: input {d} with {} gamma / {} beta entries",
            gamma.len(),
            beta.len()
        ));
    }
    let plane = d.plane();
    let m = d.n * plane;
    let (mean, var, batch) = match mode {
        BnMode::Train => {
            if m < 2 {
                return contract_err(format!(
                    "batchnorm train mode needs at least 2 values per channel, input is {d}"
                ));
            }
            let mut mean = vec![0.0f64; d.c];
            let mut var = vec![0.0f64; d.c];
            for c in 0..d.c {
                let chan = || (0..d.n).flat_map(move |n| &x.sample(n)[c * plane..(c + 1) * plane]);
                let mu0 = chan().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                // one correction pass; makes constant channels come out exact
                let mu = mu0 + chan().map(|v| v.as_f64() - mu0).sum::<f64>() / m as f64;
                let s2 = chan().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / m as f64;
                mean[c] = mu;
                var[c] = s2;
            }
            let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
            let var_t: Vec<T> = var.iter().map(|&v| T::from_f64_lossy(v)).collect();
            (mean_t.clone(), var_t.clone(), Some((mean_t, var_t)))
        }
        BnMode::Infer(stats) => {
            if !stats.is_initialized() {
                return contract_err("batchnorm inference with uninitialized running statistics");
            }
            if stats.mean.len() != d.c {
                return shape_err(format!(
                    "batchnorm: running stats for {} channels, input {d}",
                    stats.mean.len()
                ));
            }
            (stats.mean.clone(), stats.var.clone(), None)
        }
    };

    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor4::zeros(d);
    let mut y = Tensor4::zeros(d);
    for n in 0..d.n {
        let xs = x.sample(n);
        let xh = x_hat.sample_mut(n);
        for c in 0..d.c {
            let r = c * plane..(c + 1) * plane;
            for (o, &v) in xh[r.clone()].iter_mut().zip(&xs[r]) {
                *o = (v - mean[c]) * inv_std[c];
            }
        }
        let ys = y.sample_mut(n);
        let xh = x_hat.sample(n);
        for c in 0..d.c {
            let r = c * plane..(c + 1) * plane;
            for (o, &v) in ys[r.clone()].iter_mut().zip(&xh[r]) {
                *o = gamma[c] * v + beta[c];
            }
        }
    }
    let cache = BatchNormCache {
        dims: d,
        x_hat,
        inv_std,
        gamma: gamma.to_vec(),
        batch,
    };
    Ok((y, cache))
}

impl<T: Scalar> BatchNormCache<T> {
    pub fn batch_stats(&self) -> Option<(&[T], &[T])> {
        self.batch
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn backward(self, g_out: &Tensor4<T>) -> Result<BatchNormGrads<T>> {
        let d = self.dims;
        if g_out.dims() != d {
            return contract_err(format!(
                "batchnorm backward: gradient {} does not match cached output {d}",
                g_out.dims()
            ));
        }
        let plane = d.plane();
        let m = (d.n * plane) as f64;
        let mut g_gamma = vec![T::zero(); d.c];
        let mut g_beta = vec![T::zero(); d.c];
        for c in 0..d.c {
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for n in 0..d.n {
                let r = c * plane..(c + 1) * plane;
                for (&g, &xh) in g_out.sample(n)[r.clone()]
                    .iter()
                    .zip(&self.x_hat.sample(n)[r])
                {
                    sg += g.as_f64();
                    sgx += g.as_f64() * xh.as_f64();
                }
            }
            g_beta[c] = T::from_f64_lossy(sg);
            g_gamma[c] = T::from_f64_lossy(sgx);
        }

        let mut g_x = Tensor4::zeros(d);
        let train = self.batch.is_some();
        for n in 0..d.n {
            let gs = g_out.sample(n);
            let xh = self.x_hat.sample(n);
            let out = g_x.sample_mut(n);
            for c in 0..d.c {
                let r = c * plane..(c + 1) * plane;
                let scale = self.gamma[c] * self.inv_std[c];
                if train {
                    let mean_g = T::from_f64_lossy(g_beta[c].as_f64() / m);
                    let mean_gx = T::from_f64_lossy(g_gamma[c].as_f64() / m);
                    for ((o, &g), &h) in out[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&xh[r]) {
                        *o = scale * (g - mean_g - h * mean_gx);
                    }
                } else {
                    for (o, &g) in out[r.clone()].iter_mut().zip(&gs[r]) {
                        *o = scale * g;
                    }
                }
            }
        }
        Ok(BatchNormGrads {
            input: g_x,
            gamma: g_gamma,
            beta: g_beta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor4::<f64>::full(Dims::new(2, 3, 4, 4), 0.7);
        let (y, _) = batchnorm(&x, &[1.0; 3], &[0.0; 3], BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_has_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::<f64>::random_uniform(Dims::new(4, 2, 5, 5), -3.0, 7.0, &mut rng);
        let (y, _) = batchnorm(&x, &[1.0; 2], &[0.0; 2], BnMode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.sample(n)[c * 25..(c + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            // eps shrinks the variance slightly below one
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn infer_requires_initialized_stats() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 2, 2, 2));
        let stats = RunningStats::new(2);
        let err = batchnorm(&x, &[1.0; 2], &[0.0; 2], BnMode::Infer(&stats)).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn train_requires_two_values_per_channel() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 2, 1, 1));
        assert!(matches!(
            batchnorm(&x, &[1.0; 2], &[0.0; 2], BnMode::Train),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn running_stats_first_batch_then_momentum() {
        let x1 = Tensor4::<f64>::from_vec(Dims::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let x2 = Tensor4::<f64>::from_vec(Dims::new(1, 1, 1, 2), vec![5.0, 5.0]).unwrap();
        let mut stats = RunningStats::new(1);
        let (_, c1) = batchnorm(&x1, &[1.0], &[0.0], BnMode::Train).unwrap();
        stats.absorb(&c1);
        assert_eq!(stats.mean, vec![2.0]);
        // biased var 1, unbiased 2
        assert_eq!(stats.var, vec![2.0]);
        let (_, c2) = batchnorm(&x2, &[1.0], &[0.0], BnMode::Train).unwrap();
        stats.absorb(&c2);
        assert!((stats.mean[0] - (0.9 * 2.0 + 0.1 * 5.0)).abs() < 1e-12);
        assert!((stats.var[0] - 0.9 * 2.0).abs() < 1e-12);
        assert_eq!(stats.updates, 2);

        let (y, _) = batchnorm(&x2, &[2.0], &[1.0], BnMode::Infer(&stats)).unwrap();
        let expect = 2.0 * (5.0 - stats.mean[0]) / (stats.var[0] + BN_EPS).sqrt() + 1.0;
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }
}
