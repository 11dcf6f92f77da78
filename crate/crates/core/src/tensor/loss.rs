use super::{Dims, Scalar, Tensor4};
use crate::error::{contract_err, Result};

#[derive(Debug)]
pub struct MseCache<T> {
    diff: Tensor4<T>,
}

/// Mean squared error over all elements, accumulated in f64.
pub fn mse<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, MseCache<T>)> {
    target.expect_dims(pred.dims(), "mse")?;
    let mut diff = pred.clone();
    for (d, &t) in diff.data_mut().iter_mut().zip(target.data()) {
        *d = *d - t;
    }
    let count = diff.len().max(1) as f64;
    let loss = diff.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / count;
    Ok((loss, MseCache { diff }))
}

impl<T: Scalar> MseCache<T> {
    pub fn dims(&self) -> Dims {
        self.diff.dims()
    }

    /// Gradient of `scale * mse` with respect to the prediction.
    pub fn backward(self, scale: f64) -> Result<Tensor4<T>> {
        if !scale.is_finite() {
            return contract_err("mse backward with non-finite upstream gradient");
        }
        let k = T::from_f64_lossy(2.0 * scale / self.diff.len().max(1) as f64);
        let mut g = self.diff;
        g.scale(k);
        Ok(g)
    }
}
