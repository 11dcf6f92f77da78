use super::{Scalar, Tensor4};
use crate::error::{contract_err, Result};

#[derive(Debug)]
pub struct ReluCache {
    mask: Vec<bool>,
    dims: super::Dims,
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, ReluCache) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (
        y,
        ReluCache {
            mask,
            dims: x.dims(),
        },
    )
}

impl ReluCache {
    pub fn backward<T: Scalar>(self, g_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if g_out.dims() != self.dims {
            return contract_err(format!(
                "relu backward: gradient {} does not match cached output {}",
                g_out.dims(),
                self.dims
            ));
        }
        let data = g_out
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &on)| if on { g } else { T::zero() })
            .collect();
        Tensor4::from_vec(self.dims, data)
    }
}

#[derive(Debug)]
pub struct SigmoidCache<T> {
    y: Tensor4<T>,
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, SigmoidCache<T>) {
    let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
    (y.clone(), SigmoidCache { y })
}

impl<T: Scalar> SigmoidCache<T> {
    pub fn backward(self, g_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if g_out.dims() != self.y.dims() {
            return contract_err(format!(
                "sigmoid backward: gradient {} does not match cached output {}",
                g_out.dims(),
                self.y.dims()
            ));
        }
        let mut g = self.y;
        for (s, &go) in g.data_mut().iter_mut().zip(g_out.data()) {
            *s = go * *s * (T::one() - *s);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn relu_values() {
        let x = Tensor4::<f32>::from_vec(Dims::new(1, 1, 1, 3), vec![-1.0, 2.0, 0.0]).unwrap();
        let (y, cache) = relu(&x);
        assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
        let g = cache.backward(&Tensor4::full(x.dims(), 1.0f32)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor4::<f64>::zeros(Dims::new(1, 1, 1, 1));
        let (y, cache) = sigmoid(&x);
        assert_eq!(y.data(), &[0.5]);
        let g = cache.backward(&Tensor4::full(x.dims(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.25]);
    }
}
