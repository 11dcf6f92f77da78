use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};

/// A stack of 2-D slices, row-major `(slices, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![T::default(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return shape_err(format!(
                "volume {}x{}x{} needs {} values, got {}",
                dims[0],
                dims[1],
                dims[2],
                dims.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn slice_dims(&self) -> (usize, usize) {
        (self.dims[1], self.dims[2])
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn slice(&self, i: usize) -> &[T] {
        let n = self.dims[1] * self.dims[2];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.dims[1] * self.dims[2];
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Builds a volume from equally sized slices.
    pub fn from_slices(h: usize, w: usize, slices: &[Vec<T>]) -> Result<Self> {
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.len() != h * w {
                return shape_err(format!("slice of {} values in a {h}x{w} volume", s.len()));
            }
            data.extend_from_slice(s);
        }
        Self::from_vec([slices.len(), h, w], data)
    }
}

/// Per-volume min/max used to map intensities onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub min: f32,
    pub max: f32,
}

/// Scales a volume to `[0, 1]` by its own min and max. A constant volume
/// maps to zeros.
pub fn normalize_01(vol: &Volume<f32>) -> (Volume<f32>, NormRecord) {
    let (min, max) = vol
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (min, max) = if vol.data().is_empty() {
        (0.0, 0.0)
    } else {
        (min, max)
    };
    let mut out = vol.clone();
    let range = max - min;
    for v in out.data_mut() {
        *v = if range > 0.0 { (*v - min) / range } else { 0.0 };
    }
    (out, NormRecord { min, max })
}

pub fn denormalize(vol: &Volume<f32>, rec: NormRecord) -> Volume<f32> {
    let mut out = vol.clone();
    let range = rec.max - rec.min;
    for v in out.data_mut() {
        *v = *v * range + rec.min;
    }
    out
}

/// Inclusive index range of the `keep` central slices out of `total`.
/// Odd remainders drop the extra slice from the back.
pub fn central_slices(total: usize, keep: usize) -> Result<(usize, usize)> {
    if keep == 0 || keep > total {
        return contract_err(format!("cannot keep {keep} of {total} slices"));
    }
    let first = (total - keep) / 2;
    Ok((first, first + keep - 1))
}
