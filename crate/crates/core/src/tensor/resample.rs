use super::{Dims, Scalar, Tensor4};
use crate::error::{contract_err, shape_err, Result};

#[derive(Debug)]
pub struct MaxPoolCache {
    in_dims: Dims,
    out_dims: Dims,
    /// Flat input offset of the winning element of each output window.
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the smallest flat index.
pub fn maxpool2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, MaxPoolCache)> {
    let d = x.dims();
    if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
        return shape_err(format!("maxpool2 needs even height and width, got {d}"));
    }
    let od = Dims::new(d.n, d.c, d.h / 2, d.w / 2);
    let mut y = Vec::with_capacity(od.count());
    let mut argmax = Vec::with_capacity(od.count());
    let src = x.data();
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        for i in 0..od.h {
            for j in 0..od.w {
                let top = base + 2 * i * d.w + 2 * j;
                // scanned in increasing flat index, strict > keeps the first max
                let mut best = top;
                for cand in [top + 1, top + d.w, top + d.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                y.push(src[best]);
                argmax.push(best);
            }
        }
    }
    let cache = MaxPoolCache {
        in_dims: d,
        out_dims: od,
        argmax,
    };
    Ok((Tensor4::from_vec(od, y)?, cache))
}

impl MaxPoolCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    /// Routes each output gradient to its window's winner.
    pub fn backward<T: Scalar>(self, g_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if g_out.dims() != self.out_dims {
            return contract_err(format!(
                "maxpool2 backward: gradient {} does not match cached output {}",
                g_out.dims(),
                self.out_dims
            ));
        }
        let mut g = Tensor4::zeros(self.in_dims);
        let gd = g.data_mut();
        for (&idx, &v) in self.argmax.iter().zip(g_out.data()) {
            gd[idx] = gd[idx] + v;
        }
        Ok(g)
    }
}

#[derive(Debug)]
pub struct UpsampleCache {
    in_dims: Dims,
}

/// Nearest-neighbour x2 upsampling: every pixel becomes a 2x2 block.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, UpsampleCache) {
    let d = x.dims();
    let od = Dims::new(d.n, d.c, d.h * 2, d.w * 2);
    let mut y = Vec::with_capacity(od.count());
    for row in x.data().chunks_exact(d.w.max(1)).take(d.n * d.c * d.h) {
        let start = y.len();
        for &v in row {
            y.push(v);
            y.push(v);
        }
        y.extend_from_within(start..);
    }
    let y = Tensor4::from_vec(od, y).expect("upsample dims");
    (y, UpsampleCache { in_dims: d })
}

impl UpsampleCache {
    /// Sums each 2x2 block of output gradients into one input gradient.
    pub fn backward<T: Scalar>(self, g_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let d = self.in_dims;
        let od = Dims::new(d.n, d.c, d.h * 2, d.w * 2);
        if g_out.dims() != od {
            return contract_err(format!(
                "upsample backward: gradient {} does not match cached output {}",
                g_out.dims(),
                od
            ));
        }
        let g = g_out.data();
        let mut out = Vec::with_capacity(d.count());
        for nc in 0..d.n * d.c {
            let base = nc * od.plane();
            for i in 0..d.h {
                let r0 = base + 2 * i * od.w;
                let r1 = r0 + od.w;
                for j in 0..d.w {
                    out.push(g[r0 + 2 * j] + g[r0 + 2 * j + 1] + g[r1 + 2 * j] + g[r1 + 2 * j + 1]);
                }
            }
        }
        Tensor4::from_vec(d, out)
    }
}

#[derive(Debug)]
pub struct ConcatCache {
    a_dims: Dims,
    b_dims: Dims,
}

/// Stacks `a` and `b` along the channel axis, `a` first.
pub fn concat_channels<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<(Tensor4<T>, ConcatCache)> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.n != bd.n || ad.h != bd.h || ad.w != bd.w {
        return shape_err(format!(
            "concat_channels: {ad} and {bd} disagree on batch or spatial dims"
        ));
    }
    let od = Dims::new(ad.n, ad.c + bd.c, ad.h, ad.w);
    let mut y = Vec::with_capacity(od.count());
    for n in 0..ad.n {
        y.extend_from_slice(a.sample(n));
        y.extend_from_slice(b.sample(n));
    }
    Ok((
        Tensor4::from_vec(od, y)?,
        ConcatCache {
            a_dims: ad,
            b_dims: bd,
        },
    ))
}

impl ConcatCache {
    /// Splits the gradient back into the two operands' parts.
    pub fn backward<T: Scalar>(self, g_out: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let (ad, bd) = (self.a_dims, self.b_dims);
        let od = Dims::new(ad.n, ad.c + bd.c, ad.h, ad.w);
        if g_out.dims() != od {
            return contract_err(format!(
                "concat backward: gradient {} does not match cached output {}",
                g_out.dims(),
                od
            ));
        }
        let sa = ad.c * ad.plane();
        let mut ga = Vec::with_capacity(ad.count());
        let mut gb = Vec::with_capacity(bd.count());
        for n in 0..ad.n {
            let s = g_out.sample(n);
            ga.extend_from_slice(&s[..sa]);
            gb.extend_from_slice(&s[sa..]);
        }
        Ok((Tensor4::from_vec(ad, ga)?, Tensor4::from_vec(bd, gb)?))
    }
}
