use super::{Dims, Scalar, Tensor4};
use crate::error::{contract_err, shape_err, Result};

/// Borrowed view of one convolution's parameters.
///
/// `weight` has dims `(out_channels, in_channels, k, k)` with odd `k`;
/// `bias` has one entry per output channel.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'a, T> {
    pub weight: &'a Tensor4<T>,
    pub bias: &'a [T],
}

impl<'a, T: Scalar> ConvParams<'a, T> {
    pub fn new(weight: &'a Tensor4<T>, bias: &'a [T]) -> Result<Self> {
        let d = weight.dims();
        if d.h != d.w || d.h.is_multiple_of(2) {
            return shape_err(format!("conv kernel must be square and odd, got {d}"));
        }
        if bias.len() != d.n {
            return shape_err(format!(
                "conv bias has {} entries for {} output channels",
                bias.len(),
                d.n
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims().h
    }
}

/// How a convolution is evaluated. Both give the same sums up to rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPath {
    /// Patch unfolding plus one matrix product per sample.
    Gemm,
    /// Shifted multiply-adds over zero-padded planes; faster when channel
    /// counts are small and planes are large.
    Direct,
}

impl ConvPath {
    /// Path used by [`conv2d`] for a given layer shape.
    pub fn choose(in_c: usize, out_c: usize, h: usize, w: usize) -> Self {
        if w >= 16 && h >= 4 && in_c * out_c <= 64 {
            ConvPath::Direct
        } else {
            ConvPath::Gemm
        }
    }
}

/// Saved forward state of [`conv2d`].
#[derive(Debug)]
pub struct Conv2dCache<T> {
    input: Tensor4<T>,
    weight: Tensor4<T>,
    out_dims: Dims,
    path: ConvPath,
}

/// Gradients produced by [`Conv2dCache::backward`].
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Stride-1 convolution with zero "same" padding, so the output keeps the
/// input's spatial size.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    p: ConvParams<'_, T>,
) -> Result<(Tensor4<T>, Conv2dCache<T>)> {
    let d = x.dims();
    conv2d_with(x, p, ConvPath::choose(d.c, p.out_channels(), d.h, d.w))
}

/// [`conv2d`] on an explicitly chosen evaluation path.
pub fn conv2d_with<T: Scalar>(
    x: &Tensor4<T>,
    p: ConvParams<'_, T>,
    path: ConvPath,
) -> Result<(Tensor4<T>, Conv2dCache<T>)> {
    let xd = x.dims();
    let wd = p.weight.dims();
    if xd.c != wd.c {
        return shape_err(format!(
            "conv2d: input {xd} has {} channels but kernel {wd} expects {}",
            xd.c, wd.c
        ));
    }
    let out_dims = Dims::new(xd.n, wd.n, xd.h, xd.w);
    let y = match path {
        ConvPath::Gemm => forward_gemm(x, p, out_dims),
        ConvPath::Direct => forward_direct(x, p, out_dims),
    };
    let cache = Conv2dCache {
        input: x.clone(),
        weight: p.weight.clone(),
        out_dims,
        path,
    };
    Ok((y, cache))
}

fn forward_gemm<T: Scalar>(x: &Tensor4<T>, p: ConvParams<'_, T>, out_dims: Dims) -> Tensor4<T> {
    let xd = x.dims();
    let wd = p.weight.dims();
    let k = p.kernel();
    let mut y = Tensor4::zeros(out_dims);
    let hw = xd.plane();
    let ckk = xd.c * k * k;
    let mut col = vec![T::zero(); ckk * hw];

    for n in 0..xd.n {
        im2col(x.sample(n), xd, k, &mut col);
        let out = y.sample_mut(n);
        for (o, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(p.bias[o]);
        }
        // SAFETY: buffers sized (o x ckk), (ckk x hw), (o x hw), all row-major.
        unsafe {
            T::gemm(
                wd.n,
                ckk,
                hw,
                T::one(),
                p.weight.data().as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                hw as isize,
                1,
                T::one(),
                out.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    y
}

/// Zero-padded copy of each channel plane of one sample.
///
/// Rows have stride `w + 2p`; a tail of `2p` zeros lets every shifted flat
/// window of length `h * (w + 2p)` stay in bounds.
struct Padded {
    stride: usize,
    len: usize,
}

impl Padded {
    fn new(h: usize, w: usize, k: usize) -> Self {
        let p = k / 2;
        let stride = w + 2 * p;
        Self {
            stride,
            len: (h + 2 * p) * stride + 2 * p,
        }
    }

    /// Length of the flat output window (includes `2p` junk columns per row).
    fn window(&self, h: usize) -> usize {
        h * self.stride
    }

    fn fill<T: Scalar>(&self, src: &[T], h: usize, w: usize, k: usize, dst: &mut [T]) {
        let p = k / 2;
        let mut done = 0;
        for i in 0..h {
            let at = (i + p) * self.stride + p;
            dst[done..at].fill(T::zero());
            dst[at..at + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            done = at + w;
        }
        dst[done..].fill(T::zero());
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    const L: usize = 16;
    let mut acc = [T::zero(); L];
    let (xc, yc) = (x.chunks_exact(L), y.chunks_exact(L));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..L {
            acc[l] = acc[l] + a[l] * b[l];
        }
    }
    let mut s = T::zero();
    for (a, b) in xr.iter().zip(yr) {
        s = s + *a * *b;
    }
    acc.iter().fold(s, |s, &v| s + v)
}

fn forward_direct<T: Scalar>(x: &Tensor4<T>, p: ConvParams<'_, T>, out_dims: Dims) -> Tensor4<T> {
    let xd = x.dims();
    let (h, w, k) = (xd.h, xd.w, p.kernel());
    let pad = Padded::new(h, w, k);
    let win = pad.window(h);
    let mut xp = vec![T::zero(); xd.c * pad.len];
    let mut acc = vec![T::zero(); win];
    let mut y = Tensor4::zeros(out_dims);
    let wt = p.weight.data();
    for n in 0..xd.n {
        let xs = x.sample(n);
        for c in 0..xd.c {
            pad.fill(
                &xs[c * h * w..(c + 1) * h * w],
                h,
                w,
                k,
                &mut xp[c * pad.len..(c + 1) * pad.len],
            );
        }
        let ys = y.sample_mut(n);
        for o in 0..out_dims.c {
            acc.fill(p.bias[o]);
            for c in 0..xd.c {
                let plane = &xp[c * pad.len..(c + 1) * pad.len];
                for u in 0..k {
                    for v in 0..k {
                        let off = u * pad.stride + v;
                        axpy(
                            wt[((o * xd.c + c) * k + u) * k + v],
                            &plane[off..off + win],
                            &mut acc,
                        );
                    }
                }
            }
            let out = &mut ys[o * h * w..(o + 1) * h * w];
            for i in 0..h {
                out[i * w..(i + 1) * w].copy_from_slice(&acc[i * pad.stride..i * pad.stride + w]);
            }
        }
    }
    y
}

impl<T: Scalar> Conv2dCache<T> {
    pub fn out_dims(&self) -> Dims {
        self.out_dims
    }

    pub fn path(&self) -> ConvPath {
        self.path
    }

    /// Adjoint of the forward map with respect to input, weight and bias.
    pub fn backward(self, g_out: &Tensor4<T>) -> Result<Conv2dGrads<T>> {
        if g_out.dims() != self.out_dims {
            return contract_err(format!(
                "conv2d backward: gradient {} does not match cached output {}",
                g_out.dims(),
                self.out_dims
            ));
        }
        Ok(match self.path {
            ConvPath::Gemm => self.backward_gemm(g_out),
            ConvPath::Direct => self.backward_direct(g_out),
        })
    }

    fn backward_direct(self, g_out: &Tensor4<T>) -> Conv2dGrads<T> {
        let xd = self.input.dims();
        let wd = self.weight.dims();
        let (h, w, k) = (xd.h, xd.w, wd.h);
        let p = k / 2;
        let pad = Padded::new(h, w, k);
        let win = pad.window(h);
        let mut g_x = Tensor4::zeros(xd);
        let mut g_w = Tensor4::zeros(wd);
        let mut g_b = vec![T::zero(); wd.n];
        let mut xp = vec![T::zero(); xd.c * pad.len];
        let mut gxp = vec![T::zero(); xd.c * pad.len];
        // output gradient in padded-stride layout; junk columns stay zero
        let mut gyp = vec![T::zero(); wd.n * win];
        let wt = self.weight.data();
        for n in 0..xd.n {
            let xs = self.input.sample(n);
            for c in 0..xd.c {
                pad.fill(
                    &xs[c * h * w..(c + 1) * h * w],
                    h,
                    w,
                    k,
                    &mut xp[c * pad.len..(c + 1) * pad.len],
                );
            }
            let gy = g_out.sample(n);
            for o in 0..wd.n {
                let src = &gy[o * h * w..(o + 1) * h * w];
                g_b[o] = src.iter().fold(g_b[o], |acc, &v| acc + v);
                let dst = &mut gyp[o * win..(o + 1) * win];
                for i in 0..h {
                    dst[i * pad.stride..i * pad.stride + w]
                        .copy_from_slice(&src[i * w..(i + 1) * w]);
                }
            }
            gxp.fill(T::zero());
            let gw = g_w.data_mut();
            for c in 0..xd.c {
                let plane = &xp[c * pad.len..(c + 1) * pad.len];
                let gplane = &mut gxp[c * pad.len..(c + 1) * pad.len];
                for o in 0..wd.n {
                    let g = &gyp[o * win..(o + 1) * win];
                    for u in 0..k {
                        for v in 0..k {
                            let off = u * pad.stride + v;
                            let wi = ((o * xd.c + c) * k + u) * k + v;
                            gw[wi] = gw[wi] + dot(g, &plane[off..off + win]);
                            axpy(wt[wi], g, &mut gplane[off..off + win]);
                        }
                    }
                }
            }
            let gxs = g_x.sample_mut(n);
            for c in 0..xd.c {
                let gplane = &gxp[c * pad.len..(c + 1) * pad.len];
                for i in 0..h {
                    let at = (i + p) * pad.stride + p;
                    gxs[(c * h + i) * w..(c * h + i + 1) * w].copy_from_slice(&gplane[at..at + w]);
                }
            }
        }
        Conv2dGrads {
            input: g_x,
            weight: g_w,
            bias: g_b,
        }
    }

    fn backward_gemm(self, g_out: &Tensor4<T>) -> Conv2dGrads<T> {
        let xd = self.input.dims();
        let wd = self.weight.dims();
        let k = wd.h;
        let hw = xd.plane();
        let ckk = xd.c * k * k;

        let mut g_x = Tensor4::zeros(xd);
        let mut g_w = Tensor4::zeros(wd);
        let mut g_b = vec![T::zero(); wd.n];
        let mut col = vec![T::zero(); ckk * hw];
        let mut g_col = vec![T::zero(); ckk * hw];

        for n in 0..xd.n {
            let gy = g_out.sample(n);
            for (o, row) in gy.chunks_exact(hw).enumerate() {
                g_b[o] = row.iter().fold(g_b[o], |acc, &v| acc + v);
            }
            im2col(self.input.sample(n), xd, k, &mut col);
            // SAFETY: g_w (o x ckk) += g_y (o x hw) * col^T (hw x ckk).
            unsafe {
                T::gemm(
                    wd.n,
                    hw,
                    ckk,
                    T::one(),
                    gy.as_ptr(),
                    hw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    hw as isize,
                    T::one(),
                    g_w.data_mut().as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }
            // SAFETY: g_col (ckk x hw) = W^T (ckk x o) * g_y (o x hw).
            unsafe {
                T::gemm(
                    ckk,
                    wd.n,
                    hw,
                    T::one(),
                    self.weight.data().as_ptr(),
                    1,
                    ckk as isize,
                    gy.as_ptr(),
                    hw as isize,
                    1,
                    T::zero(),
                    g_col.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            col2im_add(&g_col, xd, k, g_x.sample_mut(n));
        }

        Conv2dGrads {
            input: g_x,
            weight: g_w,
            bias: g_b,
        }
    }
}

/// Unfold one `(c, h, w)` sample into a `(c*k*k, h*w)` matrix of zero-padded
/// patches.
fn im2col<T: Scalar>(x: &[T], d: Dims, k: usize, col: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut r = 0;
    for c in 0..d.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let dst = &mut col[r * hw..(r + 1) * hw];
                let dv = v as isize - pad;
                // valid output columns j with 0 <= j + dv < w
                let j0 = (-dv).max(0) as usize;
                let j1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
                for i in 0..h {
                    let ii = i as isize + u as isize - pad;
                    let out = &mut dst[i * w..(i + 1) * w];
                    if ii < 0 || ii >= h as isize || j0 >= j1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    out[..j0].fill(T::zero());
                    out[j1..].fill(T::zero());
                    let s0 = (j0 as isize + dv) as usize;
                    out[j0..j1].copy_from_slice(&src[s0..s0 + (j1 - j0)]);
                }
                r += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the sample.
fn col2im_add<T: Scalar>(col: &[T], d: Dims, k: usize, g_x: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut r = 0;
    for c in 0..d.c {
        let plane = &mut g_x[c * hw..(c + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let src = &col[r * hw..(r + 1) * hw];
                let dv = v as isize - pad;
                let j0 = (-dv).max(0) as usize;
                let j1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
                for i in 0..h {
                    let ii = i as isize + u as isize - pad;
                    if ii < 0 || ii >= h as isize || j0 >= j1 {
                        continue;
                    }
                    let row = &src[i * w..(i + 1) * w];
                    let s0 = (j0 as isize + dv) as usize;
                    let dst = &mut plane[ii as usize * w + s0..ii as usize * w + s0 + (j1 - j0)];
                    for (a, &b) in dst.iter_mut().zip(&row[j0..j1]) {
                        *a = *a + b;
                    }
                }
                r += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta_kernel() -> Tensor4<f64> {
        let mut w = Tensor4::zeros(Dims::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        w
    }

    /// Direct six-loop evaluation of the convolution sum.
    fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]) -> Tensor4<f64> {
        let xd = x.dims();
        let wd = w.dims();
        let p = (wd.h / 2) as isize;
        let mut y = Tensor4::zeros(Dims::new(xd.n, wd.n, xd.h, xd.w));
        for n in 0..xd.n {
            for o in 0..wd.n {
                for i in 0..xd.h {
                    for j in 0..xd.w {
                        let mut s = b[o];
                        for c in 0..xd.c {
                            for u in 0..wd.h {
                                for v in 0..wd.w {
                                    let ii = i as isize + u as isize - p;
                                    let jj = j as isize + v as isize - p;
                                    if ii >= 0
                                        && jj >= 0
                                        && (ii as usize) < xd.h
                                        && (jj as usize) < xd.w
                                    {
                                        s += x.get(n, c, ii as usize, jj as usize)
                                            * w.get(o, c, u, v);
                                    }
                                }
                            }
                        }
                        y.set(n, o, i, j, s);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::random_uniform(Dims::new(1, 1, 3, 3), -1.0, 1.0, &mut rng);
        let w = delta_kernel();
        let (y, _) = conv2d(&x, ConvParams::new(&w, &[0.0]).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_hand_values() {
        let x = Tensor4::<f64>::full(Dims::new(1, 1, 3, 3), 1.0);
        let w = Tensor4::full(Dims::new(1, 1, 3, 3), 1.0);
        let (y, _) = conv2d(&x, ConvParams::new(&w, &[0.0]).unwrap()).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 9.0);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(0, 0, i, j), 4.0);
        }
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(y.get(0, 0, i, j), 6.0);
        }
    }

    #[test]
    fn matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (dims, k) in [
            (Dims::new(2, 3, 5, 7), 3),
            (Dims::new(1, 2, 9, 4), 5),
            (Dims::new(1, 1, 1, 1), 3),
        ] {
            let x = Tensor4::<f64>::random_uniform(dims, -1.0, 1.0, &mut rng);
            let w = Tensor4::<f64>::random_uniform(Dims::new(4, dims.c, k, k), -1.0, 1.0, &mut rng);
            let b = [0.1, -0.2, 0.3, 0.0];
            for path in [ConvPath::Gemm, ConvPath::Direct] {
                let (y, _) = conv2d_with(&x, ConvParams::new(&w, &b).unwrap(), path).unwrap();
                assert!(
                    y.max_abs_diff(&naive_conv(&x, &w, &b)).unwrap() < 1e-12,
                    "{path:?} {dims}"
                );
            }
        }
    }

    #[test]
    fn paths_agree_on_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::<f64>::random_uniform(Dims::new(2, 3, 6, 35), -1.0, 1.0, &mut rng);
        let w = Tensor4::<f64>::random_uniform(Dims::new(5, 3, 3, 3), -1.0, 1.0, &mut rng);
        let g = Tensor4::<f64>::random_uniform(Dims::new(2, 5, 6, 35), -1.0, 1.0, &mut rng);
        let b = [0.0; 5];
        let run = |path| {
            let (_, c) = conv2d_with(&x, ConvParams::new(&w, &b).unwrap(), path).unwrap();
            assert_eq!(c.path(), path);
            c.backward(&g).unwrap()
        };
        let (a, d) = (run(ConvPath::Gemm), run(ConvPath::Direct));
        assert!(a.input.max_abs_diff(&d.input).unwrap() < 1e-12);
        assert!(a.weight.max_abs_diff(&d.weight).unwrap() < 1e-12);
        for (p, q) in a.bias.iter().zip(&d.bias) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_names_both_dims() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 2, 4, 4));
        let w = Tensor4::<f32>::zeros(Dims::new(1, 3, 3, 3));
        let err = conv2d(&x, ConvParams::new(&w, &[0.0]).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x2x4x4") && msg.contains("1x3x3x3"), "{msg}");
    }

    #[test]
    fn zero_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::<f64>::random_uniform(Dims::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let w = Tensor4::<f64>::random_uniform(Dims::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
        let (y, cache) = conv2d(&x, ConvParams::new(&w, &[0.0; 3]).unwrap()).unwrap();
        let g = cache.backward(&Tensor4::zeros(y.dims())).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_backward_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::<f64>::random_uniform(Dims::new(2, 1, 4, 5), -1.0, 1.0, &mut rng);
        let g = Tensor4::<f64>::random_uniform(Dims::new(2, 1, 4, 5), -1.0, 1.0, &mut rng);
        let w = delta_kernel();
        let (_, cache) = conv2d(&x, ConvParams::new(&w, &[0.0]).unwrap()).unwrap();
        let grads = cache.backward(&g).unwrap();
        assert_eq!(grads.input, g);
        let expected_bias: f64 = g.data().iter().sum();
        assert!((grads.bias[0] - expected_bias).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 1, 4, 4));
        let w = Tensor4::<f32>::zeros(Dims::new(2, 1, 3, 3));
        let (_, cache) = conv2d(&x, ConvParams::new(&w, &[0.0; 2]).unwrap()).unwrap();
        let err = cache
            .backward(&Tensor4::zeros(Dims::new(1, 1, 4, 4)))
            .unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }
}
