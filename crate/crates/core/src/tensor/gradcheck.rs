//! Central finite-difference gradient checker and adjoint tests (f64 only).
//!
//! The loss used for checking is the projection `L = <f(args), r>` with a
//! random direction `r`. Its numeric gradient is formed as
//! `<f(x + h e_i) - f(x - h e_i), r> / 2h`, taking the output difference
//! elementwise before projecting, which keeps rounding noise far below the
//! tolerances even for exactly linear operations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    batchnorm, concat_channels, conv2d, conv2d_with, maxpool2, mse, relu, sigmoid,
    upsample_nearest2, BnMode, ConvParams, ConvPath, Dims, RunningStats, Tensor4,
};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Acceptance bound for smooth and piecewise-linear ops.
pub const GRAD_TOL: f64 = 1e-4;
/// Acceptance bound for pure data-movement ops.
pub const LINEAR_TOL: f64 = 1e-10;
/// Denominator floor for the elementwise relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct ArgReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: String,
    pub dims: String,
    pub tolerance: f64,
    pub args: Vec<ArgReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.args.iter().map(|a| a.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Which coordinates of each argument get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// At most this many randomly chosen coordinates per argument.
    Sample(usize),
}

/// Checks an analytic backward against central differences.
///
/// `forward` maps the argument list to an output; `backward` returns one
/// gradient per argument for the given output gradient.
pub fn check<F, B>(
    op: &str,
    names: &[&str],
    args: &[Tensor4<f64>],
    forward: F,
    backward: B,
    probe: Probe,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor4<f64>]) -> Result<Tensor4<f64>>,
    B: Fn(&[Tensor4<f64>], &Tensor4<f64>) -> Result<Vec<Tensor4<f64>>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = forward(args)?;
    let r = Tensor4::<f64>::random_uniform(y.dims(), -1.0, 1.0, &mut rng);
    let analytic = backward(args, &r)?;

    let mut reports = Vec::with_capacity(args.len());
    let mut work = args.to_vec();
    for (k, arg) in args.iter().enumerate() {
        let mut coords: Vec<usize> = (0..arg.len()).collect();
        if let Probe::Sample(m) = probe {
            coords.shuffle(&mut rng);
            coords.truncate(m);
        }
        let mut max_err = 0.0f64;
        for &i in &coords {
            let orig = arg.data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let yp = forward(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let ym = forward(&work)?;
            work[k].data_mut()[i] = orig;
            let num: f64 = yp
                .data()
                .iter()
                .zip(ym.data())
                .zip(r.data())
                .map(|((&p, &m), &w)| (p - m) * w)
                .sum::<f64>()
                / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(analytic[k].data()[i], num));
        }
        reports.push(ArgReport {
            name: names.get(k).copied().unwrap_or("arg").to_string(),
            max_rel_err: max_err,
            checked: coords.len(),
        });
    }
    Ok(GradReport {
        op: op.to_string(),
        dims: args
            .iter()
            .map(|a| a.dims().to_string())
            .collect::<Vec<_>>()
            .join(", "),
        tolerance,
        args: reports,
    })
}

/// Result of `<L x, y> = <x, L^T y>` for a linear map `L`.
#[derive(Clone, Debug)]
pub struct AdjointReport {
    pub op: String,
    pub lhs: f64,
    pub rhs: f64,
}

impl AdjointReport {
    pub fn rel_err(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.lhs.abs().max(self.rhs.abs()).max(f64::MIN_POSITIVE)
    }

    pub fn passed(&self) -> bool {
        self.rel_err() < LINEAR_TOL
    }
}

fn adjoint<F, A>(
    op: &str,
    x: &Tensor4<f64>,
    forward: F,
    transpose: A,
    rng: &mut ChaCha8Rng,
) -> Result<AdjointReport>
where
    F: Fn(&Tensor4<f64>) -> Result<Tensor4<f64>>,
    A: Fn(&Tensor4<f64>, &Tensor4<f64>) -> Result<Tensor4<f64>>,
{
    let lx = forward(x)?;
    let y = Tensor4::<f64>::random_uniform(lx.dims(), -1.0, 1.0, rng);
    let lty = transpose(x, &y)?;
    Ok(AdjointReport {
        op: op.to_string(),
        lhs: lx.dot(&y)?,
        rhs: x.dot(&lty)?,
    })
}

fn rand_dims(rng: &mut ChaCha8Rng, even: bool) -> Dims {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let (mut h, mut w) = (rng.random_range(3..=7), rng.random_range(3..=7));
    if even {
        h += h % 2;
        w += w % 2;
    }
    Dims::new(n, c, h, w)
}

/// Values with pairwise gaps of at least 0.01 so a finite-difference step
/// never reorders them (no maxpool ties).
fn distinct_values(d: Dims, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let mut v: Vec<f64> = (0..d.count()).map(|i| i as f64 * 0.01).collect();
    v.shuffle(rng);
    for x in &mut v {
        *x += rng.random_range(0.0..0.001);
    }
    Tensor4::from_vec(d, v).expect("dims")
}

/// Values bounded away from zero by 0.1 (no relu kinks).
fn away_from_zero(d: Dims, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let v = (0..d.count())
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor4::from_vec(d, v).expect("dims")
}

fn conv_case(
    op: &str,
    x: Tensor4<f64>,
    out_c: usize,
    path: ConvPath,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<GradReport> {
    let d = x.dims();
    let w = Tensor4::random_uniform(Dims::new(out_c, d.c, 3, 3), -1.0, 1.0, rng);
    let b = Tensor4::random_uniform(Dims::new(1, 1, 1, out_c), -1.0, 1.0, rng);
    check(
        op,
        &["x", "weight", "bias"],
        &[x, w, b],
        |a| Ok(conv2d_with(&a[0], ConvParams::new(&a[1], a[2].data())?, path)?.0),
        |a, g| {
            let (_, cache) = conv2d_with(&a[0], ConvParams::new(&a[1], a[2].data())?, path)?;
            let gr = cache.backward(g)?;
            let gb = Tensor4::from_vec(a[2].dims(), gr.bias)?;
            Ok(vec![gr.input, gr.weight, gb])
        },
        Probe::All,
        GRAD_TOL,
        seed,
    )
}

/// Runs every differentiable primitive through [`check`] on dims drawn
/// from `seed`, plus the fixed 2x3x8x8 convolution case.
pub fn suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = Tensor4::random_uniform(Dims::new(2, 3, 8, 8), -1.0, 1.0, &mut rng);
    out.push(conv_case(
        "conv2d",
        x.clone(),
        4,
        ConvPath::Gemm,
        &mut rng,
        seed ^ 1,
    )?);
    out.push(conv_case(
        "conv2d[direct]",
        x,
        4,
        ConvPath::Direct,
        &mut rng,
        seed ^ 3,
    )?);

    let d = rand_dims(&mut rng, false);
    let x = Tensor4::random_uniform(d, -1.0, 1.0, &mut rng);
    let oc = rng.random_range(1..=4);
    out.push(conv_case(
        "conv2d[random dims]",
        x.clone(),
        oc,
        ConvPath::Gemm,
        &mut rng,
        seed ^ 2,
    )?);
    out.push(conv_case(
        "conv2d[random dims, direct]",
        x,
        oc,
        ConvPath::Direct,
        &mut rng,
        seed ^ 4,
    )?);

    let d = rand_dims(&mut rng, true);
    out.push(check(
        "maxpool2",
        &["x"],
        &[distinct_values(d, &mut rng)],
        |a| Ok(maxpool2(&a[0])?.0),
        |a, g| Ok(vec![maxpool2(&a[0])?.1.backward(g)?]),
        Probe::All,
        GRAD_TOL,
        seed ^ 3,
    )?);

    let d = rand_dims(&mut rng, false);
    out.push(check(
        "upsample_nearest2",
        &["x"],
        &[Tensor4::random_uniform(d, -1.0, 1.0, &mut rng)],
        |a| Ok(upsample_nearest2(&a[0]).0),
        |a, g| Ok(vec![upsample_nearest2(&a[0]).1.backward(g)?]),
        Probe::All,
        LINEAR_TOL,
        seed ^ 4,
    )?);

    let d = rand_dims(&mut rng, false);
    let d2 = Dims::new(d.n, rng.random_range(1..=3), d.h, d.w);
    out.push(check(
        "concat_channels",
        &["a", "b"],
        &[
            Tensor4::random_uniform(d, -1.0, 1.0, &mut rng),
            Tensor4::random_uniform(d2, -1.0, 1.0, &mut rng),
        ],
        |a| Ok(concat_channels(&a[0], &a[1])?.0),
        |a, g| {
            let (ga, gb) = concat_channels(&a[0], &a[1])?.1.backward(g)?;
            Ok(vec![ga, gb])
        },
        Probe::All,
        LINEAR_TOL,
        seed ^ 5,
    )?);

    let d = rand_dims(&mut rng, false);
    let per = |rng: &mut ChaCha8Rng, lo, hi| {
        Tensor4::random_uniform(Dims::new(1, 1, 1, d.c), lo, hi, rng)
    };
    let (gamma, beta) = (per(&mut rng, 0.5, 1.5), per(&mut rng, -0.5, 0.5));
    out.push(check(
        "batchnorm[train]",
        &["x", "gamma", "beta"],
        &[
            Tensor4::random_uniform(d, -2.0, 2.0, &mut rng),
            gamma.clone(),
            beta.clone(),
        ],
        |a| Ok(batchnorm(&a[0], a[1].data(), a[2].data(), BnMode::Train)?.0),
        |a, g| {
            let gr = batchnorm(&a[0], a[1].data(), a[2].data(), BnMode::Train)?
                .1
                .backward(g)?;
            Ok(vec![
                gr.input,
                Tensor4::from_vec(a[1].dims(), gr.gamma)?,
                Tensor4::from_vec(a[2].dims(), gr.beta)?,
            ])
        },
        Probe::All,
        GRAD_TOL,
        seed ^ 6,
    )?);

    let stats = RunningStats {
        mean: per(&mut rng, -0.5, 0.5).into_vec(),
        var: per(&mut rng, 0.5, 2.0).into_vec(),
        updates: 1,
    };
    out.push(check(
        "batchnorm[infer]",
        &["x", "gamma", "beta"],
        &[Tensor4::random_uniform(d, -2.0, 2.0, &mut rng), gamma, beta],
        |a| Ok(batchnorm(&a[0], a[1].data(), a[2].data(), BnMode::Infer(&stats))?.0),
        |a, g| {
            let gr = batchnorm(&a[0], a[1].data(), a[2].data(), BnMode::Infer(&stats))?
                .1
                .backward(g)?;
            Ok(vec![
                gr.input,
                Tensor4::from_vec(a[1].dims(), gr.gamma)?,
                Tensor4::from_vec(a[2].dims(), gr.beta)?,
            ])
        },
        Probe::All,
        GRAD_TOL,
        seed ^ 7,
    )?);

    let d = rand_dims(&mut rng, false);
    out.push(check(
        "relu",
        &["x"],
        &[away_from_zero(d, &mut rng)],
        |a| Ok(relu(&a[0]).0),
        |a, g| Ok(vec![relu(&a[0]).1.backward(g)?]),
        Probe::All,
        GRAD_TOL,
        seed ^ 8,
    )?);

    let d = rand_dims(&mut rng, false);
    out.push(check(
        "sigmoid",
        &["x"],
        &[Tensor4::random_uniform(d, -4.0, 4.0, &mut rng)],
        |a| Ok(sigmoid(&a[0]).0),
        |a, g| Ok(vec![sigmoid(&a[0]).1.backward(g)?]),
        Probe::All,
        GRAD_TOL,
        seed ^ 9,
    )?);

    let d = rand_dims(&mut rng, false);
    out.push(check(
        "mse",
        &["pred", "target"],
        &[
            Tensor4::random_uniform(d, 0.0, 1.0, &mut rng),
            Tensor4::random_uniform(d, 0.0, 1.0, &mut rng),
        ],
        |a| {
            let (l, _) = mse(&a[0], &a[1])?;
            Tensor4::from_vec(Dims::new(1, 1, 1, 1), vec![l])
        },
        |a, g| {
            let (_, cache) = mse(&a[0], &a[1])?;
            let gp = cache.backward(g.data()[0])?;
            // the target is held fixed; its gradient is the negation
            let mut gt = gp.clone();
            gt.scale(-1.0);
            Ok(vec![gp, gt])
        },
        Probe::All,
        GRAD_TOL,
        seed ^ 10,
    )?);

    Ok(out)
}

/// Adjoint identity for every linear primitive.
pub fn adjoint_suite(seed: u64) -> Result<Vec<AdjointReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let d = rand_dims(&mut rng, false);
    let oc = rng.random_range(1..=4);
    let w = Tensor4::random_uniform(Dims::new(oc, d.c, 3, 3), -1.0, 1.0, &mut rng);
    let zero_bias = vec![0.0; oc];
    let x = Tensor4::random_uniform(d, -1.0, 1.0, &mut rng);
    out.push(adjoint(
        "conv2d[input]",
        &x,
        |x| Ok(conv2d(x, ConvParams::new(&w, &zero_bias)?)?.0),
        |x, y| {
            Ok(conv2d(x, ConvParams::new(&w, &zero_bias)?)?
                .1
                .backward(y)?
                .input)
        },
        &mut rng,
    )?);
    out.push(adjoint(
        "conv2d[weight]",
        &w,
        |w| Ok(conv2d(&x, ConvParams::new(w, &zero_bias)?)?.0),
        |w, y| {
            Ok(conv2d(&x, ConvParams::new(w, &zero_bias)?)?
                .1
                .backward(y)?
                .weight)
        },
        &mut rng,
    )?);

    let d = rand_dims(&mut rng, false);
    let x = Tensor4::random_uniform(d, -1.0, 1.0, &mut rng);
    out.push(adjoint(
        "upsample_nearest2",
        &x,
        |x| Ok(upsample_nearest2(x).0),
        |x, y| upsample_nearest2(x).1.backward(y),
        &mut rng,
    )?);

    let d = rand_dims(&mut rng, false);
    let b = Tensor4::<f64>::random_uniform(Dims::new(d.n, 2, d.h, d.w), -1.0, 1.0, &mut rng);
    let x = Tensor4::random_uniform(d, -1.0, 1.0, &mut rng);
    // linear in (a, b) jointly; checked in a with b's contribution removed
    let zero_b = Tensor4::zeros(b.dims());
    out.push(adjoint(
        "concat_channels",
        &x,
        |a| Ok(concat_channels(a, &zero_b)?.0),
        |a, y| Ok(concat_channels(a, &zero_b)?.1.backward(y)?.0),
        &mut rng,
    )?);

    // maxpool is linear once its routing is fixed
    let d = rand_dims(&mut rng, true);
    let x = distinct_values(d, &mut rng);
    out.push(adjoint(
        "maxpool2[fixed routing]",
        &x,
        |x| Ok(maxpool2(x)?.0),
        |x, y| maxpool2(x)?.1.backward(y),
        &mut rng,
    )?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        for seed in [0u64, 1, 2] {
            for r in suite(seed).unwrap() {
                assert!(r.passed(), "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn adjoints_hold() {
        for seed in [0u64, 5, 9] {
            for r in adjoint_suite(seed).unwrap() {
                assert!(r.passed(), "seed {seed}: {r:?} err {}", r.rel_err());
            }
        }
    }

    #[test]
    fn checker_flags_a_wrong_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::<f64>::random_uniform(Dims::new(1, 1, 3, 3), -1.0, 1.0, &mut rng);
        let r = check(
            "square",
            &["x"],
            &[x],
            |a| Ok(a[0].map(|v| v * v)),
            // wrong: missing the factor 2
            |a, g| {
                let mut out = a[0].clone();
                for (o, &gv) in out.data_mut().iter_mut().zip(g.data()) {
                    *o *= gv;
                }
                Ok(vec![out])
            },
            Probe::All,
            GRAD_TOL,
            1,
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_err() - 0.5).abs() < 1e-6);
    }
}
