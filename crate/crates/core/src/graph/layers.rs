use rand::Rng;

use super::registry::{Group, ParamId, ParamRegistry};
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{
    batchnorm, concat_channels, conv2d, maxpool2, relu, sigmoid, upsample_nearest2, BatchNormCache,
    BnMode, ConcatCache, Conv2dCache, ConvParams, Dims, MaxPoolCache, ReluCache, RunningStats,
    Scalar, SigmoidCache, Tensor4, UpsampleCache,
};

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Uniform `(-b, b)` with `b = sqrt(6 / fan_in)`.
fn init_kernel<T: Scalar, R: Rng>(dims: Dims, rng: &mut R) -> Tensor4<T> {
    let fan_in = (dims.c * dims.h * dims.w) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..dims.count())
        .map(|_| loop {
            let v = T::from_f64_lossy(rng.random_range(-bound..bound));
            // rounding to T must not land on the bound itself
            if v.as_f64().abs() < bound {
                break v;
            }
        })
        .collect();
    Tensor4::from_vec(dims, data).expect("kernel dims")
}

fn declare_conv<T: Scalar, R: Rng>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    group: Group,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = reg.add(
        format!("{prefix}/weight"),
        init_kernel(Dims::new(out_c, in_c, k, k), rng),
        true,
        group,
        4,
    )?;
    let b = reg.add_vector(
        format!("{prefix}/bias"),
        vec![T::zero(); out_c],
        true,
        group,
    )?;
    Ok((w, b))
}

/// Convolution followed by batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    updates: ParamId,
}

#[derive(Debug)]
pub struct ConvLayerCache<T> {
    conv: Conv2dCache<T>,
    bn: BatchNormCache<T>,
    relu: ReluCache,
}

impl ConvLayer {
    fn declare<T: Scalar, R: Rng>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        let (weight, bias) = declare_conv(reg, prefix, in_c, out_c, k, group, rng)?;
        let bn = format!("{prefix}/bn");
        Ok(Self {
            weight,
            bias,
            gamma: reg.add_vector(format!("{bn}/gamma"), vec![T::one(); out_c], true, group)?,
            beta: reg.add_vector(format!("{bn}/beta"), vec![T::zero(); out_c], true, group)?,
            running_mean: reg.add_vector(
                format!("{bn}/running_mean"),
                vec![T::zero(); out_c],
                false,
                group,
            )?,
            running_var: reg.add_vector(
                format!("{bn}/running_var"),
                vec![T::one(); out_c],
                false,
                group,
            )?,
            updates: reg.add_vector(format!("{bn}/updates"), vec![T::zero()], false, group)?,
        })
    }

    fn running_stats<T: Scalar>(&self, reg: &ParamRegistry<T>) -> RunningStats<T> {
        RunningStats {
            mean: reg.value(self.running_mean).data().to_vec(),
            var: reg.value(self.running_var).data().to_vec(),
            updates: reg.value(self.updates).data()[0].as_f64() as u64,
        }
    }

    fn forward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        x: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, ConvLayerCache<T>)> {
        let p = ConvParams::new(reg.value(self.weight), reg.value(self.bias).data())?;
        let (z, conv) = conv2d(x, p)?;
        let stats;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Infer => {
                stats = self.running_stats(reg);
                BnMode::Infer(&stats)
            }
        };
        let (n, bn) = batchnorm(
            &z,
            reg.value(self.gamma).data(),
            reg.value(self.beta).data(),
            bn_mode,
        )?;
        let (y, relu) = relu(&n);
        Ok((y, ConvLayerCache { conv, bn, relu }))
    }

    fn backward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        cache: ConvLayerCache<T>,
        g: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let g = cache.relu.backward(g)?;
        let bn = cache.bn.backward(&g)?;
        reg.accumulate(self.gamma, &bn.gamma)?;
        reg.accumulate(self.beta, &bn.beta)?;
        let conv = cache.conv.backward(&bn.input)?;
        reg.accumulate(self.weight, conv.weight.data())?;
        reg.accumulate(self.bias, &conv.bias)?;
        Ok(conv.input)
    }

    fn absorb_stats<T: Scalar>(&self, reg: &mut ParamRegistry<T>, cache: &ConvLayerCache<T>) {
        let mut stats = self.running_stats(reg);
        stats.absorb(&cache.bn);
        reg.value_mut(self.running_mean)
            .data_mut()
            .copy_from_slice(&stats.mean);
        reg.value_mut(self.running_var)
            .data_mut()
            .copy_from_slice(&stats.var);
        reg.value_mut(self.updates).data_mut()[0] = T::from_f64_lossy(stats.updates as f64);
    }
}

/// Consecutive [`ConvLayer`]s sharing one output width.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    layers: Vec<ConvLayer>,
}

#[derive(Debug)]
pub struct ConvBlockCache<T>(Vec<ConvLayerCache<T>>);

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn declare<T: Scalar, R: Rng>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        convs: usize,
        k: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..convs)
            .map(|i| {
                let c_in = if i == 0 { in_c } else { out_c };
                ConvLayer::declare(
                    reg,
                    &format!("{prefix}/conv{i}"),
                    c_in,
                    out_c,
                    k,
                    group,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        x: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, ConvBlockCache<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h: Option<Tensor4<T>> = None;
        for layer in &self.layers {
            let (y, c) = layer.forward(reg, h.as_ref().unwrap_or(x), mode)?;
            caches.push(c);
            h = Some(y);
        }
        Ok((h.expect("non-empty block"), ConvBlockCache(caches)))
    }

    fn backward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        cache: ConvBlockCache<T>,
        g: Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let mut g = g;
        for (layer, c) in self.layers.iter().zip(cache.0).rev() {
            g = layer.backward(reg, c, &g)?;
        }
        Ok(g)
    }

    fn absorb_stats<T: Scalar>(&self, reg: &mut ParamRegistry<T>, cache: &ConvBlockCache<T>) {
        for (layer, c) in self.layers.iter().zip(&cache.0) {
            layer.absorb_stats(reg, c);
        }
    }
}

/// Shared encoder: blocks with max pooling, then a bottleneck block.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    in_channels: usize,
    multiple: usize,
}

#[derive(Debug)]
pub struct EncoderCache<T> {
    blocks: Vec<(ConvBlockCache<T>, MaxPoolCache)>,
    bottleneck: ConvBlockCache<T>,
    skip_dims: Vec<Dims>,
    bottleneck_dims: Dims,
}

impl<T> EncoderCache<T> {
    pub fn skip_dims(&self) -> &[Dims] {
        &self.skip_dims
    }

    pub fn bottleneck_dims(&self) -> Dims {
        self.bottleneck_dims
    }
}

/// Output of [`Encoder::forward`].
#[derive(Debug)]
pub struct Encoded<T> {
    pub bottleneck: Tensor4<T>,
    /// Pre-pool output of each encoder block, full resolution first.
    pub skips: Vec<Tensor4<T>>,
    pub cache: EncoderCache<T>,
}

impl Encoder {
    pub(crate) fn declare<T: Scalar, R: Rng>(
        reg: &mut ParamRegistry<T>,
        spec: &super::ModelSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Group::Encoder;
        let (convs, k) = (spec.convs_per_block, spec.kernel);
        let mut in_c = spec.in_channels;
        let mut blocks = Vec::new();
        for (i, &c) in spec.encoder_channels.iter().enumerate() {
            blocks.push(ConvBlock::declare(
                reg,
                &format!("encoder/block{i}"),
                in_c,
                c,
                convs,
                k,
                g,
                rng,
            )?);
            in_c = c;
        }
        let bottleneck = ConvBlock::declare(
            reg,
            "encoder/bottleneck",
            in_c,
            spec.bottleneck_channels,
            convs,
            k,
            g,
            rng,
        )?;
        Ok(Self {
            blocks,
            bottleneck,
            in_channels: spec.in_channels,
            multiple: spec.size_multiple(),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        x: &Tensor4<T>,
        mode: Mode,
    ) -> Result<Encoded<T>> {
        let d = x.dims();
        if d.c != self.in_channels {
            return shape_err(format!(
                "encoder expects {} input channel(s), got {d}",
                self.in_channels
            ));
        }
        if !d.h.is_multiple_of(self.multiple) || !d.w.is_multiple_of(self.multiple) {
            return shape_err(format!(
                "encoder input {d}: height and width must be multiples of {}; pad the slice first",
                self.multiple
            ));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let (s, bc) = block.forward(reg, &h, mode)?;
            let (p, pc) = maxpool2(&s)?;
            caches.push((bc, pc));
            skips.push(s);
            h = p;
        }
        let (bottleneck, bc) = self.bottleneck.forward(reg, &h, mode)?;
        let cache = EncoderCache {
            blocks: caches,
            bottleneck: bc,
            skip_dims: skips.iter().map(|s| s.dims()).collect(),
            bottleneck_dims: bottleneck.dims(),
        };
        Ok(Encoded {
            bottleneck,
            skips,
            cache,
        })
    }

    /// Backpropagates bottleneck and skip gradients to the input, adding
    /// parameter gradients into `reg`.
    pub fn backward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        cache: EncoderCache<T>,
        g_bottleneck: Tensor4<T>,
        g_skips: Vec<Tensor4<T>>,
    ) -> Result<Tensor4<T>> {
        if g_bottleneck.dims() != cache.bottleneck_dims {
            return contract_err(format!(
                "encoder backward: bottleneck gradient {} for output {}",
                g_bottleneck.dims(),
                cache.bottleneck_dims
            ));
        }
        if g_skips.len() != self.blocks.len() {
            return contract_err(format!(
                "encoder backward: {} skip gradients for {} blocks",
                g_skips.len(),
                self.blocks.len()
            ));
        }
        let mut g = self
            .bottleneck
            .backward(reg, cache.bottleneck, g_bottleneck)?;
        for ((block, (bc, pc)), gs) in self.blocks.iter().zip(cache.blocks).zip(g_skips).rev() {
            let mut gb = pc.backward(&g)?;
            gb.add_assign(&gs)?;
            g = block.backward(reg, bc, gb)?;
        }
        Ok(g)
    }

    pub fn absorb_stats<T: Scalar>(&self, reg: &mut ParamRegistry<T>, cache: &EncoderCache<T>) {
        for (block, (bc, _)) in self.blocks.iter().zip(&cache.blocks) {
            block.absorb_stats(reg, bc);
        }
        self.bottleneck.absorb_stats(reg, &cache.bottleneck);
    }
}

/// One reconstruction branch: upsample, merge, conv block per stage, then a
/// sigmoid-activated 3x3 head.
#[derive(Clone, Debug)]
pub struct Decoder {
    index: usize,
    blocks: Vec<ConvBlock>,
    head_weight: ParamId,
    head_bias: ParamId,
    merge: bool,
}

#[derive(Debug)]
struct StageCache<T> {
    up: UpsampleCache,
    concat: Option<ConcatCache>,
    block: ConvBlockCache<T>,
}

#[derive(Debug)]
pub struct DecoderCache<T> {
    stages: Vec<StageCache<T>>,
    head_conv: Conv2dCache<T>,
    head_sigmoid: SigmoidCache<T>,
    bottleneck_dims: Dims,
    skip_dims: Vec<Dims>,
}

/// Gradients a decoder hands back to the encoder.
#[derive(Debug, Clone)]
pub struct DecoderGrads<T> {
    pub bottleneck: Tensor4<T>,
    /// Same order as [`Encoded::skips`]; zero when merging is disabled.
    pub skips: Vec<Tensor4<T>>,
}

impl Decoder {
    pub(crate) fn declare<T: Scalar, R: Rng>(
        reg: &mut ParamRegistry<T>,
        spec: &super::ModelSpec,
        index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Group::Decoder(index);
        let prefix = g.prefix();
        let blocks = spec
            .decoder_channels
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                ConvBlock::declare(
                    reg,
                    &format!("{prefix}/block{j}"),
                    spec.decoder_block_in(j),
                    c,
                    spec.convs_per_block,
                    spec.kernel,
                    g,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let last = *spec.decoder_channels.last().expect("validated spec");
        let (head_weight, head_bias) = declare_conv(
            reg,
            &format!("{prefix}/head"),
            last,
            spec.in_channels,
            spec.kernel,
            g,
            rng,
        )?;
        Ok(Self {
            index,
            blocks,
            head_weight,
            head_bias,
            merge: spec.merge,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        bottleneck: &Tensor4<T>,
        skips: &[Tensor4<T>],
        mode: Mode,
    ) -> Result<(Tensor4<T>, DecoderCache<T>)> {
        if skips.len() != self.blocks.len() {
            return shape_err(format!(
                "decoder has {} stages but got {} skips",
                self.blocks.len(),
                skips.len()
            ));
        }
        let mut stages = Vec::with_capacity(self.blocks.len());
        let mut h = bottleneck.clone();
        for (block, skip) in self.blocks.iter().zip(skips.iter().rev()) {
            let (u, up) = upsample_nearest2(&h);
            let (ud, sd) = (u.dims(), skip.dims());
            if ud.n != sd.n || ud.h != sd.h || ud.w != sd.w {
                return shape_err(format!(
                    "decoder feature {ud} does not match encoder skip {sd}"
                ));
            }
            let (merged, concat) = if self.merge {
                let (m, c) = concat_channels(&u, skip)?;
                (m, Some(c))
            } else {
                (u, None)
            };
            let (out, bc) = block.forward(reg, &merged, mode)?;
            stages.push(StageCache {
                up,
                concat,
                block: bc,
            });
            h = out;
        }
        let p = ConvParams::new(
            reg.value(self.head_weight),
            reg.value(self.head_bias).data(),
        )?;
        let (z, head_conv) = conv2d(&h, p)?;
        let (y, head_sigmoid) = sigmoid(&z);
        let cache = DecoderCache {
            stages,
            head_conv,
            head_sigmoid,
            bottleneck_dims: bottleneck.dims(),
            skip_dims: skips.iter().map(|s| s.dims()).collect(),
        };
        Ok((y, cache))
    }

    pub fn backward<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        cache: DecoderCache<T>,
        g_y: &Tensor4<T>,
    ) -> Result<DecoderGrads<T>> {
        let g = cache.head_sigmoid.backward(g_y)?;
        let head = cache.head_conv.backward(&g)?;
        reg.accumulate(self.head_weight, head.weight.data())?;
        reg.accumulate(self.head_bias, &head.bias)?;
        let mut g = head.input;
        let mut g_skips: Vec<Tensor4<T>> =
            cache.skip_dims.iter().map(|&d| Tensor4::zeros(d)).collect();
        let depth = self.blocks.len();
        for (j, (block, stage)) in self.blocks.iter().zip(cache.stages).enumerate().rev() {
            let gm = block.backward(reg, stage.block, g)?;
            let gu = match stage.concat {
                Some(c) => {
                    let (gu, gs) = c.backward(&gm)?;
                    g_skips[depth - 1 - j] = gs;
                    gu
                }
                None => gm,
            };
            g = stage.up.backward(&gu)?;
        }
        if g.dims() != cache.bottleneck_dims {
            return contract_err(format!(
                "decoder backward produced {} for bottleneck {}",
                g.dims(),
                cache.bottleneck_dims
            ));
        }
        Ok(DecoderGrads {
            bottleneck: g,
            skips: g_skips,
        })
    }

    pub fn absorb_stats<T: Scalar>(&self, reg: &mut ParamRegistry<T>, cache: &DecoderCache<T>) {
        for (block, stage) in self.blocks.iter().zip(&cache.stages) {
            block.absorb_stats(reg, &stage.block);
        }
    }
}
