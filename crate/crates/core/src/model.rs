//! The merged autoencoder: one shared encoder feeding `D` decoders.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use crate::error::{contract_err, Result};
use crate::graph::{
    self, Decoder, DecoderCache, DecoderGrads, Encoder, EncoderCache, Group, Mode, ParamRegistry,
};
use crate::tensor::{Scalar, Tensor4};

pub use crate::graph::ModelSpec;

#[derive(Debug)]
pub struct MergedAutoencoder<T> {
    spec: ModelSpec,
    registry: ParamRegistry<T>,
    encoder: Encoder,
    decoders: Vec<Decoder>,
    encoder_passes: AtomicUsize,
}

impl<T: Scalar> Clone for MergedAutoencoder<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            registry: self.registry.clone(),
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            encoder_passes: AtomicUsize::new(self.encoder_passes()),
        }
    }
}

/// Every decoder's output for one shared encoder pass.
#[derive(Debug)]
pub struct MultiOutput<T> {
    pub outputs: Vec<Tensor4<T>>,
    pub cache: ForwardCache<T>,
}

#[derive(Debug)]
pub struct ForwardCache<T> {
    pub encoder: EncoderCache<T>,
    pub decoders: Vec<DecoderCache<T>>,
}

impl<T: Scalar> MergedAutoencoder<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let net = graph::build(&spec, seed)?;
        Ok(Self {
            spec,
            registry: net.registry,
            encoder: net.encoder,
            decoders: net.decoders,
            encoder_passes: AtomicUsize::new(0),
        })
    }

    /// Rebuilds the layer structure for `spec` around existing values.
    ///
    /// `registry` must hold exactly the parameters `spec` declares, with
    /// matching names and dims.
    pub fn from_registry(spec: ModelSpec, registry: ParamRegistry<T>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if model.registry.len() != registry.len() {
            return contract_err(format!(
                "registry has {} parameters, spec declares {}",
                registry.len(),
                model.registry.len()
            ));
        }
        for ((_, want), (_, have)) in model.registry.iter().zip(registry.iter()) {
            if want.name != have.name || want.value.dims() != have.value.dims() {
                return contract_err(format!(
                    "parameter mismatch: spec expects {} {}, found {} {}",
                    want.name,
                    want.value.dims(),
                    have.name,
                    have.value.dims()
                ));
            }
        }
        model.registry = registry;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.registry
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoders(&self) -> &[Decoder] {
        &self.decoders
    }

    pub fn num_decoders(&self) -> usize {
        self.decoders.len()
    }

    /// Number of encoder forward passes run so far.
    pub fn encoder_passes(&self) -> usize {
        self.encoder_passes.load(Ordering::Relaxed)
    }

    /// One encoder pass shared by all decoders; outputs in decoder order.
    pub fn forward_all(&self, x: &Tensor4<T>, mode: Mode) -> Result<MultiOutput<T>> {
        let enc = self.encoder.forward(&self.registry, x, mode)?;
        self.encoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut outputs = Vec::with_capacity(self.decoders.len());
        let mut caches = Vec::with_capacity(self.decoders.len());
        for d in &self.decoders {
            let (y, c) = d.forward(&self.registry, &enc.bottleneck, &enc.skips, mode)?;
            outputs.push(y);
            caches.push(c);
        }
        Ok(MultiOutput {
            outputs,
            cache: ForwardCache {
                encoder: enc.cache,
                decoders: caches,
            },
        })
    }

    /// Folds the batch statistics of a train-mode forward into every
    /// batch-norm layer's running estimates.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache<T>) {
        self.encoder
            .absorb_stats(&mut self.registry, &cache.encoder);
        for (d, c) in self.decoders.iter().zip(&cache.decoders) {
            d.absorb_stats(&mut self.registry, c);
        }
    }

    pub fn backward_decoder(
        &mut self,
        index: usize,
        cache: DecoderCache<T>,
        g_y: &Tensor4<T>,
    ) -> Result<DecoderGrads<T>> {
        self.decoders[index].backward(&mut self.registry, cache, g_y)
    }

    pub fn backward_encoder(
        &mut self,
        cache: EncoderCache<T>,
        grads: DecoderGrads<T>,
    ) -> Result<Tensor4<T>> {
        self.encoder
            .backward(&mut self.registry, cache, grads.bottleneck, grads.skips)
    }

    /// Elementwise mean of all decoder outputs in inference mode.
    ///
    /// Each pixel's values are summed in ascending order in f64, which makes
    /// the result independent of decoder order.
    pub fn predict_average(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out = self.forward_all(x, Mode::Infer)?;
        Ok(average(&out.outputs))
    }

    /// Overwrites decoder `to`'s parameters with decoder `from`'s.
    pub fn copy_decoder(&mut self, from: usize, to: usize) -> Result<()> {
        self.registry
            .copy_group(Group::Decoder(from), Group::Decoder(to))
    }

    pub fn trainable_params(&self) -> usize {
        self.registry.trainable_count()
    }
}

/// Order-independent elementwise mean of equally shaped tensors.
pub fn average<T: Scalar>(ys: &[Tensor4<T>]) -> Tensor4<T> {
    let mut out = ys[0].clone();
    let d = ys.len() as f64;
    let mut buf = vec![0.0f64; ys.len()];
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        for (b, y) in buf.iter_mut().zip(ys) {
            *b = y.data()[i].as_f64();
        }
        buf.sort_by(f64::total_cmp);
        *o = T::from_f64_lossy(buf.iter().sum::<f64>() / d);
    }
    out
}

/// Multiply-accumulate count of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerMacs {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    pub total: u64,
}

/// MACs of a single same-padded convolution on an `h x w` input.
pub fn conv_macs(in_c: usize, out_c: usize, k: usize, h: usize, w: usize) -> u64 {
    (out_c * in_c * k * k * h * w) as u64
}

/// Per-sample MACs of every convolution in the model (pooling, upsampling,
/// normalization and activations count zero).
pub fn count_macs(spec: &ModelSpec, h: usize, w: usize) -> Result<MacReport> {
    spec.validate()?;
    let m = spec.size_multiple();
    if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return contract_err(format!("input {h}x{w} is not a multiple of {m}"));
    }
    let k = spec.kernel;
    let mut layers = Vec::new();
    let mut push = |name: String, in_c: usize, out_c: usize, hh: usize, ww: usize| {
        layers.push(LayerMacs {
            name,
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            height: hh,
            width: ww,
            macs: conv_macs(in_c, out_c, k, hh, ww),
        });
    };
    let block = |push: &mut dyn FnMut(String, usize, usize, usize, usize),
                 prefix: &str,
                 in_c: usize,
                 out_c: usize,
                 hh,
                 ww| {
        for i in 0..spec.convs_per_block {
            let c_in = if i == 0 { in_c } else { out_c };
            push(format!("{prefix}/conv{i}"), c_in, out_c, hh, ww);
        }
    };

    let (mut hh, mut ww) = (h, w);
    let mut in_c = spec.in_channels;
    for (i, &c) in spec.encoder_channels.iter().enumerate() {
        block(&mut push, &format!("encoder/block{i}"), in_c, c, hh, ww);
        in_c = c;
        hh /= 2;
        ww /= 2;
    }
    block(
        &mut push,
        "encoder/bottleneck",
        in_c,
        spec.bottleneck_channels,
        hh,
        ww,
    );
    for d in 0..spec.decoders {
        let (mut dh, mut dw) = (hh, ww);
        for (j, &c) in spec.decoder_channels.iter().enumerate() {
            dh *= 2;
            dw *= 2;
            block(
                &mut push,
                &format!("decoder{d}/block{j}"),
                spec.decoder_block_in(j),
                c,
                dh,
                dw,
            );
        }
        let last = *spec.decoder_channels.last().expect("validated");
        push(format!("decoder{d}/head"), last, spec.in_channels, dh, dw);
    }
    let total = layers.iter().map(|l| l.macs).sum();
    Ok(MacReport { layers, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mse, Dims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelSpec {
        ModelSpec {
            encoder_channels: vec![2, 4, 8],
            bottleneck_channels: 16,
            decoder_channels: vec![16, 8, 4],
            ..ModelSpec::default()
        }
    }

    fn warmed(spec: ModelSpec, seed: u64, x: &Tensor4<f32>) -> MergedAutoencoder<f32> {
        let mut m = MergedAutoencoder::new(spec, seed).unwrap();
        let out = m.forward_all(x, Mode::Train).unwrap();
        m.absorb_batch_stats(&out.cache);
        m
    }

    #[test]
    fn three_outputs_one_encoder_pass() {
        let spec = ModelSpec::with_base(4);
        let m = MergedAutoencoder::<f32>::new(spec, 0).unwrap();
        let x = Tensor4::full(Dims::new(2, 1, 64, 64), 0.25f32);
        let out = m.forward_all(&x, Mode::Train).unwrap();
        assert_eq!(out.outputs.len(), 3);
        assert!(out.outputs.iter().all(|y| y.dims() == x.dims()));
        assert_eq!(m.encoder_passes(), 1);
        m.forward_all(&x, Mode::Train).unwrap();
        assert_eq!(m.encoder_passes(), 2);
    }

    #[test]
    fn fresh_decoders_are_pairwise_distinct() {
        let m = MergedAutoencoder::<f32>::new(tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::random_uniform(Dims::new(1, 1, 16, 16), 0.0, 1.0, &mut rng);
        let out = m.forward_all(&x, Mode::Train).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(out.outputs[i].max_abs_diff(&out.outputs[j]).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn single_decoder_average_is_its_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::random_uniform(Dims::new(2, 1, 16, 16), 0.0, 1.0, &mut rng);
        let m = warmed(
            ModelSpec {
                decoders: 1,
                ..tiny()
            },
            2,
            &x,
        );
        let avg = m.predict_average(&x).unwrap();
        let out = m.forward_all(&x, Mode::Infer).unwrap();
        assert_eq!(avg, out.outputs[0]);
    }

    #[test]
    fn identical_decoders_average_equals_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::random_uniform(Dims::new(2, 1, 16, 16), 0.0, 1.0, &mut rng);
        let mut m = warmed(tiny(), 3, &x);
        m.copy_decoder(0, 1).unwrap();
        m.copy_decoder(0, 2).unwrap();
        let out = m.forward_all(&x, Mode::Infer).unwrap();
        let avg = m.predict_average(&x).unwrap();
        for y in &out.outputs {
            assert_eq!(&avg, y);
        }
    }

    #[test]
    fn average_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<Tensor4<f32>> = (0..3)
            .map(|_| Tensor4::random_uniform(Dims::new(1, 1, 8, 8), 0.0, 1.0, &mut rng))
            .collect();
        let a = average(&ys);
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let p: Vec<_> = perm.iter().map(|&i| ys[i].clone()).collect();
            assert_eq!(average(&p), a);
        }
    }

    #[test]
    fn averaged_mse_below_mean_decoder_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::random_uniform(Dims::new(3, 1, 16, 16), 0.0, 1.0, &mut rng);
        let t = Tensor4::random_uniform(Dims::new(3, 1, 16, 16), 0.0, 1.0, &mut rng);
        let m = warmed(tiny(), 5, &x);
        let out = m.forward_all(&x, Mode::Infer).unwrap();
        let avg = m.predict_average(&x).unwrap();
        let mean_mse = out
            .outputs
            .iter()
            .map(|y| mse(y, &t).unwrap().0)
            .sum::<f64>()
            / 3.0;
        assert!(mse(&avg, &t).unwrap().0 <= mean_mse + 1e-9);
    }

    #[test]
    fn from_registry_rejects_mismatched_spec() {
        let m = MergedAutoencoder::<f32>::new(tiny(), 0).unwrap();
        let reg = m.registry().clone();
        assert!(MergedAutoencoder::from_registry(tiny(), reg.clone()).is_ok());
        assert!(MergedAutoencoder::from_registry(
            ModelSpec {
                decoders: 2,
                ..tiny()
            },
            reg.clone()
        )
        .is_err());
        assert!(MergedAutoencoder::from_registry(
            ModelSpec {
                merge: false,
                ..tiny()
            },
            reg
        )
        .is_err());
    }

    #[test]
    fn default_parameter_count() {
        let m = MergedAutoencoder::<f32>::new(ModelSpec::default(), 0).unwrap();
        // weight + bias + gamma + beta per conv layer, tallied by hand
        let layer = |ci: usize, co: usize| 9 * ci * co + 3 * co;
        let enc: usize = [
            (1, 32),
            (32, 32),
            (32, 32),
            (32, 64),
            (64, 64),
            (64, 64),
            (64, 128),
            (128, 128),
            (128, 128),
            (128, 256),
            (256, 256),
            (256, 256),
        ]
        .iter()
        .map(|&(a, b)| layer(a, b))
        .sum();
        let dec: usize = [
            (384, 256),
            (256, 256),
            (256, 256),
            (320, 128),
            (128, 128),
            (128, 128),
            (160, 64),
            (64, 64),
            (64, 64),
        ]
        .iter()
        .map(|&(a, b)| layer(a, b))
        .sum::<usize>()
            + 9 * 64
            + 1;
        assert_eq!(enc + 3 * dec, 10_653_699);
        assert_eq!(m.trainable_params(), 10_653_699);
    }

    #[test]
    fn default_macs_at_64() {
        let r = count_macs(&ModelSpec::default(), 64, 64).unwrap();
        assert_eq!(r.layers.len(), 12 + 3 * 10);
        assert_eq!(r.total, 6_029_180_928);
        let head = r.layers.iter().find(|l| l.name == "decoder2/head").unwrap();
        assert_eq!(head.macs, 9 * 64 * 64 * 64);
    }

    #[test]
    fn single_conv_macs() {
        assert_eq!(conv_macs(1, 1, 3, 8, 8), 576);
    }

    #[test]
    fn macs_scale_with_area() {
        let s = ModelSpec::default();
        let a = count_macs(&s, 64, 64).unwrap().total;
        let b = count_macs(&s, 128, 128).unwrap().total;
        assert_eq!(b, 4 * a);
    }
}
