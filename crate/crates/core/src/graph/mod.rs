//! Conv blocks, encoder and decoders over a named parameter registry.
//!
//! Layers hold only [`ParamId`]s; values and gradients live in the
//! [`ParamRegistry`]. Forward passes read the registry immutably and return
//! caches; backward passes consume those caches and add into the registry's
//! gradient buffers (callers zero them per batch). Train-mode batch-norm
//! statistics are folded into the running estimates separately via
//! `absorb_stats`, so a forward never mutates parameters.

mod layers;
mod registry;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{
    ConvBlock, ConvLayer, Decoder, DecoderCache, DecoderGrads, Encoded, Encoder, EncoderCache, Mode,
};
pub use registry::{Group, Param, ParamId, ParamRegistry};
pub use spec::ModelSpec;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor4};

/// Parameters plus the layer structure that indexes into them.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub registry: ParamRegistry<T>,
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
}

/// RNG stream for a group: encoder 0, decoder `i` gets `i + 1`.
fn group_rng(seed: u64, group: Group) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match group {
        Group::Encoder => 0,
        Group::Decoder(i) => i as u64 + 1,
    });
    rng
}

/// Declares every parameter of `spec` with seeded initialization.
///
/// Kernels are uniform in `(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases and
/// betas zero, gammas one. Each decoder draws from its own stream, so
/// decoders start from different weights under a single seed.
pub fn build<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut registry = ParamRegistry::new();
    let encoder = Encoder::declare(&mut registry, spec, &mut group_rng(seed, Group::Encoder))?;
    let decoders = (0..spec.decoders)
        .map(|i| {
            Decoder::declare(
                &mut registry,
                spec,
                i,
                &mut group_rng(seed, Group::Decoder(i)),
            )
        })
        .collect::<Result<_>>()?;
    Ok(Network {
        registry,
        encoder,
        decoders,
    })
}

pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamRegistry<T>> {
    Ok(build(spec, seed)?.registry)
}

/// Full backward along one encoder→decoder path, returning the input
/// gradient. Parameter gradients of both are added into `reg`.
pub fn backward_through<T: Scalar>(
    reg: &mut ParamRegistry<T>,
    encoder: &Encoder,
    decoder: &Decoder,
    enc_cache: EncoderCache<T>,
    dec_cache: DecoderCache<T>,
    g_y: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let g = decoder.backward(reg, dec_cache, g_y)?;
    encoder.backward(reg, enc_cache, g.bottleneck, g.skips)
}
