use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// Topology of the merged autoencoder.
///
/// The encoder runs one block per entry of `encoder_channels`, each followed
/// by a 2x2 max pool, then a bottleneck block. Each decoder mirrors it with
/// one upsample + (optional) merge + block per entry of `decoder_channels`,
/// then a single 3x3 convolution to `in_channels` with a sigmoid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub decoder_channels: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel: usize,
    pub decoders: usize,
    /// Concatenate encoder features into the decoders (merge connections).
    pub merge: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::with_base(32)
    }
}

impl ModelSpec {
    /// Schedule `b, 2b, 4b | 8b | 8b, 4b, 2b` with three decoders.
    ///
    /// `with_base(32)` is the full-size network: encoder 32/64/128,
    /// bottleneck 256, decoders 256/128/64.
    pub fn with_base(b: usize) -> Self {
        Self {
            in_channels: 1,
            encoder_channels: vec![b, 2 * b, 4 * b],
            bottleneck_channels: 8 * b,
            decoder_channels: vec![8 * b, 4 * b, 2 * b],
            convs_per_block: 3,
            kernel: 3,
            decoders: 3,
            merge: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoders == 0 {
            return contract_err("at least one decoder is required");
        }
        if self.encoder_channels.is_empty() {
            return contract_err("encoder needs at least one block");
        }
        if self.decoder_channels.len() != self.encoder_channels.len() {
            return contract_err(format!(
                "decoder has {} blocks but encoder has {}; every pool needs a matching upsample",
                self.decoder_channels.len(),
                self.encoder_channels.len()
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return contract_err(format!("kernel size {} must be odd", self.kernel));
        }
        if self.convs_per_block == 0 {
            return contract_err("blocks need at least one convolution");
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain([&self.bottleneck_channels, &self.in_channels]);
        if all.clone().any(|&c| c == 0) {
            return contract_err("channel counts must be positive");
        }
        Ok(())
    }

    /// Input channels of the first convolution of decoder block `j`.
    pub fn decoder_block_in(&self, j: usize) -> usize {
        let prev = if j == 0 {
            self.bottleneck_channels
        } else {
            self.decoder_channels[j - 1]
        };
        if self.merge {
            prev + self.encoder_channels[self.depth() - 1 - j]
        } else {
            prev
        }
    }
}
