use candle_core::{Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use super::ModelConfig;
use crate::corpus::GrainConfig;
use crate::error::Result;
use crate::nn::{down_len, DownBlock};

/// Strided residual convolutions followed by two fully-connected layers to
/// `(mu, logvar)`. Grains are processed independently.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<DownBlock>,
    hidden: Linear,
    out: Linear,
    flat: usize,
    latent_dim: usize,
    logvar_clamp: f64,
}

impl Encoder {
    pub fn new(grain: &GrainConfig, config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.encoder_channels.len());
        let mut c_in = 1;
        let mut len = grain.grain_size;
        for (i, &c_out) in config.encoder_channels.iter().enumerate() {
            blocks.push(DownBlock::new(
                c_in,
                c_out,
                config.encoder_kernel,
                config.encoder_stride,
                vb.pp(format!("block{i}")),
            )?);
            c_in = c_out;
            len = down_len(len, config.encoder_stride);
        }
        let flat = c_in * len;
        Ok(Self {
            blocks,
            hidden: candle_nn::linear(flat, config.encoder_hidden, vb.pp("hidden"))?,
            out: candle_nn::linear(config.encoder_hidden, 2 * config.latent_dim, vb.pp("out"))?,
            flat,
            latent_dim: config.latent_dim,
            logvar_clamp: config.logvar_clamp,
        })
    }

    /// `(n, d_x)` grains to `(mu, logvar)`, each `(n, d_z)`; logvar is clamped.
    pub fn forward(&self, grains: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, d_x) = grains.dims2()?;
        let mut h = grains.reshape((n, d_x, 1))?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let h = h.reshape((n, self.flat))?;
        let h = self.hidden.forward(&h)?.silu()?;
        let out = self.out.forward(&h)?;
        let mu = out.narrow(1, 0, self.latent_dim)?;
        let logvar = out
            .narrow(1, self.latent_dim, self.latent_dim)?
            .clamp(-self.logvar_clamp, self.logvar_clamp)?;
        Ok((mu, logvar))
    }
}
