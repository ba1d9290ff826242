use candle_core::{Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use super::{DecoderVariant, ModelConfig, PostProcessor};
use crate::corpus::GrainConfig;
use crate::dsp::NoiseFilter;
use crate::error::{shape_err, Result};
use crate::nn::{down_len, softplus, ResidualLinear, UpBlock, UpMode};

/// Residual fully-connected layers producing nonnegative frequency
/// magnitudes that filter a uniform noise excitation per grain.
#[derive(Debug, Clone)]
pub struct FilteringDecoder {
    input: Linear,
    residual: Vec<ResidualLinear>,
    head: Linear,
    filter: NoiseFilter,
    postprocess: Option<PostProcessor>,
}

impl FilteringDecoder {
    pub fn new(grain: &GrainConfig, config: &ModelConfig, postprocess: bool, vb: VarBuilder) -> Result<Self> {
        let d_in = config.latent_dim + config.num_classes;
        let width = config.decoder_hidden;
        let residual = (0..config.decoder_residual_layers)
            .map(|i| ResidualLinear::new(width, vb.pp(format!("decoder.res{i}"))))
            .collect::<Result<_>>()?;
        let postprocess = if postprocess {
            Some(PostProcessor::new(
                config.postprocess_channels,
                config.postprocess_taps,
                vb.pp("postprocess"),
            )?)
        } else {
            None
        };
        Ok(Self {
            input: candle_nn::linear(d_in, width, vb.pp("decoder.input"))?,
            residual,
            head: candle_nn::linear(width, grain.filter_size(), vb.pp("decoder.head"))?,
            filter: NoiseFilter::new(grain.grain_size)?,
            postprocess,
        })
    }

    /// `(.., d_in)` decoder inputs to `(.., d_h)` magnitudes.
    pub fn coefficients(&self, input: &Tensor) -> Result<Tensor> {
        // 2-D matmuls are much cheaper than batched ones on the CPU
        let dims = input.dims().to_vec();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut h = self.input.forward(&input.reshape((rows, dims[dims.len() - 1]))?)?.silu()?;
        for layer in &self.residual {
            h = layer.forward(&h)?;
        }
        let h = softplus(&self.head.forward(&h)?)?;
        let mut out = dims;
        *out.last_mut().expect("rank checked by caller") = h.dim(1)?;
        Ok(h.reshape(out)?)
    }

    pub fn grains(&self, input: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let h = self.coefficients(input)?;
        let (b, g, _) = h.dims3()?;
        if noise.dims3()? != (b, g, self.filter.filter_size() * 2 - 2) {
            return Err(shape_err(format!(
                "noise {:?} does not match {} grains of {} samples",
                noise.dims(),
                b * g,
                self.filter.filter_size() * 2 - 2
            )));
        }
        self.filter.apply(&h, noise)
    }

    pub fn postprocess(&self) -> Option<&PostProcessor> {
        self.postprocess.as_ref()
    }
}

/// Mirror of the encoder: a linear map to the encoder's bottleneck shape,
/// then upsampling convolutions back to one grain.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    input: Linear,
    blocks: Vec<UpBlock>,
    channels: usize,
    len: usize,
    grain_size: usize,
}

impl ConvDecoder {
    pub fn new(grain: &GrainConfig, config: &ModelConfig, mode: UpMode, vb: VarBuilder) -> Result<Self> {
        let d_in = config.latent_dim + config.num_classes;
        let stride = config.encoder_stride;
        let len = config
            .encoder_channels
            .iter()
            .fold(grain.grain_size, |l, _| down_len(l, stride));
        let channels = *config.encoder_channels.last().expect("validated non-empty");
        let mut outs: Vec<usize> = config.encoder_channels.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut c_in = channels;
        let last = outs.len() - 1;
        let blocks = outs
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let b = UpBlock::new(
                    c_in,
                    c_out,
                    config.encoder_kernel,
                    stride,
                    mode,
                    i != last,
                    vb.pp(format!("decoder.up{i}")),
                );
                c_in = c_out;
                b
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input: candle_nn::linear(d_in, channels * len, vb.pp("decoder.input"))?,
            blocks,
            channels,
            len,
            grain_size: grain.grain_size,
        })
    }

    pub fn grains(&self, input: &Tensor) -> Result<Tensor> {
        let (b, g, d_in) = input.dims3()?;
        let n = b * g;
        let mut h = self
            .input
            .forward(&input.reshape((n, d_in))?)?
            .silu()?
            .reshape((n, self.len, self.channels))?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(h.narrow(1, 0, self.grain_size)?.reshape((b, g, self.grain_size))?)
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Filtering(FilteringDecoder),
    Conv(ConvDecoder),
}

impl Decoder {
    /// `(b, g, d_in)` decoder inputs to `(b, g, d_x)` grains.
    pub fn grains(&self, input: &Tensor, noise: &Tensor) -> Result<Tensor> {
        match self {
            Decoder::Filtering(d) => d.grains(input, noise),
            Decoder::Conv(d) => d.grains(input),
        }
    }
}

/// Builds any of the four decoders; all accept the same inputs and emit grains of `d_x` samples.
pub fn build_decoder(
    variant: DecoderVariant,
    grain: &GrainConfig,
    config: &ModelConfig,
    vb: VarBuilder,
) -> Result<Decoder> {
    Ok(match variant {
        DecoderVariant::Filtering => Decoder::Filtering(FilteringDecoder::new(grain, config, false, vb)?),
        DecoderVariant::FilteringPostproc => Decoder::Filtering(FilteringDecoder::new(grain, config, true, vb)?),
        DecoderVariant::TransposedConv => Decoder::Conv(ConvDecoder::new(grain, config, UpMode::Transposed, vb)?),
        DecoderVariant::UpsampleConv => Decoder::Conv(ConvDecoder::new(grain, config, UpMode::Repeat, vb)?),
    })
}
