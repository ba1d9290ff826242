//! The grain-level variational auto-encoder.

mod decoder;
mod encoder;
mod postprocess;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{build_decoder, ConvDecoder, Decoder, FilteringDecoder};
pub use encoder::Encoder;
pub use postprocess::PostProcessor;

use crate::corpus::GrainConfig;
use crate::dsp::{overlap_add, synthesis_window};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// Noise filtering decoder.
    Filtering,
    /// Noise filtering decoder plus learnable FIR post-processing.
    FilteringPostproc,
    /// Mirrored encoder with transposed convolutions.
    TransposedConv,
    /// Mirrored encoder with nearest upsampling and convolutions.
    UpsampleConv,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [
        DecoderVariant::TransposedConv,
        DecoderVariant::UpsampleConv,
        DecoderVariant::Filtering,
        DecoderVariant::FilteringPostproc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderVariant::Filtering => "filtering",
            DecoderVariant::FilteringPostproc => "filtering_postproc",
            DecoderVariant::TransposedConv => "transposed_conv",
            DecoderVariant::UpsampleConv => "upsample_conv",
        }
    }

    /// Column heading used in comparison tables.
    pub fn short_name(&self) -> &'static str {
        match self {
            DecoderVariant::Filtering => "VAE_fi",
            DecoderVariant::FilteringPostproc => "VAE_fi+pp",
            DecoderVariant::TransposedConv => "VAE_tr",
            DecoderVariant::UpsampleConv => "VAE_up",
        }
    }

    pub fn is_filtering(&self) -> bool {
        matches!(self, DecoderVariant::Filtering | DecoderVariant::FilteringPostproc)
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder variant {s:?}")))
    }
}

/// Architecture hyperparameters of the grain VAE and sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub variant: DecoderVariant,
    /// Number of condition categories; 0 for an unconditional model.
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_residual_layers: usize,
    pub postprocess_channels: usize,
    pub postprocess_taps: usize,
    pub temporal_hidden: usize,
    pub logvar_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 96,
            embedding_dim: 256,
            variant: DecoderVariant::FilteringPostproc,
            num_classes: 0,
            encoder_channels: vec![32, 64, 128, 256],
            encoder_kernel: 9,
            encoder_stride: 4,
            encoder_hidden: 512,
            decoder_hidden: 512,
            decoder_residual_layers: 3,
            postprocess_channels: 8,
            postprocess_taps: 128,
            temporal_hidden: 512,
            logvar_clamp: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("embedding_dim", self.embedding_dim),
            ("encoder_kernel", self.encoder_kernel),
            ("encoder_stride", self.encoder_stride),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("postprocess_channels", self.postprocess_channels),
            ("postprocess_taps", self.postprocess_taps),
            ("temporal_hidden", self.temporal_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be non-empty and positive".into()));
        }
        if self.encoder_kernel % 2 == 0 {
            return Err(Error::Config("encoder_kernel must be odd".into()));
        }
        if !(self.logvar_clamp > 0.0) {
            return Err(Error::Config("logvar_clamp must be positive".into()));
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.num_classes > 0
    }
}

/// Per-grain diagonal Gaussian posterior, `(.., g, d_z)`.
///
/// Stored as log-variance; `sigma = exp(logvar / 2)`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, logvar: Tensor) -> Result<Self> {
        if mu.dims() != logvar.dims() {
            return Err(shape_err(format!(
                "mu {:?} and logvar {:?} differ",
                mu.dims(),
                logvar.dims()
            )));
        }
        Ok(Self { mu, logvar })
    }

    pub fn from_sigma(mu: Tensor, sigma: &Tensor) -> Result<Self> {
        let logvar = (sigma.log()? * 2.0)?;
        Self::new(mu, logvar)
    }

    pub fn sigma(&self) -> Result<Tensor> {
        Ok((&self.logvar * 0.5)?.exp()?)
    }
}

/// `z = mu + eps * sigma`.
pub fn reparameterize(params: &GaussianParams, eps: &Tensor) -> Result<LatentSeries> {
    if eps.dims() != params.mu.dims() {
        return Err(shape_err(format!(
            "noise {:?} does not match posterior {:?}",
            eps.dims(),
            params.mu.dims()
        )));
    }
    Ok(LatentSeries((&params.mu + (eps * params.sigma()?)?)?))
}

/// Standard normal noise shaped like the posterior, drawn from `seed`.
pub fn standard_normal_like(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..t.elem_count())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, t.dims(), t.device())?.to_dtype(t.dtype())?)
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))`, summed over grains and
/// dimensions and averaged over any leading batch dimension.
pub fn kl_divergence(params: &GaussianParams) -> Result<Tensor> {
    let lv = &params.logvar;
    let terms = ((params.mu.sqr()? + lv.exp()?)? - lv)?.affine(0.5, -0.5)?;
    let per_item = match terms.rank() {
        0 | 1 => return Ok(terms.sum_all()?),
        _ => terms.sum(D::Minus1)?.sum(D::Minus1)?,
    };
    Ok(per_item.mean_all()?)
}

/// Ordered latent trajectory, `(g, d_z)` (or `(b, g, d_z)` for batches).
#[derive(Debug, Clone)]
pub struct LatentSeries(pub Tensor);

impl LatentSeries {
    pub fn from_rows(rows: &[Vec<f32>], dtype: DType, device: &Device) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("latent rows must be non-empty and rectangular"));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Ok(Self(Tensor::from_vec(flat, (rows.len(), cols), device)?.to_dtype(dtype)?))
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.0.to_dtype(DType::F32)?.to_vec2()?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.dims().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Category index fed to the decoder as a one-hot vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub index: usize,
    pub num_categories: usize,
}

impl ConditionLabel {
    pub fn new(index: usize, num_categories: usize) -> Result<Self> {
        if index >= num_categories {
            return Err(Error::Config(format!(
                "condition {index} out of range for {num_categories} categories"
            )));
        }
        Ok(Self {
            index,
            num_categories,
        })
    }

    pub fn one_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.num_categories];
        v[self.index] = 1.0;
        v
    }
}

/// `(b, num_classes)` one-hot rows.
pub fn one_hot(labels: &[usize], num_classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Config(format!(
                "condition {l} out of range for {num_classes} categories"
            )));
        }
        data[i * num_classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), num_classes), device)?.to_dtype(dtype)?)
}

/// Uniform noise in `[-1, 1)` of the given shape, reproducible from `seed`.
pub fn uniform_noise(shape: &[usize], seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Encoder, decoder and overlap-add geometry.
#[derive(Debug, Clone)]
pub struct GrainVae {
    grain: GrainConfig,
    config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    window: Vec<f64>,
    dtype: DType,
    device: Device,
}

impl GrainVae {
    pub fn new(grain: &GrainConfig, config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        grain.validate()?;
        config.validate()?;
        let window = synthesis_window(grain.grain_size, grain.overlap_ratio)?;
        let encoder = Encoder::new(grain, config, vb.pp("encoder"))?;
        let decoder = build_decoder(config.variant, grain, config, vb.clone())?;
        Ok(Self {
            grain: grain.clone(),
            config: config.clone(),
            encoder,
            decoder,
            window,
            dtype: vb.dtype(),
            device: vb.device().clone(),
        })
    }

    pub fn grain_config(&self) -> &GrainConfig {
        &self.grain
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Grains `(.., g, d_x)` to per-grain posteriors `(.., g, d_z)`.
    pub fn encode(&self, grains: &Tensor) -> Result<GaussianParams> {
        let d_x = self.grain.grain_size;
        let dims = grains.dims().to_vec();
        if dims.len() < 2 || dims[dims.len() - 1] != d_x {
            return Err(shape_err(format!("expected (.., g, {d_x}) grains, got {dims:?}")));
        }
        let n: usize = dims[..dims.len() - 1].iter().product();
        let (mu, logvar) = self.encoder.forward(&grains.reshape((n, d_x))?)?;
        let mut out_shape = dims[..dims.len() - 1].to_vec();
        out_shape.push(self.config.latent_dim);
        GaussianParams::new(mu.reshape(out_shape.clone())?, logvar.reshape(out_shape)?)
    }

    fn decoder_input(&self, z: &Tensor, condition: Option<&[usize]>) -> Result<Tensor> {
        let (b, g, d_z) = z.dims3()?;
        if d_z != self.config.latent_dim {
            return Err(shape_err(format!(
                "latent dim {d_z} != model latent dim {}",
                self.config.latent_dim
            )));
        }
        match (self.config.num_classes, condition) {
            (0, None) => Ok(z.clone()),
            (0, Some(_)) => Err(Error::UnexpectedCondition),
            (n, None) => Err(Error::MissingCondition(n)),
            (n, Some(labels)) => {
                if labels.len() != b {
                    return Err(shape_err(format!("{} conditions for batch of {b}", labels.len())));
                }
                let oh = one_hot(labels, n, z.dtype(), z.device())?
                    .unsqueeze(1)?
                    .broadcast_as((b, g, n))?;
                Ok(Tensor::cat(&[z, &oh], D::Minus1)?)
            }
        }
    }

    fn batched(z: &Tensor) -> Result<(Tensor, bool)> {
        match z.rank() {
            2 => Ok((z.unsqueeze(0)?, true)),
            3 => Ok((z.clone(), false)),
            _ => Err(shape_err(format!("expected (g, d_z) or (b, g, d_z), got {:?}", z.dims()))),
        }
    }

    /// Frequency magnitudes `(.., g, d_h)` of a filtering decoder.
    pub fn coefficients(&self, z: &Tensor, condition: Option<&[usize]>) -> Result<Tensor> {
        let (zb, single) = Self::batched(z)?;
        let input = self.decoder_input(&zb, condition)?;
        let h = match &self.decoder {
            Decoder::Filtering(d) => d.coefficients(&input)?,
            Decoder::Conv(_) => {
                return Err(Error::Config("convolutional decoders have no filter coefficients".into()))
            }
        };
        Ok(if single { h.squeeze(0)? } else { h })
    }

    /// Decoded grains before overlap-add, `(b, g, d_x)`. `noise` is only used by
    /// filtering decoders.
    pub fn decode_grains(&self, z: &Tensor, condition: Option<&[usize]>, noise: &Tensor) -> Result<Tensor> {
        let (zb, _) = Self::batched(z)?;
        let input = self.decoder_input(&zb, condition)?;
        self.decoder.grains(&input, noise)
    }

    /// Latents `(b, g, d_z)` (or `(g, d_z)`) to waveforms of
    /// `(g - 1) * hop + d_x` samples with the given excitation noise.
    pub fn decode_with_noise(&self, z: &Tensor, condition: Option<&[usize]>, noise: &Tensor) -> Result<Tensor> {
        let (zb, single) = Self::batched(z)?;
        let grains = self.decode_grains(&zb, condition, noise)?;
        let wave = overlap_add(&grains, self.grain.hop(), &self.window)?;
        let wave = match &self.decoder {
            Decoder::Filtering(d) => match d.postprocess() {
                Some(pp) => pp.forward(&wave)?,
                None => wave,
            },
            Decoder::Conv(_) => wave,
        };
        Ok(if single { wave.squeeze(0)? } else { wave })
    }

    /// Decodes with fresh uniform noise drawn from `noise_seed`.
    pub fn decode(&self, z: &Tensor, condition: Option<&[usize]>, noise_seed: u64) -> Result<Tensor> {
        let (zb, single) = Self::batched(z)?;
        let (b, g, _) = zb.dims3()?;
        let noise = self.noise(b, g, noise_seed)?;
        let wave = self.decode_with_noise(&zb, condition, &noise)?;
        Ok(if single { wave.squeeze(0)? } else { wave })
    }

    /// Excitation noise `(b, g, d_x)`; consecutive batch items continue the
    /// same random stream.
    pub fn noise(&self, b: usize, g: usize, seed: u64) -> Result<Tensor> {
        uniform_noise(&[b, g, self.grain.grain_size], seed, self.dtype, &self.device)
    }

    /// Overlap-added reference for a batch of grains, shaped like the decoder output.
    pub fn target_waveform(&self, grains: &Tensor) -> Result<Tensor> {
        overlap_add(grains, self.grain.hop(), &self.window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in DecoderVariant::ALL {
            assert_eq!(v.as_str().parse::<DecoderVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("wavenet".parse::<DecoderVariant>().is_err());
    }

    #[test]
    fn condition_one_hot() {
        let c = ConditionLabel::new(3, 8).unwrap();
        assert_eq!(c.one_hot(), vec![0., 0., 0., 1., 0., 0., 0., 0.]);
        assert!(ConditionLabel::new(8, 8).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let dev = Device::Cpu;
        let mu = Tensor::new(&[[0.5f64, -1.0], [2.0, 0.0]], &dev).unwrap();
        let sigma = Tensor::new(&[[0.3f64, 2.0], [1.0, 0.1]], &dev).unwrap();
        let p = GaussianParams::from_sigma(mu.clone(), &sigma).unwrap();
        let zero = mu.zeros_like().unwrap();
        let z: Vec<Vec<f64>> = reparameterize(&p, &zero).unwrap().0.to_vec2().unwrap();
        assert_eq!(z, mu.to_vec2::<f64>().unwrap());

        let std = GaussianParams::from_sigma(zero.clone(), &zero.ones_like().unwrap()).unwrap();
        let e = Tensor::new(&[[0.7f64, -0.2], [1.5, 3.0]], &dev).unwrap();
        let z: Vec<Vec<f64>> = reparameterize(&std, &e).unwrap().0.to_vec2().unwrap();
        assert_eq!(z, e.to_vec2::<f64>().unwrap());

        // clamped floor: logvar -10 gives sigma ~ 6.7e-3
        let tight = GaussianParams::new(mu.clone(), (zero.ones_like().unwrap() * -10.0).unwrap()).unwrap();
        let z: Vec<Vec<f64>> = reparameterize(&tight, &e).unwrap().0.to_vec2().unwrap();
        for (zr, mr) in z.iter().zip(mu.to_vec2::<f64>().unwrap()) {
            for (a, b) in zr.iter().zip(mr) {
                assert!((a - b).abs() < 0.03);
            }
        }
        assert!(reparameterize(&p, &Tensor::zeros(3, DType::F64, &dev).unwrap()).is_err());
    }

    #[test]
    fn kl_of_prior_is_zero_and_unit_mean_is_half_per_dim() {
        let dev = Device::Cpu;
        let zeros = Tensor::zeros((4, 96), DType::F64, &dev).unwrap();
        let prior = GaussianParams::new(zeros.clone(), zeros.clone()).unwrap();
        assert_eq!(kl_divergence(&prior).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let one = GaussianParams::new(Tensor::ones((1, 96), DType::F64, &dev).unwrap(), zeros.narrow(0, 0, 1).unwrap()).unwrap();
        assert_eq!(kl_divergence(&one).unwrap().to_scalar::<f64>().unwrap(), 48.0);
    }

    #[test]
    fn kl_averages_over_batch() {
        let dev = Device::Cpu;
        let mu = Tensor::new(&[[[1.0f64, 0.0]], [[3.0, 0.0]]], &dev).unwrap();
        let lv = mu.zeros_like().unwrap();
        let kl = kl_divergence(&GaussianParams::new(mu, lv).unwrap()).unwrap();
        // items: 0.5 and 4.5
        assert_eq!(kl.to_scalar::<f64>().unwrap(), 2.5);
    }

    #[test]
    fn uniform_noise_range_and_seed() {
        let a = uniform_noise(&[3, 100], 9, DType::F64, &Device::Cpu).unwrap();
        let b = uniform_noise(&[3, 100], 9, DType::F64, &Device::Cpu).unwrap();
        let av: Vec<Vec<f64>> = a.to_vec2().unwrap();
        assert_eq!(av, b.to_vec2::<f64>().unwrap());
        assert!(av.iter().flatten().all(|x| (-1.0..1.0).contains(x)));
    }
}
