//! Sequence-level embedding over latent grain trajectories.
//!
//! A recurrent encoder compresses a `(g, d_z)` trajectory into a Gaussian over
//! a single vector `e`; a recurrent decoder unrolls `e` back into `g` latent
//! points, feeding each output back as the next input.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{one_hot, GaussianParams, LatentSeries, ModelConfig};
use crate::nn::GruCell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEmbedding(pub Vec<f32>);

impl SequenceEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.0, self.0.len(), device)?.to_dtype(dtype)?)
    }

    /// `(1 - alpha) * self + alpha * other`.
    pub fn lerp(&self, other: &SequenceEmbedding, alpha: f32) -> Result<SequenceEmbedding> {
        if self.dim() != other.dim() {
            return Err(shape_err(format!("embedding dims {} and {} differ", self.dim(), other.dim())));
        }
        Ok(SequenceEmbedding(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
                .collect(),
        ))
    }
}

/// Standard normal embedding drawn from `seed`.
pub fn sample_prior(dim: usize, seed: u64) -> SequenceEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SequenceEmbedding((0..dim).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect())
}

/// KL of a batch of embedding posteriors `(b, d_e)` to `N(0, I)`, summed over
/// dimensions and averaged over the batch.
pub fn sequence_kl(params: &GaussianParams) -> Result<Tensor> {
    let lv = &params.logvar;
    let terms = ((params.mu.sqr()? + lv.exp()?)? - lv)?.affine(0.5, -0.5)?;
    match terms.rank() {
        1 => Ok(terms.sum_all()?),
        2 => Ok(terms.sum(D::Minus1)?.mean_all()?),
        _ => Err(shape_err(format!("expected (d_e) or (b, d_e), got {:?}", terms.dims()))),
    }
}

#[derive(Debug, Clone)]
pub struct SequenceVae {
    latent_dim: usize,
    embedding_dim: usize,
    num_classes: usize,
    logvar_clamp: f64,
    enc_cell: GruCell,
    enc_head: Linear,
    init: Linear,
    dec_cell: GruCell,
    dec_head: Linear,
}

impl SequenceVae {
    pub fn new(config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let h = config.temporal_hidden;
        let d_z = config.latent_dim;
        let d_e = config.embedding_dim;
        Ok(Self {
            latent_dim: d_z,
            embedding_dim: d_e,
            num_classes: config.num_classes,
            logvar_clamp: config.logvar_clamp,
            enc_cell: GruCell::new(d_z, h, vb.pp("temporal.encoder.cell"))?,
            enc_head: candle_nn::linear(h, 2 * d_e, vb.pp("temporal.encoder.head"))?,
            init: candle_nn::linear(d_e + config.num_classes, h, vb.pp("temporal.decoder.init"))?,
            dec_cell: GruCell::new(d_z, h, vb.pp("temporal.decoder.cell"))?,
            dec_head: candle_nn::linear(h, d_z, vb.pp("temporal.decoder.head"))?,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// `(b, g, d_z)` or `(g, d_z)` trajectories to embedding posteriors
    /// `(b, d_e)` (or `(d_e)`).
    pub fn embed(&self, z: &Tensor) -> Result<GaussianParams> {
        let (zb, single) = match z.rank() {
            2 => (z.unsqueeze(0)?, true),
            3 => (z.clone(), false),
            _ => return Err(shape_err(format!("expected (g, d_z) trajectory, got {:?}", z.dims()))),
        };
        let (b, g, d_z) = zb.dims3()?;
        if d_z != self.latent_dim || g == 0 {
            return Err(shape_err(format!(
                "trajectory {:?} does not match latent dim {}",
                z.dims(),
                self.latent_dim
            )));
        }
        let mut h = Tensor::zeros((b, self.enc_cell.hidden_size()), zb.dtype(), zb.device())?;
        for t in 0..g {
            h = self.enc_cell.step(&zb.narrow(1, t, 1)?.squeeze(1)?, &h)?;
        }
        let out = self.enc_head.forward(&h)?;
        let d_e = self.embedding_dim;
        let mu = out.narrow(D::Minus1, 0, d_e)?;
        let logvar = out
            .narrow(D::Minus1, d_e, d_e)?
            .clamp(-self.logvar_clamp, self.logvar_clamp)?;
        if single {
            GaussianParams::new(mu.squeeze(0)?, logvar.squeeze(0)?)
        } else {
            GaussianParams::new(mu, logvar)
        }
    }

    /// `(b, d_e)` embeddings to `(b, g, d_z)` trajectories.
    pub fn decode(&self, e: &Tensor, condition: Option<&[usize]>, g: usize) -> Result<Tensor> {
        if g == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let (b, d_e) = e.dims2()?;
        if d_e != self.embedding_dim {
            return Err(shape_err(format!(
                "embedding dim {d_e} != model embedding dim {}",
                self.embedding_dim
            )));
        }
        let input = match (self.num_classes, condition) {
            (0, None) => e.clone(),
            (0, Some(_)) => return Err(Error::UnexpectedCondition),
            (n, None) => return Err(Error::MissingCondition(n)),
            (n, Some(labels)) => {
                if labels.len() != b {
                    return Err(shape_err(format!("{} conditions for batch of {b}", labels.len())));
                }
                Tensor::cat(&[e, &one_hot(labels, n, e.dtype(), e.device())?], D::Minus1)?
            }
        };
        let mut h = self.init.forward(&input)?.tanh()?;
        let mut x = Tensor::zeros((b, self.latent_dim), e.dtype(), e.device())?;
        let mut steps = Vec::with_capacity(g);
        for _ in 0..g {
            h = self.dec_cell.step(&x, &h)?;
            x = self.dec_head.forward(&h)?;
            steps.push(x.unsqueeze(1)?);
        }
        Ok(Tensor::cat(&steps, 1)?)
    }

    pub fn embed_sequence(&self, z: &LatentSeries) -> Result<(Vec<f32>, Vec<f32>)> {
        let p = self.embed(z.tensor())?;
        Ok((
            p.mu.to_dtype(DType::F32)?.to_vec1()?,
            p.sigma()?.to_dtype(DType::F32)?.to_vec1()?,
        ))
    }

    pub fn decode_sequence(
        &self,
        e: &SequenceEmbedding,
        condition: Option<usize>,
        g: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<LatentSeries> {
        let et = e.to_tensor(dtype, device)?.unsqueeze(0)?;
        let cond = condition.map(|c| [c]);
        let z = self.decode(&et, cond.as_ref().map(|c| c.as_slice()), g)?;
        Ok(LatentSeries(z.squeeze(0)?))
    }
}
