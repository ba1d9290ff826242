//! Generation: latent paths, analysis/resynthesis, one-shot sampling,
//! embedding interpolation and cross-faded assembly.

use std::f64::consts::PI;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::peak_normalize;
use crate::checkpoint::GranularModel;
use crate::corpus::NORMALIZE_PEAK;
use crate::error::{Error, Result};
use crate::model::LatentSeries;
use crate::temporal::{sample_prior, SequenceEmbedding};
use crate::training::mix_seed;

/// Monotone warp of the path parameter over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepModulation {
    /// `t^exponent`.
    Power { exponent: f64 },
    /// `3t^2 - 2t^3`.
    Smoothstep,
    /// Piecewise-linear table sampled evenly over `[0, 1]`.
    Table { values: Vec<f64> },
}

impl StepModulation {
    pub fn validate(&self) -> Result<()> {
        match self {
            StepModulation::Power { exponent } if !(*exponent > 0.0) || !exponent.is_finite() => {
                Err(Error::PathSpec(format!("power exponent must be positive, got {exponent}")))
            }
            StepModulation::Table { values } => {
                if values.len() < 2 {
                    return Err(Error::PathSpec("modulation table needs at least 2 values".into()));
                }
                if values[0] != 0.0 || values[values.len() - 1] != 1.0 {
                    return Err(Error::PathSpec("modulation table must run from 0 to 1".into()));
                }
                if values.windows(2).any(|w| !(w[1] >= w[0])) {
                    return Err(Error::PathSpec("modulation table must be non-decreasing".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn warp(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self {
            StepModulation::Power { exponent } => t.powf(*exponent),
            StepModulation::Smoothstep => t * t * (3.0 - 2.0 * t),
            StepModulation::Table { values } => interp_table(values, t),
        }
    }
}

fn interp_table(values: &[f64], t: f64) -> f64 {
    let pos = t * (values.len() - 1) as f64;
    let i = (pos.floor() as usize).min(values.len() - 2);
    let frac = pos - i as f64;
    values[i] + (values[i + 1] - values[i]) * frac
}

fn default_turns() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    /// Straight line; missing endpoints are drawn from the latent prior.
    Linear {
        #[serde(default)]
        start: Option<Vec<f32>>,
        #[serde(default)]
        end: Option<Vec<f32>>,
    },
    /// Circle in the plane of two latent axes around `center`.
    Circle {
        #[serde(default)]
        center: Option<Vec<f32>>,
        radius: f64,
        #[serde(default)]
        axes: Option<[usize; 2]>,
        #[serde(default = "default_turns")]
        turns: f64,
        /// Closed paths end on their starting point.
        #[serde(default = "default_true")]
        closed: bool,
    },
    /// Like a circle, with the radius moving linearly to `radius_end`.
    Spiral {
        #[serde(default)]
        center: Option<Vec<f32>>,
        radius: f64,
        radius_end: f64,
        #[serde(default)]
        axes: Option<[usize; 2]>,
        #[serde(default = "default_turns")]
        turns: f64,
    },
    /// User control points, resampled piecewise-linearly.
    Custom { points: Vec<Vec<f32>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    #[serde(flatten)]
    pub kind: PathKind,
    pub num_points: usize,
    #[serde(default)]
    pub step_modulation: Option<StepModulation>,
}

impl PathSpec {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.num_points == 0 {
            return Err(Error::PathSpec("num_points must be at least 1".into()));
        }
        if let Some(m) = &self.step_modulation {
            m.validate()?;
        }
        let check_dim = |name: &str, v: &Option<Vec<f32>>| match v {
            Some(v) if v.len() != latent_dim => Err(Error::PathSpec(format!(
                "{name} has {} dimensions, model latent space has {latent_dim}",
                v.len()
            ))),
            _ => Ok(()),
        };
        let check_axes = |axes: &Option<[usize; 2]>| match axes {
            Some([a, b]) if *a >= latent_dim || *b >= latent_dim || a == b => Err(Error::PathSpec(format!(
                "axes {a}, {b} must be distinct and below {latent_dim}"
            ))),
            None if latent_dim < 2 => Err(Error::PathSpec("circular paths need at least 2 latent dimensions".into())),
            _ => Ok(()),
        };
        match &self.kind {
            PathKind::Linear { start, end } => {
                check_dim("start", start)?;
                check_dim("end", end)
            }
            PathKind::Circle {
                center,
                radius,
                axes,
                turns,
                ..
            } => {
                check_dim("center", center)?;
                check_axes(axes)?;
                if !radius.is_finite() || !turns.is_finite() {
                    return Err(Error::PathSpec("radius and turns must be finite".into()));
                }
                Ok(())
            }
            PathKind::Spiral {
                center,
                radius,
                radius_end,
                axes,
                turns,
            } => {
                check_dim("center", center)?;
                check_axes(axes)?;
                if !radius.is_finite() || !radius_end.is_finite() || !turns.is_finite() {
                    return Err(Error::PathSpec("radii and turns must be finite".into()));
                }
                Ok(())
            }
            PathKind::Custom { points } => {
                if points.is_empty() {
                    return Err(Error::PathSpec("custom path needs at least one point".into()));
                }
                if let Some(p) = points.iter().find(|p| p.len() != latent_dim) {
                    return Err(Error::PathSpec(format!(
                        "custom point has {} dimensions, model latent space has {latent_dim}",
                        p.len()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Path parameter of point `k`, after modulation.
    fn param(&self, k: usize, closed: bool) -> f64 {
        let n = self.num_points;
        let t = if n == 1 {
            0.0
        } else if closed {
            k as f64 / (n - 1) as f64
        } else {
            k as f64 / n as f64
        };
        match &self.step_modulation {
            Some(m) => m.warp(t),
            None => t,
        }
    }

    /// Latent points along the path; random endpoints come from `seed`.
    pub fn points(&self, latent_dim: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
        self.validate(latent_dim)?;
        let n = self.num_points;
        let zeros = vec![0.0f32; latent_dim];
        let ring = |center: &Option<Vec<f32>>, axes: &Option<[usize; 2]>, radius: &dyn Fn(f64) -> f64, turns: f64, closed: bool| {
            let c = center.clone().unwrap_or_else(|| zeros.clone());
            let [a, b] = axes.unwrap_or([0, 1]);
            (0..n)
                .map(|k| {
                    let u = self.param(k, closed);
                    let theta = 2.0 * PI * turns * u;
                    let r = radius(u);
                    let mut p = c.clone();
                    p[a] += (r * theta.cos()) as f32;
                    p[b] += (r * theta.sin()) as f32;
                    p
                })
                .collect::<Vec<_>>()
        };
        Ok(match &self.kind {
            PathKind::Linear { start, end } => {
                let start = start
                    .clone()
                    .unwrap_or_else(|| sample_prior(latent_dim, mix_seed(seed, 11)).0);
                let end = end
                    .clone()
                    .unwrap_or_else(|| sample_prior(latent_dim, mix_seed(seed, 12)).0);
                (0..n)
                    .map(|k| {
                        let u = self.param(k, true) as f32;
                        start.iter().zip(&end).map(|(a, b)| (1.0 - u) * a + u * b).collect()
                    })
                    .collect()
            }
            PathKind::Circle {
                center,
                radius,
                axes,
                turns,
                closed,
            } => {
                let mut pts = ring(center, axes, &|_| *radius, *turns, *closed);
                if *closed && n > 1 && turns.fract() == 0.0 {
                    pts[n - 1] = pts[0].clone();
                }
                pts
            }
            PathKind::Spiral {
                center,
                radius,
                radius_end,
                axes,
                turns,
            } => ring(center, axes, &|u| radius + (radius_end - radius) * u, *turns, true),
            PathKind::Custom { points } => (0..n)
                .map(|k| {
                    let u = self.param(k, true);
                    let m = points.len();
                    if m == 1 {
                        return points[0].clone();
                    }
                    let pos = u * (m - 1) as f64;
                    let i = (pos.floor() as usize).min(m - 2);
                    let f = (pos - i as f64) as f32;
                    points[i].iter().zip(&points[i + 1]).map(|(a, b)| a + (b - a) * f).collect()
                })
                .collect(),
        })
    }
}

fn condition_slice(model: &GranularModel, condition: Option<usize>) -> Result<Option<usize>> {
    match (model.is_conditional(), condition) {
        (false, Some(_)) => Err(Error::UnexpectedCondition),
        (true, None) => Err(Error::MissingCondition(model.config.model.num_classes)),
        (true, Some(c)) if c >= model.config.model.num_classes => Err(Error::Config(format!(
            "condition {c} out of range for {} categories",
            model.config.model.num_classes
        ))),
        _ => Ok(condition),
    }
}

fn to_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Samples in one decoded chunk of `g` grains.
pub fn chunk_len(model: &GranularModel) -> usize {
    model.config.grain.span(model.config.grain.seq_len)
}

/// Decodes `n x d_z` latent rows as one series of `n` grains.
pub fn decode_latents(model: &GranularModel, z: &LatentSeries, condition: Option<usize>, seed: u64) -> Result<Vec<f32>> {
    let condition = condition_slice(model, condition)?;
    let cond = condition.map(|c| [c]);
    let z = z.tensor().to_dtype(model.dtype())?;
    to_vec(&model.grain.decode(&z, cond.as_ref().map(|c| c.as_slice()), seed)?)
}

/// Decodes latent points in consecutive chunks of `g`, holding the last
/// point to fill the final chunk, and concatenates the chunk waveforms.
pub fn render_points(model: &GranularModel, points: &[Vec<f32>], condition: Option<usize>, seed: u64) -> Result<Vec<f32>> {
    let condition = condition_slice(model, condition)?;
    let g = model.config.grain.seq_len;
    let d_z = model.config.model.latent_dim;
    if points.is_empty() {
        return Err(Error::PathSpec("path has no points".into()));
    }
    if let Some(p) = points.iter().find(|p| p.len() != d_z) {
        return Err(Error::PathSpec(format!("point has {} dimensions, expected {d_z}", p.len())));
    }
    let chunks = points.len().div_ceil(g);
    let last = points.last().expect("non-empty");
    let flat: Vec<f32> = (0..chunks * g)
        .flat_map(|i| points.get(i).unwrap_or(last).iter().copied())
        .collect();
    let z = Tensor::from_vec(flat, (chunks, g, d_z), model.device())?.to_dtype(model.dtype())?;
    let cond: Option<Vec<usize>> = condition.map(|c| vec![c; chunks]);
    let wave = model.grain.decode(&z, cond.as_deref(), seed)?;
    to_vec(&wave)
}

/// Renders a latent path specification.
pub fn free_path(spec: &PathSpec, model: &GranularModel, condition: Option<usize>, seed: u64) -> Result<Vec<f32>> {
    let points = spec.points(model.config.model.latent_dim, seed)?;
    render_points(model, &points, condition, seed)
}

/// Joins segments with equal-power cross-fades of `fade` samples.
pub fn assemble_long(segments: &[Vec<f32>], fade: usize) -> Result<Vec<f32>> {
    match segments.len() {
        0 => return Ok(Vec::new()),
        1 => return Ok(segments[0].clone()),
        _ => {}
    }
    if let Some(s) = segments.iter().find(|s| s.len() < 2 * fade) {
        return Err(Error::Config(format!(
            "segment of {} samples is shorter than twice the fade of {fade}",
            s.len()
        )));
    }
    let total: usize = segments.iter().map(Vec::len).sum::<usize>() - (segments.len() - 1) * fade;
    let mut out = Vec::with_capacity(total);
    let gains: Vec<(f32, f32)> = (0..fade)
        .map(|j| {
            let x = PI / 2.0 * (j as f64 + 0.5) / fade as f64;
            (x.cos() as f32, x.sin() as f32)
        })
        .collect();
    out.extend_from_slice(&segments[0]);
    for seg in &segments[1..] {
        let base = out.len() - fade;
        for (j, &(fade_out, fade_in)) in gains.iter().enumerate() {
            out[base + j] = out[base + j] * fade_out + seg[j] * fade_in;
        }
        out.extend_from_slice(&seg[fade..]);
    }
    Ok(out)
}

/// Sample ranges `[start, end)` of the resynthesis segments of a padded
/// signal: full `g`-grain windows advancing by `chunk - fade`, with a short
/// remainder merged into the segment before it.
pub fn resynthesis_segments(padded: usize, chunk: usize, fade: usize, min_len: usize) -> Vec<(usize, usize)> {
    if padded <= chunk {
        return vec![(0, padded)];
    }
    let stride = chunk - fade;
    let mut bounds = Vec::new();
    let mut s = 0;
    loop {
        if s + chunk >= padded {
            bounds.push((s, padded));
            break;
        }
        bounds.push((s, s + chunk));
        s += stride;
    }
    let last = bounds[bounds.len() - 1];
    if bounds.len() > 1 && last.1 - last.0 < min_len.max(2 * fade) {
        bounds.pop();
        let n = bounds.len();
        bounds[n - 1].1 = padded;
    }
    bounds
}

/// Encodes `audio` with posterior means and decodes it again, in segments of
/// `g` grains joined by equal-power cross-fades of `fade` samples
/// (default `d_x / 2`). The output covers the input rounded up to the grain grid.
pub fn resynthesize(
    audio: &[f32],
    model: &GranularModel,
    condition: Option<usize>,
    fade: Option<usize>,
    seed: u64,
) -> Result<Vec<f32>> {
    let condition = condition_slice(model, condition)?;
    let grain = &model.config.grain;
    let (d_x, hop) = (grain.grain_size, grain.hop());
    if audio.len() < d_x {
        return Err(Error::SourceTooShort {
            len: audio.len(),
            min: d_x,
        });
    }
    let chunk = chunk_len(model);
    let fade = fade.unwrap_or(d_x / 2);
    if fade % hop != 0 || 2 * fade > chunk {
        return Err(Error::Config(format!(
            "fade of {fade} samples must be a multiple of the hop {hop} and at most half of {chunk}"
        )));
    }
    let mut samples = audio.to_vec();
    peak_normalize(&mut samples, NORMALIZE_PEAK);
    let n_grains = grain.grains_for(samples.len());
    let padded = grain.span(n_grains);
    samples.resize(padded, 0.0);
    let cond = condition.map(|c| [c]);
    let segments = resynthesis_segments(padded, chunk, fade, d_x)
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| {
            let k = (end - start - d_x) / hop + 1;
            let mut grains = Vec::with_capacity(k * d_x);
            for j in 0..k {
                grains.extend_from_slice(&samples[start + j * hop..start + j * hop + d_x]);
            }
            let grains = Tensor::from_vec(grains, (k, d_x), model.device())?.to_dtype(model.dtype())?;
            let mu = model.grain.encode(&grains)?.mu;
            let wave = model
                .grain
                .decode(&mu, cond.as_ref().map(|c| c.as_slice()), mix_seed(seed, i as u64))?;
            to_vec(&wave)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_long(&segments, fade)
}

/// Posterior means of every grain of `audio` (peak-normalized, last grain zero-padded).
pub fn analyze(audio: &[f32], model: &GranularModel) -> Result<LatentSeries> {
    let grain = &model.config.grain;
    let (d_x, hop) = (grain.grain_size, grain.hop());
    if audio.len() < d_x {
        return Err(Error::SourceTooShort {
            len: audio.len(),
            min: d_x,
        });
    }
    let mut samples = audio.to_vec();
    peak_normalize(&mut samples, NORMALIZE_PEAK);
    let k = grain.grains_for(samples.len());
    samples.resize(grain.span(k), 0.0);
    let mut grains = Vec::with_capacity(k * d_x);
    for j in 0..k {
        grains.extend_from_slice(&samples[j * hop..j * hop + d_x]);
    }
    let grains = Tensor::from_vec(grains, (k, d_x), model.device())?.to_dtype(model.dtype())?;
    Ok(LatentSeries(model.grain.encode(&grains)?.mu))
}

/// Unrolls an embedding to `g` latent points and decodes them.
pub fn decode_embedding(
    model: &GranularModel,
    e: &SequenceEmbedding,
    condition: Option<usize>,
    seed: u64,
) -> Result<Vec<f32>> {
    let condition = condition_slice(model, condition)?;
    if e.dim() != model.config.model.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding has {} dimensions, model expects {}",
            e.dim(),
            model.config.model.embedding_dim
        )));
    }
    let z = model.temporal.decode_sequence(
        e,
        condition,
        model.config.grain.seq_len,
        model.dtype(),
        model.device(),
    )?;
    let cond = condition.map(|c| [c]);
    to_vec(&model.grain.decode(z.tensor(), cond.as_ref().map(|c| c.as_slice()), seed)?)
}

/// Prior embedding from `seed`, unrolled and decoded with noise from `seed`.
pub fn sample(model: &GranularModel, condition: Option<usize>, seed: u64) -> Result<Vec<f32>> {
    let e = sample_prior(model.config.model.embedding_dim, seed);
    decode_embedding(model, &e, condition, seed)
}

/// One-shot sample of a category; only defined for conditional models.
pub fn conditional_sample(model: &GranularModel, condition: usize, seed: u64) -> Result<Vec<f32>> {
    if !model.is_conditional() {
        return Err(Error::UnexpectedCondition);
    }
    sample(model, Some(condition), seed)
}

/// Decodes `(1 - alpha) e1 + alpha e2`.
pub fn interpolate_embeddings(
    e1: &SequenceEmbedding,
    e2: &SequenceEmbedding,
    alpha: f32,
    model: &GranularModel,
    condition: Option<usize>,
    seed: u64,
) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let e = e1.lerp(e2, alpha)?;
    decode_embedding(model, &e, condition, seed)
}
