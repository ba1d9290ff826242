//! Optimization of the grain VAE and the sequence model, checkpointing and
//! spectral evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointConfig, GranularModel};
use crate::corpus::{Corpus, CorpusManifest, GrainSequence, SplitKind};
use crate::dsp::{stft_magnitude, SpectralLoss};
use crate::error::{Error, Result};
use crate::model::{kl_divergence, reparameterize, standard_normal_like, DecoderVariant, GrainVae, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::temporal::{sequence_kl, SequenceVae};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAINER_STATE: &str = "trainer_state.json";
pub const GRAIN_OPTIMIZER: &str = "optimizer.safetensors";
pub const TEMPORAL_OPTIMIZER: &str = "temporal_optimizer.safetensors";

/// Reference STFT for the evaluation metrics.
pub const EVAL_WINDOW: usize = 1024;
pub const EVAL_HOP: usize = 256;
/// Power floor inside the log of the spectral distance.
pub const LSD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta_target: f64,
    pub warmup_start_epoch: f64,
    pub warmup_ramp_epochs: f64,
    pub total_epochs: usize,
    /// Defaults to one pass over the train positions.
    pub steps_per_epoch: Option<usize>,
    /// Overrides `total_epochs * steps_per_epoch` when set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Period of per-term gradient norm diagnostics; 0 disables them.
    pub diagnostics_every: u64,
    pub temporal_steps: u64,
    pub temporal_learning_rate: f64,
    pub temporal_beta: f64,
    pub temporal_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 40,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta_target: 1e-4,
            warmup_start_epoch: 10.0,
            warmup_ramp_epochs: 20.0,
            total_epochs: 100,
            steps_per_epoch: None,
            max_steps: None,
            seed: 0,
            grad_clip: Some(5.0),
            checkpoint_every: 500,
            diagnostics_every: 0,
            temporal_steps: 1000,
            temporal_learning_rate: 1e-3,
            temporal_beta: 1e-4,
            temporal_batch_size: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.temporal_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.temporal_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.beta_target >= 0.0) || !(self.temporal_beta >= 0.0) {
            return bad("beta targets must be nonnegative");
        }
        if !(self.warmup_start_epoch >= 0.0) || !(self.warmup_ramp_epochs >= 0.0) {
            return bad("warm-up epochs must be nonnegative");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: self.grad_clip,
        }
    }

    pub fn steps_per_epoch(&self, corpus: &Corpus) -> u64 {
        let spe = self
            .steps_per_epoch
            .unwrap_or_else(|| corpus.positions(SplitKind::Train).len().div_ceil(self.batch_size));
        spe.max(1) as u64
    }

    pub fn total_steps(&self, steps_per_epoch: u64) -> u64 {
        self.max_steps.unwrap_or(self.total_epochs as u64 * steps_per_epoch)
    }
}

/// KL weight at a (possibly fractional) epoch: 0 before the warm-up start,
/// then a linear ramp to the target.
pub fn beta_schedule(epoch: f64, config: &TrainConfig) -> f64 {
    let start = config.warmup_start_epoch;
    let ramp = config.warmup_ramp_epochs;
    if epoch < start {
        0.0
    } else if ramp == 0.0 || epoch >= start + ramp {
        config.beta_target
    } else {
        config.beta_target * (epoch - start) / ramp
    }
}

/// splitmix64 finalizer, used to derive per-step seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Forward pass of the grain objective. Returns `(rec, kl, total)` tensors.
pub fn grain_objective(
    model: &GrainVae,
    loss: &SpectralLoss,
    grains: &Tensor,
    labels: Option<&[usize]>,
    beta: f64,
    seed: u64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, g, _) = grains.dims3()?;
    let params = model.encode(grains)?;
    let eps = standard_normal_like(&params.mu, mix_seed(seed, 1))?;
    let z = reparameterize(&params, &eps)?;
    let noise = model.noise(b, g, mix_seed(seed, 2))?;
    let x_hat = model.decode_with_noise(&z.0, labels, &noise)?;
    let x = model.target_waveform(grains)?;
    let rec = loss.loss(&x, &x_hat)?;
    let kl = kl_divergence(&params)?;
    let total = if beta == 0.0 { rec.clone() } else { (&rec + (&kl * beta)?)? };
    Ok((rec, kl, total))
}

/// One optimizer update on `grains` `(b, g, d_x)`. A non-finite loss or
/// gradient leaves the weights untouched and returns [`Error::NonFinite`].
pub fn train_step(
    model: &GrainVae,
    optimizer: &mut Adam,
    loss: &SpectralLoss,
    grains: &Tensor,
    labels: Option<&[usize]>,
    beta: f64,
    seed: u64,
) -> Result<StepResult> {
    let (rec, kl, total) = grain_objective(model, loss, grains, labels, beta, seed)?;
    let breakdown = LossBreakdown {
        reconstruction: scalar(&rec)?,
        kl: scalar(&kl)?,
        total: scalar(&total)?,
    };
    if ![breakdown.reconstruction, breakdown.kl, breakdown.total]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite {
            step: optimizer.step_count(),
            detail: format!(
                "rec={} kl={} total={}",
                breakdown.reconstruction, breakdown.kl, breakdown.total
            ),
        });
    }
    let stats = optimizer.apply(&total.backward()?)?;
    Ok(StepResult {
        loss: breakdown,
        grad_norm: stats.grad_norm,
    })
}

/// Separate gradient norms of the reconstruction and KL terms.
pub fn term_grad_norms(
    model: &GrainVae,
    optimizer: &Adam,
    loss: &SpectralLoss,
    grains: &Tensor,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<(f64, f64)> {
    let (rec, kl, _) = grain_objective(model, loss, grains, labels, 0.0, seed)?;
    Ok((
        optimizer.grad_norm(&rec.backward()?)?,
        optimizer.grad_norm(&kl.backward()?)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Grain,
    Temporal,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: u64,
    pub epoch: f64,
    pub beta: f64,
    pub rec: Option<f64>,
    pub kl: Option<f64>,
    pub total: Option<f64>,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec_grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let file = File::open(path)?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    grain_step: u64,
    temporal_step: u64,
}

/// Owns the model, both optimizers and the checkpoint directory.
pub struct Trainer {
    pub model: GranularModel,
    pub config: TrainConfig,
    loss: SpectralLoss,
    grain_opt: Adam,
    temporal_opt: Adam,
    state: TrainerState,
    steps_per_epoch: u64,
    dir: Option<PathBuf>,
    log: Option<File>,
    trajectories: Option<Vec<(Tensor, Option<usize>)>>,
}

impl Trainer {
    pub fn new(model: GranularModel, config: TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        config.validate()?;
        let loss = SpectralLoss::new(&model.config.loss, model.dtype(), model.device())?;
        let grain_opt = Adam::new(model.grain_vars(), config.adam(config.learning_rate))?;
        let temporal_opt = Adam::new(model.temporal_vars(), config.adam(config.temporal_learning_rate))?;
        Ok(Self {
            model,
            config,
            loss,
            grain_opt,
            temporal_opt,
            state: TrainerState::default(),
            steps_per_epoch: steps_per_epoch.max(1),
            dir: None,
            log: None,
            trajectories: None,
        })
    }

    /// Starts a run in `dir`, or resumes the one already there.
    pub fn open(
        dir: impl AsRef<Path>,
        config: CheckpointConfig,
        train: TrainConfig,
        corpus: &Corpus,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let spe = train.steps_per_epoch(corpus);
        let state_path = dir.join(TRAINER_STATE);
        let mut trainer = if state_path.exists() {
            let model = GranularModel::load(&dir, dtype, device)?;
            if model.config != config {
                return Err(Error::Checkpoint {
                    path: dir.clone(),
                    detail: "existing checkpoint was trained with a different configuration".into(),
                });
            }
            let mut t = Self::new(model, train, spe)?;
            t.state = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
            if t.state.grain_step > 0 {
                t.grain_opt.load(dir.join(GRAIN_OPTIMIZER))?;
            }
            if t.state.temporal_step > 0 {
                t.temporal_opt.load(dir.join(TEMPORAL_OPTIMIZER))?;
            }
            t
        } else {
            let model = GranularModel::new(config, train.seed, dtype, device)?;
            Self::new(model, train, spe)?
        };
        fs::create_dir_all(&dir)?;
        trainer.truncate_log(&dir.join(TRAIN_LOG))?;
        trainer.log = Some(OpenOptions::new().create(true).append(true).open(dir.join(TRAIN_LOG))?);
        trainer.dir = Some(dir);
        Ok(trainer)
    }

    /// Drops log lines written after the checkpoint being resumed.
    fn truncate_log(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Ok(());
        }
        let keep: Vec<LogRecord> = read_log(path)?
            .into_iter()
            .filter(|r| match r.stage {
                Stage::Grain => r.step <= self.state.grain_step,
                Stage::Temporal => r.step <= self.state.temporal_step,
            })
            .collect();
        let mut out = String::new();
        for r in keep {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn grain_step(&self) -> u64 {
        self.state.grain_step
    }

    pub fn temporal_step(&self) -> u64 {
        self.state.temporal_step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn loss_fn(&self) -> &SpectralLoss {
        &self.loss
    }

    pub fn grain_optimizer(&self) -> &Adam {
        &self.grain_opt
    }

    fn write_log(&mut self, record: &LogRecord) -> Result<()> {
        if let Some(f) = self.log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        self.model.save(dir)?;
        if self.state.grain_step > 0 {
            self.grain_opt.save(dir.join(GRAIN_OPTIMIZER))?;
        }
        if self.state.temporal_step > 0 {
            self.temporal_opt.save(dir.join(TEMPORAL_OPTIMIZER))?;
        }
        fs::write(dir.join(TRAINER_STATE), serde_json::to_string_pretty(&self.state)?)?;
        Ok(())
    }

    fn labels(&self, labels: &[Option<usize>]) -> Result<Option<Vec<usize>>> {
        if !self.model.is_conditional() {
            return Ok(None);
        }
        labels
            .iter()
            .map(|l| l.ok_or(Error::MissingCondition(self.model.config.model.num_classes)))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Draws the next batch and applies one grain-stage update.
    pub fn grain_step_once(&mut self, corpus: &Corpus) -> Result<LogRecord> {
        let started = Instant::now();
        let step = self.state.grain_step;
        let seed = mix_seed(self.config.seed, step);
        let batch = corpus.sample_batch(self.config.batch_size, seed)?;
        let grains = batch.to_tensor(self.model.dtype(), self.model.device())?;
        let labels = self.labels(&batch.labels)?;
        let epoch = step as f64 / self.steps_per_epoch as f64;
        let beta = beta_schedule(epoch, &self.config);
        let diag = self.config.diagnostics_every > 0 && step % self.config.diagnostics_every == 0;
        let (rec_gn, kl_gn) = if diag {
            let (r, k) = term_grad_norms(
                &self.model.grain,
                &self.grain_opt,
                &self.loss,
                &grains,
                labels.as_deref(),
                seed,
            )?;
            (Some(r), Some(k))
        } else {
            (None, None)
        };
        let result = train_step(
            &self.model.grain,
            &mut self.grain_opt,
            &self.loss,
            &grains,
            labels.as_deref(),
            beta,
            seed,
        );
        self.state.grain_step += 1;
        let mut record = LogRecord {
            stage: Stage::Grain,
            step: self.state.grain_step,
            epoch,
            beta,
            rec: None,
            kl: None,
            total: None,
            wall_ms: 0.0,
            grad_norm: None,
            rec_grad_norm: rec_gn,
            kl_grad_norm: kl_gn,
            skipped: None,
        };
        match result {
            Ok(r) => {
                record.rec = Some(r.loss.reconstruction);
                record.kl = Some(r.loss.kl);
                record.total = Some(r.loss.total);
                record.grad_norm = Some(r.grad_norm);
            }
            Err(e @ Error::NonFinite { .. }) => record.skipped = Some(e.to_string()),
            Err(e) => return Err(e),
        }
        record.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        self.write_log(&record)?;
        Ok(record)
    }

    /// Runs the grain stage up to `total` steps, checkpointing on the way.
    pub fn run_grain(&mut self, corpus: &Corpus, total: u64, mut on_record: impl FnMut(&LogRecord)) -> Result<()> {
        while self.state.grain_step < total {
            let record = self.grain_step_once(corpus)?;
            on_record(&record);
            let every = self.config.checkpoint_every;
            if every > 0 && self.state.grain_step % every == 0 && self.state.grain_step < total {
                self.save()?;
            }
        }
        self.save()
    }

    /// Posterior-mean trajectories of every train source, encoded once with
    /// the frozen grain model.
    fn cache_trajectories(&mut self, corpus: &Corpus) -> Result<()> {
        if self.trajectories.is_some() {
            return Ok(());
        }
        let mut out = Vec::new();
        for &s in &corpus.split.train {
            let seq = corpus.source_grains(s);
            let mu = encode_means(&self.model.grain, &seq)?.detach();
            out.push((mu, seq.label));
        }
        self.trajectories = Some(out);
        Ok(())
    }

    /// `(b, g, d_z)` targets at random hop-aligned windows of the cached trajectories.
    fn trajectory_batch(&self, corpus: &Corpus, seed: u64) -> Result<(Tensor, Vec<Option<usize>>)> {
        let cached = self.trajectories.as_ref().expect("cached before sampling");
        let g = corpus.config.seq_len;
        let positions: Vec<(usize, usize)> = cached
            .iter()
            .enumerate()
            .flat_map(|(i, (mu, _))| (0..mu.dims()[0] + 1 - g).map(move |k| (i, k)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut windows = Vec::with_capacity(self.config.temporal_batch_size);
        let mut labels = Vec::with_capacity(self.config.temporal_batch_size);
        for _ in 0..self.config.temporal_batch_size {
            let (i, k) = positions[rng.random_range(0..positions.len())];
            windows.push(cached[i].0.narrow(0, k, g)?);
            labels.push(cached[i].1);
        }
        Ok((Tensor::stack(&windows, 0)?, labels))
    }

    /// One update of the sequence model on encoded trajectories.
    pub fn temporal_step_once(&mut self, corpus: &Corpus) -> Result<LogRecord> {
        let started = Instant::now();
        self.cache_trajectories(corpus)?;
        let step = self.state.temporal_step;
        let seed = mix_seed(self.config.seed ^ 0x7e4d, step);
        let (target, labels) = self.trajectory_batch(corpus, seed)?;
        let labels = self.labels(&labels)?;
        let beta = self.config.temporal_beta;
        let (rec, kl, total) = temporal_objective(&self.model.temporal, &target, labels.as_deref(), beta, seed)?;
        let values = [scalar(&rec)?, scalar(&kl)?, scalar(&total)?];
        self.state.temporal_step += 1;
        let mut record = LogRecord {
            stage: Stage::Temporal,
            step: self.state.temporal_step,
            epoch: 0.0,
            beta,
            rec: None,
            kl: None,
            total: None,
            wall_ms: 0.0,
            grad_norm: None,
            rec_grad_norm: None,
            kl_grad_norm: None,
            skipped: None,
        };
        if values.iter().all(|v| v.is_finite()) {
            match self.temporal_opt.apply(&total.backward()?) {
                Ok(stats) => {
                    record.rec = Some(values[0]);
                    record.kl = Some(values[1]);
                    record.total = Some(values[2]);
                    record.grad_norm = Some(stats.grad_norm);
                }
                Err(e @ Error::NonFinite { .. }) => record.skipped = Some(e.to_string()),
                Err(e) => return Err(e),
            }
        } else {
            record.skipped = Some(format!("non-finite loss rec={} kl={} total={}", values[0], values[1], values[2]));
        }
        record.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        self.write_log(&record)?;
        Ok(record)
    }

    pub fn run_temporal(&mut self, corpus: &Corpus, total: u64, mut on_record: impl FnMut(&LogRecord)) -> Result<()> {
        while self.state.temporal_step < total {
            let record = self.temporal_step_once(corpus)?;
            on_record(&record);
            let every = self.config.checkpoint_every;
            if every > 0 && self.state.temporal_step % every == 0 && self.state.temporal_step < total {
                self.save()?;
            }
        }
        self.save()
    }

    /// Both stages: the grain VAE first, then the sequence model on its frozen encodings.
    pub fn run(&mut self, corpus: &Corpus, mut on_record: impl FnMut(&LogRecord)) -> Result<()> {
        let total = self.config.total_steps(self.steps_per_epoch);
        self.run_grain(corpus, total, &mut on_record)?;
        let temporal = if total == 0 { 0 } else { self.config.temporal_steps };
        self.run_temporal(corpus, temporal, &mut on_record)
    }
}

/// Reconstruction (squared error summed over the trajectory, averaged over
/// the batch), KL and total for the sequence model.
pub fn temporal_objective(
    model: &SequenceVae,
    target: &Tensor,
    labels: Option<&[usize]>,
    beta: f64,
    seed: u64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, g, _) = target.dims3()?;
    let params = model.embed(target)?;
    let eps = standard_normal_like(&params.mu, seed)?;
    let e = (&params.mu + (eps * params.sigma()?)?)?;
    let decoded = model.decode(&e, labels, g)?;
    let rec = (decoded - target)?.sqr()?.sum((1, 2))?.mean_all()?;
    let kl = sequence_kl(&params)?;
    let total = if beta == 0.0 { rec.clone() } else { (&rec + (&kl * beta)?)? };
    Ok((rec, kl, total))
}

/// Posterior means `(g, d_z)` of a sequence, encoded in chunks.
pub fn encode_means(model: &GrainVae, seq: &GrainSequence) -> Result<Tensor> {
    let grains = seq.to_tensor(model.dtype(), model.device())?;
    let n = grains.dims()[0];
    let chunk = 256;
    let parts = (0..n)
        .step_by(chunk)
        .map(|s| Ok(model.encode(&grains.narrow(0, s, chunk.min(n - s))?)?.mu))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains on `manifest` and writes the checkpoint to `dir`, resuming if a
/// run is already there.
pub fn train(
    manifest: &CorpusManifest,
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    loss: &crate::dsp::SpectralLossConfig,
    dir: impl AsRef<Path>,
    on_record: impl FnMut(&LogRecord),
) -> Result<GranularModel> {
    let corpus = Corpus::load(manifest)?;
    let mut model_config = model_config.clone();
    if model_config.num_classes > 0 {
        model_config.num_classes = manifest.label_schema.len();
    }
    let config = CheckpointConfig::new(
        manifest.config.clone(),
        model_config,
        manifest.label_schema.clone(),
        loss.clone(),
    );
    let mut trainer = Trainer::open(dir, config, train_config.clone(), &corpus, DType::F32, &Device::Cpu)?;
    trainer.run(&corpus, on_record)?;
    Ok(trainer.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub source_id: String,
    pub rmse: f64,
    pub lsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: DecoderVariant,
    pub rmse: f64,
    pub lsd: f64,
    pub items: Vec<ItemScore>,
    pub seconds_per_iteration: Option<f64>,
    pub definitions: String,
}

pub fn metric_definitions() -> String {
    format!(
        "RMSE: root mean square of |STFT(x)| - |STFT(x_hat)| over all frames and bins; \
         LSD: mean over frames of the root mean square over bins of \
         log10({LSD_FLOOR:e} + |STFT(x)|^2) - log10({LSD_FLOOR:e} + |STFT(x_hat)|^2); \
         STFT: periodic Hann, window {EVAL_WINDOW}, hop {EVAL_HOP} (window shrinks to the \
         largest power of two not exceeding shorter signals); x is the overlap-added \
         windowed grains of the offset-0 sequence, x_hat its decoding from posterior means"
    )
}

/// Spectral RMSE and LSD between two equal-length signals.
pub fn spectral_metrics(x: &[f32], x_hat: &[f32]) -> Result<(f64, f64)> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!("length mismatch: {} vs {}", x.len(), x_hat.len())));
    }
    let mut window = EVAL_WINDOW;
    while window > x.len() && window > 2 {
        window /= 2;
    }
    let hop = (EVAL_HOP * window / EVAL_WINDOW).max(1);
    let a = stft_magnitude(x, window, hop);
    let b = stft_magnitude(x_hat, window, hop);
    if a.is_empty() {
        return Err(Error::Shape(format!("signal of {} samples is too short", x.len())));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut lsd = 0.0;
    for (fa, fb) in a.iter().zip(&b) {
        let mut frame = 0.0;
        for (ma, mb) in fa.iter().zip(fb) {
            sq += (ma - mb).powi(2);
            let d = (LSD_FLOOR + ma * ma).log10() - (LSD_FLOOR + mb * mb).log10();
            frame += d * d;
        }
        count += fa.len();
        lsd += (frame / fa.len() as f64).sqrt();
    }
    Ok(((sq / count as f64).sqrt(), lsd / a.len() as f64))
}

/// Mean grain-stage wall time per step, in seconds, from a training log.
pub fn seconds_per_iteration(log: &[LogRecord]) -> Option<f64> {
    let times: Vec<f64> = log.iter().filter(|r| r.stage == Stage::Grain).map(|r| r.wall_ms).collect();
    (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64 / 1e3)
}

/// Scores reconstructions of the offset-0 sequence of every source in `split`.
pub fn evaluate(corpus: &Corpus, model: &GranularModel, split: SplitKind, noise_seed: u64) -> Result<EvalReport> {
    let sequences = corpus.eval_sequences(split);
    if sequences.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    let grain = &model.grain;
    let mut items = Vec::with_capacity(sequences.len());
    for seq in &sequences {
        let grains = seq.to_tensor(grain.dtype(), grain.device())?;
        let mu = grain.encode(&grains)?.mu;
        let cond = match (model.is_conditional(), seq.label) {
            (false, _) => None,
            (true, Some(l)) => Some([l]),
            (true, None) => return Err(Error::MissingCondition(model.config.model.num_classes)),
        };
        let x_hat = grain.decode(&mu, cond.as_ref().map(|c| c.as_slice()), noise_seed)?;
        let x = grain.target_waveform(&grains)?;
        let x: Vec<f32> = x.to_dtype(DType::F32)?.to_vec1()?;
        let x_hat: Vec<f32> = x_hat.to_dtype(DType::F32)?.to_vec1()?;
        let (rmse, lsd) = spectral_metrics(&x, &x_hat)?;
        items.push(ItemScore {
            source_id: seq.source_id.clone(),
            rmse,
            lsd,
        });
    }
    let n = items.len() as f64;
    Ok(EvalReport {
        variant: model.config.model.variant,
        rmse: items.iter().map(|i| i.rmse).sum::<f64>() / n,
        lsd: items.iter().map(|i| i.lsd).sum::<f64>() / n,
        items,
        seconds_per_iteration: None,
        definitions: metric_definitions(),
    })
}

/// Evaluates a checkpoint directory, attaching the timing from its log.
pub fn evaluate_checkpoint(manifest: &CorpusManifest, dir: impl AsRef<Path>, split: SplitKind) -> Result<EvalReport> {
    let dir = dir.as_ref();
    let corpus = Corpus::load(manifest)?;
    let model = GranularModel::load(dir, DType::F32, &Device::Cpu)?;
    let mut report = evaluate(&corpus, &model, split, 0)?;
    let log = dir.join(TRAIN_LOG);
    if log.exists() {
        report.seconds_per_iteration = seconds_per_iteration(&read_log(log)?);
    }
    Ok(report)
}

/// Table rows: one per report, with RMSE, LSD and sec/iter columns.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<10} {:>12} {:>12} {:>10}\n", "model", "RMSE", "LSD", "sec/iter");
    for r in reports {
        let spi = r
            .seconds_per_iteration
            .map_or_else(|| "-".to_string(), |s| format!("{s:.3}"));
        out.push_str(&format!(
            "{:<10} {:>12.4} {:>12.4} {:>10}\n",
            r.variant.short_name(),
            r.rmse,
            r.lsd,
            spi
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    pub report: EvalReport,
    pub parameters: usize,
    pub first_rec: f64,
    pub final_rec: f64,
    pub diverged: bool,
}

/// Trains each decoder variant with identical data, seeds and schedule, then
/// evaluates it on `split`.
pub fn compare_variants(
    corpus: &Corpus,
    base: &CheckpointConfig,
    train: &TrainConfig,
    steps: u64,
    variants: &[DecoderVariant],
    split: SplitKind,
) -> Result<Vec<VariantRun>> {
    let mut runs = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut config = base.clone();
        config.model.variant = variant;
        let model = GranularModel::new(config, train.seed, DType::F32, &Device::Cpu)?;
        let parameters = model.grain_parameter_count();
        let mut trainer = Trainer::new(model, train.clone(), train.steps_per_epoch(corpus))?;
        let mut records = Vec::new();
        trainer.run_grain(corpus, steps, |r| records.push(r.clone()))?;
        let recs: Vec<f64> = records.iter().filter_map(|r| r.rec).collect();
        let diverged = recs.len() != records.len() || recs.iter().any(|v| !v.is_finite());
        let mut report = evaluate(corpus, &trainer.model, split, 0)?;
        report.seconds_per_iteration = seconds_per_iteration(&records);
        runs.push(VariantRun {
            report,
            parameters,
            first_rec: recs.first().copied().unwrap_or(f64::NAN),
            final_rec: recs.last().copied().unwrap_or(f64::NAN),
            diverged,
        });
    }
    Ok(runs)
}
