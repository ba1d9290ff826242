//! Command-line front end.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};
use ngs_core::audio::{read_wav, resample_integer, write_wav};
use ngs_core::corpus::{build_manifest_with_split, SplitKind};
use ngs_core::synthesis::{self, PathSpec};
use ngs_core::temporal::sample_prior;
use ngs_core::training::{self, format_table, EvalReport};
use ngs_core::{
    CorpusManifest, GrainConfig, GranularModel, ModelConfig, SequenceEmbedding, SpectralLossConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::service::{self, ServiceConfig, CHECKPOINT_ENV};

#[derive(Debug, Parser)]
#[command(name = "ngs", version, about = "Neural granular sound synthesis")]
pub struct Cli {
    /// JSON run configuration (grain, model, train and loss sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Checkpoint directory; defaults to $NGS_CHECKPOINT.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a directory of WAV files into a corpus manifest.
    Extract {
        #[arg(long)]
        root: PathBuf,
        /// Comma-separated category names; defaults to the sorted subdirectory names.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long, default_value_t = 0.0)]
        test_fraction: f64,
    },
    /// Train the grain VAE and then the sequence model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Grain-stage step count, overriding the epoch budget.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        temporal_steps: Option<u64>,
    },
    /// Spectral reconstruction scores of a checkpoint.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// One-shot sample from the embedding prior.
    Sample {
        /// Category name or index (conditional models only).
        #[arg(long = "class")]
        class: Option<String>,
    },
    /// Encode a sound and decode it through the model.
    Resynth {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "class")]
        class: Option<String>,
        /// Cross-fade length in samples.
        #[arg(long)]
        fade: Option<usize>,
    },
    /// Render a latent path described by a JSON spec.
    Path {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "class")]
        class: Option<String>,
    },
    /// Decode an interpolation between two sequence embeddings.
    Interp {
        #[arg(long)]
        alpha: f32,
        /// Prior seed of the first embedding.
        #[arg(long)]
        e1_seed: Option<u64>,
        #[arg(long)]
        e2_seed: Option<u64>,
        /// JSON file with an explicit embedding vector.
        #[arg(long)]
        e1: Option<PathBuf>,
        #[arg(long)]
        e2: Option<PathBuf>,
        #[arg(long = "class")]
        class: Option<String>,
    },
    /// Run the HTTP/WebSocket inference service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8750")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 2)]
        max_renders: usize,
    },
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Grain geometry used by `extract`; training takes it from the manifest.
    pub grain: Option<GrainConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Defaults to windows from the smallest size up to the grain size.
    pub loss: Option<SpectralLossConfig>,
    /// Condition the decoder on the manifest's categories.
    pub conditional: bool,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

impl Cli {
    fn checkpoint(&self) -> anyhow::Result<PathBuf> {
        self.checkpoint
            .clone()
            .or_else(|| std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from))
            .ok_or_else(|| anyhow!("no checkpoint: pass --checkpoint or set {CHECKPOINT_ENV}"))
    }

    fn out(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn load_model(dir: &Path) -> anyhow::Result<GranularModel> {
    Ok(GranularModel::load(dir, DType::F32, &Device::Cpu)?)
}

fn resolve_class(model: &GranularModel, class: &Option<String>) -> anyhow::Result<Option<usize>> {
    Ok(match class {
        None => None,
        Some(c) => match c.parse::<usize>() {
            Ok(i) => Some(i),
            Err(_) => Some(model.config.label_index(c)?),
        },
    })
}

fn write_out(path: &Path, samples: &[f32], model: &GranularModel) -> anyhow::Result<()> {
    write_wav(path, samples, model.config.grain.sample_rate)?;
    println!(
        "{}",
        serde_json::json!({
            "out": path.display().to_string(),
            "samples": samples.len(),
            "sample_rate": model.config.grain.sample_rate,
        })
    );
    Ok(())
}

fn read_embedding(path: &Path) -> anyhow::Result<SequenceEmbedding> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Vec<f32> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(SequenceEmbedding(v))
}

pub fn print_report(report: &EvalReport) {
    print!("{}", format_table(std::slice::from_ref(report)));
    for item in &report.items {
        println!("  {:<40} RMSE {:>10.4}  LSD {:>8.4}", item.source_id, item.rmse, item.lsd);
    }
    println!("definitions: {}", report.definitions);
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let run_config = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Extract {
            root,
            labels,
            test_fraction,
        } => {
            let grain = run_config.grain.clone().unwrap_or_default();
            let schema = match labels {
                Some(l) => l.clone(),
                None => subdirectory_names(root)?,
            };
            let manifest = build_manifest_with_split(root, &schema, &grain, *test_fraction)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("manifest.json"));
            manifest.save(&out)?;
            for w in &manifest.warnings {
                eprintln!("{}", serde_json::json!({ "warning": w }));
            }
            println!(
                "{}",
                serde_json::json!({
                    "out": out.display().to_string(),
                    "entries": manifest.entries.len(),
                    "train": manifest.split.train.len(),
                    "test": manifest.split.test.len(),
                    "warnings": manifest.warnings.len(),
                    "labels": manifest.label_schema,
                })
            );
        }
        Command::Train {
            manifest,
            steps,
            temporal_steps,
        } => {
            let manifest = CorpusManifest::load(manifest)?;
            let mut train = run_config.train.clone();
            if let Some(s) = cli.seed {
                train.seed = s;
            }
            if let Some(s) = steps {
                train.max_steps = Some(*s);
            }
            if let Some(s) = temporal_steps {
                train.temporal_steps = *s;
            }
            let mut model = run_config.model.clone();
            model.num_classes = if run_config.conditional {
                manifest.label_schema.len()
            } else {
                0
            };
            let loss = run_config
                .loss
                .clone()
                .unwrap_or_else(|| SpectralLossConfig::for_grain(manifest.config.grain_size, manifest.config.sample_rate));
            let dir = cli.checkpoint()?;
            training::train(&manifest, &train, &model, &loss, &dir, |r| {
                if r.step % 100 == 0 || r.skipped.is_some() {
                    eprintln!("{}", serde_json::to_string(r).unwrap_or_default());
                }
            })?;
            println!("{}", serde_json::json!({ "checkpoint": dir.display().to_string() }));
        }
        Command::Eval { manifest, split, json } => {
            let manifest = CorpusManifest::load(manifest)?;
            let split = match split {
                SplitArg::Train => SplitKind::Train,
                SplitArg::Test => SplitKind::Test,
            };
            let report = training::evaluate_checkpoint(&manifest, cli.checkpoint()?, split)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print_report(&report);
            }
        }
        Command::Sample { class } => {
            let model = load_model(&cli.checkpoint()?)?;
            let condition = resolve_class(&model, class)?;
            let wave = match condition {
                Some(c) => synthesis::conditional_sample(&model, c, cli.seed())?,
                None => synthesis::sample(&model, None, cli.seed())?,
            };
            write_out(cli.out()?, &wave, &model)?;
        }
        Command::Resynth { input, class, fade } => {
            let model = load_model(&cli.checkpoint()?)?;
            let condition = resolve_class(&model, class)?;
            let audio = resample_integer(&read_wav(input)?, model.config.grain.sample_rate)?;
            let wave = synthesis::resynthesize(&audio.samples, &model, condition, *fade, cli.seed())?;
            write_out(cli.out()?, &wave, &model)?;
        }
        Command::Path { spec, class } => {
            let model = load_model(&cli.checkpoint()?)?;
            let condition = resolve_class(&model, class)?;
            let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: PathSpec = serde_json::from_str(&text).map_err(ngs_core::Error::from)?;
            let wave = synthesis::free_path(&spec, &model, condition, cli.seed())?;
            write_out(cli.out()?, &wave, &model)?;
        }
        Command::Interp {
            alpha,
            e1_seed,
            e2_seed,
            e1,
            e2,
            class,
        } => {
            let model = load_model(&cli.checkpoint()?)?;
            let condition = resolve_class(&model, class)?;
            let d_e = model.config.model.embedding_dim;
            let pick = |file: &Option<PathBuf>, seed: Option<u64>, name: &str| -> anyhow::Result<SequenceEmbedding> {
                match (file, seed) {
                    (Some(f), _) => read_embedding(f),
                    (None, Some(s)) => Ok(sample_prior(d_e, s)),
                    (None, None) => bail!("--{name} or --{name}-seed is required"),
                }
            };
            let a = pick(e1, *e1_seed, "e1")?;
            let b = pick(e2, *e2_seed, "e2")?;
            let seed = cli.seed.or(*e1_seed).unwrap_or(0);
            let wave = synthesis::interpolate_embeddings(&a, &b, *alpha, &model, condition, seed)?;
            write_out(cli.out()?, &wave, &model)?;
        }
        Command::Serve { bind, max_renders } => {
            let config = ServiceConfig {
                checkpoint: cli.checkpoint()?,
                bind: *bind,
                max_concurrent_renders: *max_renders,
                default_seed: cli.seed(),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(config))?;
        }
    }
    Ok(())
}

fn subdirectory_names(root: &Path) -> anyhow::Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

/// `{"error": kind, "detail": message}` for the last line of a failed run.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<ngs_core::Error>())
        .map_or("error", |e| e.kind());
    serde_json::json!({ "error": kind, "detail": format!("{err:#}") }).to_string()
}
