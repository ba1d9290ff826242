//! Corpus ingestion: WAV discovery, grain slicing, manifests and batching.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, peak_normalize, resample_integer};
use crate::error::{Error, Result};

/// Peak level every source is normalized to before slicing.
pub const NORMALIZE_PEAK: f32 = 0.9;

/// Slicing and synthesis geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrainConfig {
    /// Grain size `d_x` in samples (even).
    pub grain_size: usize,
    /// Fraction of a grain shared with its neighbour.
    pub overlap_ratio: f64,
    pub sample_rate: u32,
    /// Grains per training sequence (`g`).
    pub seq_len: usize,
}

impl Default for GrainConfig {
    fn default() -> Self {
        Self {
            grain_size: 2048,
            overlap_ratio: 0.75,
            sample_rate: 22050,
            seq_len: 32,
        }
    }
}

impl GrainConfig {
    pub fn new(grain_size: usize, overlap_ratio: f64, sample_rate: u32, seq_len: usize) -> Result<Self> {
        let c = Self {
            grain_size,
            overlap_ratio,
            sample_rate,
            seq_len,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grain_size < 2 || self.grain_size % 2 != 0 {
            return Err(Error::Config(format!("grain size {} must be even", self.grain_size)));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::Config(format!(
                "overlap ratio {} must be in [0, 1)",
                self.overlap_ratio
            )));
        }
        let hop = self.grain_size as f64 * (1.0 - self.overlap_ratio);
        if (hop - hop.round()).abs() > 1e-9 || hop.round() < 1.0 {
            return Err(Error::Config(format!("hop {hop} is not a positive integer")));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        (self.grain_size as f64 * (1.0 - self.overlap_ratio)).round() as usize
    }

    /// `d_h = d_x / 2 + 1`.
    pub fn filter_size(&self) -> usize {
        self.grain_size / 2 + 1
    }

    /// Samples covered by `grains` consecutive grains.
    pub fn span(&self, grains: usize) -> usize {
        if grains == 0 {
            0
        } else {
            (grains - 1) * self.hop() + self.grain_size
        }
    }

    /// Samples in one overlap-added sequence of `g` grains.
    pub fn sequence_samples(&self) -> usize {
        self.span(self.seq_len)
    }

    /// Grains needed to cover `len` samples; the last may be zero-padded.
    pub fn grains_for(&self, len: usize) -> usize {
        if len <= self.grain_size {
            1
        } else {
            (len - self.grain_size).div_ceil(self.hop()) + 1
        }
    }
}

/// `g` consecutive grains from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct GrainSequence {
    /// Row-major `g x d_x`.
    pub grains: Vec<f32>,
    pub grain_size: usize,
    pub label: Option<usize>,
    pub source_id: String,
    /// Sample position of the first grain in the source.
    pub offset: usize,
}

impl GrainSequence {
    pub fn num_grains(&self) -> usize {
        self.grains.len() / self.grain_size
    }

    pub fn grain(&self, i: usize) -> &[f32] {
        &self.grains[i * self.grain_size..(i + 1) * self.grain_size]
    }

    /// `(g, d_x)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.grains, (self.num_grains(), self.grain_size), device)?.to_dtype(dtype)?)
    }
}

/// Copies grain `index` (sample start `index * hop`) of `samples`, zero-padding past the end.
fn grain_at(samples: &[f32], start: usize, grain_size: usize, out: &mut Vec<f32>) {
    let end = (start + grain_size).min(samples.len());
    let avail = end.saturating_sub(start);
    if avail > 0 {
        out.extend_from_slice(&samples[start..end]);
    }
    out.extend(std::iter::repeat_n(0.0, grain_size - avail));
}

fn cut_sequence(
    samples: &[f32],
    config: &GrainConfig,
    first_grain: usize,
    source_id: &str,
    label: Option<usize>,
) -> GrainSequence {
    let hop = config.hop();
    let total = config.grains_for(samples.len());
    let mut grains = Vec::with_capacity(config.seq_len * config.grain_size);
    for i in first_grain..first_grain + config.seq_len {
        if i < total {
            grain_at(samples, i * hop, config.grain_size, &mut grains);
        } else {
            grains.extend(std::iter::repeat_n(0.0, config.grain_size));
        }
    }
    GrainSequence {
        grains,
        grain_size: config.grain_size,
        label,
        source_id: source_id.to_string(),
        offset: first_grain * hop,
    }
}

/// Peak-normalizes `audio` and cuts it into consecutive sequences of `g` grains.
///
/// Grain `i` starts at `i * hop`; the last grain is zero-padded and the last
/// sequence is filled with silent grains.
pub fn slice_waveform(audio: &[f32], config: &GrainConfig) -> Result<Vec<GrainSequence>> {
    slice_source(audio, config, "", None)
}

pub fn slice_source(
    audio: &[f32],
    config: &GrainConfig,
    source_id: &str,
    label: Option<usize>,
) -> Result<Vec<GrainSequence>> {
    config.validate()?;
    if audio.len() < config.grain_size {
        return Err(Error::SourceTooShort {
            len: audio.len(),
            min: config.grain_size,
        });
    }
    let mut samples = audio.to_vec();
    peak_normalize(&mut samples, NORMALIZE_PEAK);
    let total = config.grains_for(samples.len());
    Ok((0..total.div_ceil(config.seq_len))
        .map(|j| cut_sequence(&samples, config, j * config.seq_len, source_id, label))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory once saved.
    pub path: PathBuf,
    /// Length in samples at the configured rate.
    pub duration: usize,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: GrainConfig,
    pub label_schema: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Directory entry paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Name of the optional sidecar mapping relative paths to label names.
pub const LABEL_SIDECAR: &str = "labels.json";

fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if is_wav(&path) {
            out.push(path);
        }
    }
    Ok(())
}

fn top_level_dir(rel: &Path) -> Option<String> {
    let mut comps = rel.components();
    let first = comps.next()?;
    comps.next()?;
    match first {
        Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
        _ => None,
    }
}

/// Loads a file at the configured rate.
fn load_source(path: &Path, config: &GrainConfig) -> Result<Vec<f32>> {
    let audio = audio::read_wav(path)?;
    let audio = resample_integer(&audio, config.sample_rate).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if audio.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Audio {
            path: path.to_path_buf(),
            detail: "non-finite samples".into(),
        });
    }
    Ok(audio.samples)
}

/// Evenly spaced, deterministic test indices.
fn split_indices(n: usize, test_fraction: f64) -> Split {
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).floor() as usize;
    let n_test = n_test.min(n.saturating_sub(1));
    let test: Vec<usize> = (0..n_test)
        .map(|j| (((j as f64 + 0.5) * n as f64) / n_test as f64).floor() as usize)
        .collect();
    let train = (0..n).filter(|i| !test.contains(i)).collect();
    Split { train, test }
}

/// Scans `root` for WAV files and labels them from their top-level directory
/// (or from a `labels.json` sidecar). An empty `label_schema` is derived from
/// the sorted directory names.
pub fn build_manifest(root: impl AsRef<Path>, label_schema: &[String], config: &GrainConfig) -> Result<CorpusManifest> {
    build_manifest_with_split(root, label_schema, config, 0.0)
}

pub fn build_manifest_with_split(
    root: impl AsRef<Path>,
    label_schema: &[String],
    config: &GrainConfig,
    test_fraction: f64,
) -> Result<CorpusManifest> {
    config.validate()?;
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::EmptyCorpus(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    collect_wavs(root, &mut files)?;
    files.sort();

    let sidecar: BTreeMap<String, String> = match std::fs::read(root.join(LABEL_SIDECAR)) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(e.into()),
    };
    let rel_paths: Vec<PathBuf> = files
        .iter()
        .map(|f| f.strip_prefix(root).unwrap_or(f).to_path_buf())
        .collect();
    let label_name = |rel: &Path| -> Option<String> {
        sidecar
            .get(&rel.to_string_lossy().replace('\\', "/"))
            .cloned()
            .or_else(|| top_level_dir(rel))
    };

    let schema: Vec<String> = if label_schema.is_empty() {
        let mut names: Vec<String> = rel_paths.iter().filter_map(|r| label_name(r)).collect();
        names.sort();
        names.dedup();
        names
    } else {
        label_schema.to_vec()
    };

    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (file, rel) in files.iter().zip(&rel_paths) {
        let samples = match load_source(file, config) {
            Ok(s) => s,
            Err(e) => {
                warnings.push(format!("skipped {}: {e}", rel.display()));
                continue;
            }
        };
        if samples.is_empty() {
            warnings.push(format!("skipped {}: no samples", rel.display()));
            continue;
        }
        let label = match label_name(rel) {
            None => None,
            Some(name) => match schema.iter().position(|s| *s == name) {
                Some(i) => Some(i),
                None => {
                    warnings.push(format!("{}: label {name:?} not in schema", rel.display()));
                    None
                }
            },
        };
        entries.push(ManifestEntry {
            path: rel.clone(),
            duration: samples.len(),
            label,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no decodable audio under {}",
            root.display()
        )));
    }
    let split = split_indices(entries.len(), test_fraction);
    Ok(CorpusManifest {
        config: config.clone(),
        label_schema: schema,
        entries,
        split,
        warnings,
        base_dir: root.to_path_buf(),
    })
}

/// Relative path from directory `from` to `to` (both absolute).
fn relative_to(to: &Path, from: &Path) -> PathBuf {
    let to: Vec<_> = to.components().collect();
    let from: Vec<_> = from.components().collect();
    let common = to.iter().zip(&from).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..from.len() {
        out.push("..");
    }
    for c in &to[common..] {
        out.push(c);
    }
    out
}

fn absolute(path: &Path) -> Result<PathBuf> {
    Ok(if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()?.join(path)
    })
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.entries.len();
        for e in &self.entries {
            if let Some(l) = e.label {
                if l >= self.label_schema.len() {
                    return Err(Error::Config(format!(
                        "label {l} of {} out of range for {} categories",
                        e.path.display(),
                        self.label_schema.len()
                    )));
                }
            }
        }
        for &i in self.split.train.iter().chain(&self.split.test) {
            if i >= n {
                return Err(Error::Config(format!("split index {i} out of range")));
            }
        }
        if self.split.train.iter().any(|i| self.split.test.contains(i)) {
            return Err(Error::Config("train and test splits overlap".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Writes JSON with entry paths relative to the manifest's directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = absolute(path.as_ref())?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = absolute(&self.base_dir)?;
        let mut out = self.clone();
        for e in &mut out.entries {
            e.path = relative_to(&base.join(&e.path), &dir);
        }
        std::fs::write(&path, serde_json::to_vec_pretty(&out)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: CorpusManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct Source {
    pub id: String,
    pub label: Option<usize>,
    /// Peak-normalized samples.
    pub samples: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

/// Training batch of sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<GrainSequence>,
    pub labels: Vec<Option<usize>>,
    /// Set when more sequences were requested than distinct positions exist.
    pub with_replacement: bool,
}

impl Batch {
    /// `(b, g, d_x)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let seqs: Vec<Tensor> = self
            .sequences
            .iter()
            .map(|s| s.to_tensor(dtype, device))
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&seqs, 0)?)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Audio of a manifest held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: GrainConfig,
    pub label_schema: Vec<String>,
    pub sources: Vec<Source>,
    pub split: Split,
}

impl Corpus {
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        manifest.validate()?;
        if manifest.entries.is_empty() {
            return Err(Error::EmptyCorpus("manifest has no entries".into()));
        }
        let sources = manifest
            .entries
            .iter()
            .map(|e| {
                let mut samples = load_source(&manifest.resolve(e), &manifest.config)?;
                peak_normalize(&mut samples, NORMALIZE_PEAK);
                Ok(Source {
                    id: e.path.to_string_lossy().into_owned(),
                    label: e.label,
                    samples,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: manifest.config.clone(),
            label_schema: manifest.label_schema.clone(),
            sources,
            split: manifest.split.clone(),
        })
    }

    /// In-memory corpus where every source is in the train split.
    pub fn from_sources(config: GrainConfig, label_schema: Vec<String>, sources: Vec<Source>) -> Result<Self> {
        config.validate()?;
        if sources.is_empty() {
            return Err(Error::EmptyCorpus("no sources".into()));
        }
        let sources = sources
            .into_iter()
            .map(|mut s| {
                peak_normalize(&mut s.samples, NORMALIZE_PEAK);
                s
            })
            .collect::<Vec<_>>();
        let split = Split {
            train: (0..sources.len()).collect(),
            test: Vec::new(),
        };
        Ok(Self {
            config,
            label_schema,
            sources,
            split,
        })
    }

    fn split_indices(&self, split: SplitKind) -> &[usize] {
        match split {
            SplitKind::Train => &self.split.train,
            SplitKind::Test => &self.split.test,
        }
    }

    /// Number of hop-aligned sequence start positions in a source.
    pub fn positions_in(&self, source: usize) -> usize {
        let grains = self.config.grains_for(self.sources[source].samples.len());
        grains.saturating_sub(self.config.seq_len) + 1
    }

    /// All `(source, first grain)` pairs of a split.
    pub fn positions(&self, split: SplitKind) -> Vec<(usize, usize)> {
        self.split_indices(split)
            .iter()
            .flat_map(|&s| (0..self.positions_in(s)).map(move |k| (s, k)))
            .collect()
    }

    pub fn sequence_at(&self, source: usize, first_grain: usize) -> GrainSequence {
        let s = &self.sources[source];
        cut_sequence(&s.samples, &self.config, first_grain, &s.id, s.label)
    }

    /// Every grain a sequence of this source can touch, as one long sequence
    /// of `positions_in(source) + g - 1` grains.
    pub fn source_grains(&self, source: usize) -> GrainSequence {
        let s = &self.sources[source];
        let mut config = self.config.clone();
        config.seq_len = self.positions_in(source) + self.config.seq_len - 1;
        cut_sequence(&s.samples, &config, 0, &s.id, s.label)
    }

    /// Offset-0 sequence of every source in a split.
    pub fn eval_sequences(&self, split: SplitKind) -> Vec<GrainSequence> {
        self.split_indices(split).iter().map(|&s| self.sequence_at(s, 0)).collect()
    }

    /// Draws `batch_size` train sequences at random hop-aligned offsets.
    ///
    /// Positions are distinct unless more are requested than exist, in which
    /// case they are drawn with replacement and the batch is flagged.
    pub fn sample_batch(&self, batch_size: usize, seed: u64) -> Result<Batch> {
        let positions = self.positions(SplitKind::Train);
        if positions.is_empty() {
            return Err(Error::EmptyCorpus("train split is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with_replacement = batch_size > positions.len();
        let picks: Vec<usize> = if with_replacement {
            (0..batch_size).map(|_| rng.random_range(0..positions.len())).collect()
        } else {
            index::sample(&mut rng, positions.len(), batch_size).into_vec()
        };
        let sequences: Vec<GrainSequence> = picks
            .into_iter()
            .map(|p| {
                let (s, k) = positions[p];
                self.sequence_at(s, k)
            })
            .collect();
        let labels = sequences.iter().map(|s| s.label).collect();
        Ok(Batch {
            sequences,
            labels,
            with_replacement,
        })
    }
}

/// Loads the manifest's audio and draws one batch.
pub fn sample_batch(manifest: &CorpusManifest, batch_size: usize, seed: u64) -> Result<Batch> {
    Corpus::load(manifest)?.sample_batch(batch_size, seed)
}
