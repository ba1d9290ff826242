//! Behaviour of a small conditional model trained on synthetic drum hits.

use std::f64::consts::PI;
use std::sync::OnceLock;

use candle_core::{DType, Device};
use ngs_core::corpus::{Corpus, Source};
use ngs_core::synthesis::{conditional_sample, decode_latents, interpolate_embeddings, resynthesize};
use ngs_core::synthetic::{drum_corpus, DRUM_CLASSES};
use ngs_core::temporal::sample_prior;
use ngs_core::training::{encode_means, Trainer};
use ngs_core::{CheckpointConfig, GrainConfig, GranularModel, LatentSeries, ModelConfig, SpectralLossConfig, TrainConfig};

const SR: u32 = 16000;

struct Fixture {
    model: GranularModel,
    corpus: Corpus,
}

fn class(name: &str) -> usize {
    DRUM_CLASSES.iter().position(|c| *c == name).unwrap()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let grain = GrainConfig::new(256, 0.75, SR, 4).unwrap();
        let sources = drum_corpus(SR, 0.25, 3, 17)
            .into_iter()
            .map(|s| Source {
                id: s.name,
                label: s.label,
                samples: s.samples,
            })
            .collect();
        let labels = DRUM_CLASSES.iter().map(|s| s.to_string()).collect();
        let corpus = Corpus::from_sources(grain.clone(), labels, sources).unwrap();
        let model = ModelConfig {
            latent_dim: 8,
            embedding_dim: 16,
            num_classes: DRUM_CLASSES.len(),
            encoder_channels: vec![8, 16, 16],
            encoder_hidden: 64,
            decoder_hidden: 64,
            temporal_hidden: 64,
            ..Default::default()
        };
        let config = CheckpointConfig::new(
            grain,
            model,
            corpus.label_schema.clone(),
            SpectralLossConfig::for_grain(256, SR),
        );
        let train = TrainConfig {
            batch_size: 16,
            steps_per_epoch: Some(20),
            warmup_start_epoch: 5.0,
            warmup_ramp_epochs: 5.0,
            checkpoint_every: 0,
            temporal_batch_size: 32,
            seed: 3,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::open(dir.path(), config, train, &corpus, DType::F32, &Device::Cpu).unwrap();
        trainer.run_grain(&corpus, 400, |_| {}).unwrap();
        trainer.run_temporal(&corpus, 400, |_| {}).unwrap();
        Fixture {
            model: trainer.model,
            corpus,
        }
    })
}

fn centroid_hz(x: &[f32]) -> f64 {
    let n = x.len();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = 2.0 * PI * (k * t) as f64 / n as f64;
            re += *v as f64 * a.cos();
            im -= *v as f64 * a.sin();
        }
        let p = re * re + im * im;
        num += p * k as f64 * SR as f64 / n as f64;
        den += p;
    }
    num / den
}

fn mean_centroid(waves: &[Vec<f32>]) -> f64 {
    waves.iter().map(|w| centroid_hz(w)).sum::<f64>() / waves.len() as f64
}

#[test]
fn resynthesized_kicks_sit_below_hats() {
    let f = fixture();
    let of = |name: &str| -> Vec<Vec<f32>> {
        f.corpus
            .sources
            .iter()
            .filter(|s| s.label == Some(class(name)))
            .map(|s| resynthesize(&s.samples, &f.model, Some(class(name)), None, 1).unwrap())
            .collect()
    };
    let (kick, hat) = (mean_centroid(&of("Kick")), mean_centroid(&of("Hat")));
    assert!(kick < hat, "kick {kick:.0} Hz, hat {hat:.0} Hz");
}

#[test]
fn conditional_samples_follow_the_category() {
    let f = fixture();
    let draw = |name: &str| -> Vec<Vec<f32>> {
        (0..6)
            .map(|seed| conditional_sample(&f.model, class(name), seed).unwrap())
            .collect()
    };
    let (kick, hat) = (draw("Kick"), draw("Hat"));
    assert_ne!(kick[0], hat[0]);
    let (kick, hat) = (mean_centroid(&kick), mean_centroid(&hat));
    assert!(kick < hat, "kick {kick:.0} Hz, hat {hat:.0} Hz");
}

#[test]
fn condition_changes_the_decoded_grains() {
    let f = fixture();
    let z = LatentSeries::from_rows(&vec![vec![0.3f32; 8]; 4], DType::F32, &Device::Cpu).unwrap();
    let a = decode_latents(&f.model, &z, Some(class("Kick")), 0).unwrap();
    let b = decode_latents(&f.model, &z, Some(class("Hat")), 0).unwrap();
    assert_ne!(a, b);
}

#[test]
fn embeddings_do_not_collapse() {
    let f = fixture();
    let means: Vec<Vec<f32>> = (0..f.corpus.sources.len())
        .map(|s| {
            let z = encode_means(&f.model.grain, &f.corpus.sequence_at(s, 0)).unwrap();
            f.model.temporal.embed_sequence(&LatentSeries(z)).unwrap().0
        })
        .collect();
    let d = means[0].len();
    let spread: f64 = (0..d)
        .map(|j| {
            let col: Vec<f64> = means.iter().map(|m| m[j] as f64).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64
        })
        .sum();
    assert!(spread > 1e-3, "total variance of embedding means {spread}");
}

#[test]
fn interpolation_moves_smoothly_between_endpoints() {
    let f = fixture();
    let e1 = sample_prior(16, 1);
    let e2 = sample_prior(16, 2);
    let c = Some(class("Snare"));
    let waves: Vec<Vec<f32>> = (0..=10)
        .map(|i| interpolate_embeddings(&e1, &e2, i as f32 / 10.0, &f.model, c, 5).unwrap())
        .collect();
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let total = dist(&waves[0], &waves[10]);
    let steps: Vec<f64> = waves.windows(2).map(|w| dist(&w[0], &w[1])).collect();
    // no single tenth of the path carries most of the change
    assert!(steps.iter().all(|s| *s < 0.5 * steps.iter().sum::<f64>().max(total)), "{steps:?}");
}
