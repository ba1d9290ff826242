use std::f64::consts::PI;
use std::fs;

use candle_core::{DType, Device};
use ngs_core::audio::write_wav;
use ngs_core::corpus::{build_manifest, build_manifest_with_split, slice_waveform, Corpus, CorpusManifest, Source};
use ngs_core::synthetic::{drum_corpus, write_corpus, DRUM_CLASSES};
use ngs_core::GrainConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signal(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
}

fn normalized(x: &[f32]) -> Vec<f32> {
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    x.iter().map(|v| v * (0.9 / peak)).collect()
}

#[test]
fn grain_count_follows_hop_arithmetic() {
    let config = GrainConfig::new(2048, 0.75, 22050, 13).unwrap();
    assert_eq!(config.hop(), 512);
    assert_eq!(config.grains_for(8192), 13);
    let seqs = slice_waveform(&signal(8192, 1), &config).unwrap();
    assert_eq!(seqs.len(), 1);
    assert_eq!(seqs[0].num_grains(), 13);
}

#[test]
fn one_grain_source_is_the_grain() {
    let config = GrainConfig::new(2048, 0.75, 22050, 1).unwrap();
    let x = normalized(&signal(2048, 2));
    let seqs = slice_waveform(&x, &config).unwrap();
    assert_eq!(seqs.len(), 1);
    assert_eq!(seqs[0].grains, x);
    assert!(slice_waveform(&x[..2047], &config).is_err());
}

#[test]
fn sweep_sequences_tile_every_window_position() {
    let sr = 22050;
    let n = 3 * sr as usize;
    let mut phase = 0.0;
    let sweep: Vec<f32> = (0..n)
        .map(|i| {
            phase += 2.0 * PI * (50.0 + 5000.0 * i as f64 / n as f64) / sr as f64;
            (0.5 * phase.sin()) as f32
        })
        .collect();
    let config = GrainConfig::new(2048, 0.75, sr, 32).unwrap();
    let seqs = slice_waveform(&sweep, &config).unwrap();
    let x = normalized(&sweep);
    // brute-force enumeration of all window starts 0, hop, 2 hop, ... while the window touches the file
    let starts: Vec<usize> = (0..).map(|i| i * 512).take_while(|s| *s == 0 || s + 2048 - 512 < n).collect();
    assert_eq!(starts.len(), config.grains_for(n));
    assert_eq!(seqs.len(), starts.len().div_ceil(32));
    for (i, &start) in starts.iter().enumerate() {
        let seq = &seqs[i / 32];
        assert_eq!(seq.offset, (i / 32) * 32 * 512);
        let grain = seq.grain(i % 32);
        for (t, v) in grain.iter().enumerate() {
            let expect = x.get(start + t).copied().unwrap_or(0.0);
            assert_eq!(*v, expect, "grain {i} sample {t}");
        }
    }
    // the tail of the last sequence is silent padding
    let used = starts.len() % 32;
    if used > 0 {
        let last = seqs.last().unwrap();
        assert!((used..32).all(|g| last.grain(g).iter().all(|v| *v == 0.0)));
    }
    assert_eq!(slice_waveform(&sweep, &config).unwrap(), seqs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn steady_state_samples_appear_in_four_grains(len in 64usize..2000, seed in any::<u64>()) {
        let config = GrainConfig::new(64, 0.75, 8000, 1).unwrap();
        let x = normalized(&signal(len, seed));
        let grains = slice_waveform(&x, &config).unwrap();
        let hop = config.hop();
        let mut sum = vec![0.0f64; len + 64];
        let mut count = vec![0usize; len + 64];
        for (i, seq) in grains.iter().enumerate() {
            for (t, v) in seq.grain(0).iter().enumerate() {
                sum[i * hop + t] += *v as f64;
                count[i * hop + t] += 1;
            }
        }
        for t in 0..len {
            if count[t] == 4 {
                prop_assert!((sum[t] / 4.0 - x[t] as f64).abs() < 1e-7);
            }
            if t >= 64 - hop && t + 64 <= grains.len() * hop {
                prop_assert_eq!(count[t], 4);
            }
        }
    }
}

fn drum_dir(per_class: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let sounds = drum_corpus(16000, 0.2, per_class, 3);
    write_corpus(dir.path(), &sounds, &DRUM_CLASSES, 16000).unwrap();
    dir
}

#[test]
fn drum_directories_give_eight_categories() {
    let dir = drum_dir(2);
    let config = GrainConfig::new(512, 0.75, 16000, 4).unwrap();
    let m = build_manifest(dir.path(), &[], &config).unwrap();
    assert_eq!(m.label_schema, DRUM_CLASSES.to_vec());
    assert_eq!(m.entries.len(), 16);
    for e in &m.entries {
        let label = &m.label_schema[e.label.unwrap()];
        assert!(e.path.starts_with(label));
    }
    assert!(m.warnings.is_empty());
}

#[test]
fn manifest_round_trips() {
    let dir = drum_dir(1);
    let config = GrainConfig::new(512, 0.75, 16000, 4).unwrap();
    let m = build_manifest_with_split(dir.path(), &[], &config, 0.25).unwrap();
    assert_eq!(m.split.test.len(), 2);
    let out = tempfile::tempdir().unwrap();
    let path = out.path().join("sub").join("m.json");
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    m.save(&path).unwrap();
    let back = CorpusManifest::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.label_schema, m.label_schema);
    assert_eq!(back.split, m.split);
    for (a, b) in back.entries.iter().zip(&m.entries) {
        assert_eq!(a.duration, b.duration);
        assert_eq!(a.label, b.label);
        assert_eq!(
            fs::canonicalize(back.resolve(a)).unwrap(),
            fs::canonicalize(m.resolve(b)).unwrap()
        );
    }
    back.save(&path).unwrap();
    let reread = CorpusManifest::load(&path).unwrap();
    assert_eq!(reread.entries, back.entries);
}

#[test]
fn empty_directory_is_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = GrainConfig::new(512, 0.75, 16000, 4).unwrap();
    let err = build_manifest(dir.path(), &[], &config).unwrap_err();
    assert_eq!(err.kind(), "empty_corpus");
}

#[test]
fn undecodable_file_is_skipped_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    write_wav(dir.path().join("a.wav"), &signal(4000, 1), 16000).unwrap();
    write_wav(dir.path().join("b.wav"), &signal(4000, 2), 16000).unwrap();
    fs::write(dir.path().join("c.wav"), b"RIFF not really a wave file").unwrap();
    let config = GrainConfig::new(512, 0.75, 16000, 4).unwrap();
    let m = build_manifest(dir.path(), &[], &config).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.warnings.len(), 1);
    assert!(m.warnings[0].contains("c.wav"));
}

fn corpus(n_sources: usize, len: usize, config: GrainConfig) -> Corpus {
    let sources = (0..n_sources)
        .map(|i| Source {
            id: format!("s{i}"),
            label: Some(i % 2),
            samples: signal(len, i as u64),
        })
        .collect();
    Corpus::from_sources(config, vec!["a".into(), "b".into()], sources).unwrap()
}

#[test]
fn batches_are_seeded_and_shaped() {
    let config = GrainConfig::new(256, 0.75, 16000, 8).unwrap();
    let c = corpus(6, 8000, config);
    let batch = c.sample_batch(40, 5).unwrap();
    assert_eq!(batch.len(), 40);
    assert!(!batch.with_replacement);
    let t = batch.to_tensor(DType::F32, &Device::Cpu).unwrap();
    assert_eq!(t.dims(), &[40, 8, 256]);
    let again = c.sample_batch(40, 5).unwrap();
    assert_eq!(batch.sequences, again.sequences);
    assert_eq!(batch.labels, again.labels);
    assert_ne!(c.sample_batch(40, 6).unwrap().sequences, batch.sequences);
    for (s, l) in batch.sequences.iter().zip(&batch.labels) {
        assert_eq!(s.label, *l);
    }
}

#[test]
fn one_file_corpus_fills_batches_from_that_file() {
    let config = GrainConfig::new(256, 0.75, 16000, 4).unwrap();
    let c = corpus(1, 2000, config);
    let batch = c.sample_batch(4, 1).unwrap();
    assert_eq!(batch.len(), 4);
    assert!(batch.sequences.iter().all(|s| s.source_id == "s0"));
    let positions = c.positions(ngs_core::corpus::SplitKind::Train).len();
    let big = c.sample_batch(positions + 3, 1).unwrap();
    assert!(big.with_replacement);
    assert_eq!(big.len(), positions + 3);
}
