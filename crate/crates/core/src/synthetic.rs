//! Deterministic synthetic corpora for smoke tests and demos.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::write_wav;
use crate::error::Result;

/// Category names of the drum-kit corpus.
pub const DRUM_CLASSES: [&str; 8] = ["Clap", "Cowbell", "Crash", "Hat", "Kick", "Ride", "Snare", "Tom"];

/// A named synthetic sound.
#[derive(Debug, Clone)]
pub struct ToySound {
    pub name: String,
    pub label: Option<usize>,
    pub samples: Vec<f32>,
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Two-pole resonator with centre `f` Hz and pole radius `r`.
fn resonate(x: &[f64], f: f64, r: f64, sr: f64) -> Vec<f64> {
    let w = 2.0 * PI * f / sr;
    let (a1, a2) = (2.0 * r * w.cos(), -r * r);
    let mut y = vec![0.0; x.len()];
    for t in 0..x.len() {
        let y1 = if t >= 1 { y[t - 1] } else { 0.0 };
        let y2 = if t >= 2 { y[t - 2] } else { 0.0 };
        y[t] = (1.0 - r) * x[t] + a1 * y1 + a2 * y2;
    }
    y
}

fn one_pole_lowpass(x: &[f64], a: f64) -> Vec<f64> {
    let mut s = 0.0;
    x.iter()
        .map(|v| {
            s += a * (v - s);
            s
        })
        .collect()
}

fn highpass(x: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    x.iter()
        .map(|v| {
            let out = v - prev;
            prev = *v;
            out
        })
        .collect()
}

fn decay(n: usize, sr: f64, tau: f64) -> impl Iterator<Item = f64> {
    (0..n).map(move |t| (-(t as f64) / sr / tau).exp())
}

fn normalized(x: Vec<f64>) -> Vec<f32> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > 0.0 { 0.9 / peak } else { 0.0 };
    x.into_iter().map(|v| (v * g) as f32).collect()
}

/// Eight tonal and noisy sounds: sinusoids, chirps and filtered noise bursts.
pub fn toy_corpus(sample_rate: u32, seconds: f64, seed: u64) -> Vec<ToySound> {
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = |i: usize| i as f64 / sr;
    let sine = |f: f64| -> Vec<f64> { (0..n).map(|i| (2.0 * PI * f * t(i)).sin()).collect() };
    let linear_chirp = |f0: f64, f1: f64| -> Vec<f64> {
        let k = (f1 - f0) / seconds;
        (0..n)
            .map(|i| (2.0 * PI * (f0 * t(i) + 0.5 * k * t(i) * t(i))).sin())
            .collect()
    };
    let exp_chirp = |f0: f64, f1: f64| -> Vec<f64> {
        let k = (f1 / f0).ln() / seconds;
        (0..n)
            .map(|i| (2.0 * PI * f0 * ((k * t(i)).exp() - 1.0) / k).sin())
            .collect()
    };
    let env = |x: Vec<f64>, tau: f64| -> Vec<f64> { x.into_iter().zip(decay(n, sr, tau)).map(|(a, b)| a * b).collect() };
    let mut sounds = vec![
        ("sine_220", env(sine(220.0), 1.5)),
        ("sine_880", sine(880.0)),
        ("chirp_up", linear_chirp(100.0, 2000.0)),
        ("chirp_down", exp_chirp(3000.0, 300.0)),
    ];
    let n1 = noise(&mut rng, n);
    sounds.push(("noise_low", env(one_pole_lowpass(&n1, 0.05), 0.4)));
    let n2 = noise(&mut rng, n);
    sounds.push(("noise_band", env(resonate(&n2, 2000.0, 0.98, sr), 0.6)));
    let harmonics: Vec<f64> = (0..n)
        .map(|i| (1..=8).map(|h| (2.0 * PI * 330.0 * h as f64 * t(i)).sin() / h as f64).sum())
        .collect();
    sounds.push(("harmonic_330", env(harmonics, 1.0)));
    let n3 = noise(&mut rng, n);
    sounds.push(("noise_high", env(highpass(&n3), 0.25)));
    sounds
        .into_iter()
        .map(|(name, x)| ToySound {
            name: name.to_string(),
            label: None,
            samples: normalized(x),
        })
        .collect()
}

/// One synthetic hit of drum class `class` (index into [`DRUM_CLASSES`]).
pub fn drum_hit(class: usize, sample_rate: u32, seconds: f64, seed: u64) -> Vec<f32> {
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // small per-hit variation
    let detune = 1.0 + 0.05 * (rng.random::<f64>() - 0.5);
    let t = |i: usize| i as f64 / sr;
    let x: Vec<f64> = match DRUM_CLASSES[class] {
        "Kick" => {
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    let f = (50.0 + 100.0 * (-t(i) / 0.04).exp()) * detune;
                    phase += 2.0 * PI * f / sr;
                    phase.sin() * (-t(i) / 0.25).exp()
                })
                .collect()
        }
        "Tom" => {
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    let f = (110.0 + 60.0 * (-t(i) / 0.08).exp()) * detune;
                    phase += 2.0 * PI * f / sr;
                    phase.sin() * (-t(i) / 0.3).exp()
                })
                .collect()
        }
        "Snare" => {
            let nz = noise(&mut rng, n);
            (0..n)
                .map(|i| {
                    let tone = (2.0 * PI * 190.0 * detune * t(i)).sin() * (-t(i) / 0.05).exp();
                    0.6 * tone + nz[i] * (-t(i) / 0.12).exp()
                })
                .collect()
        }
        "Hat" => {
            let nz = highpass(&highpass(&noise(&mut rng, n)));
            nz.iter().enumerate().map(|(i, v)| v * (-t(i) / 0.04).exp()).collect()
        }
        "Crash" => {
            let nz = highpass(&noise(&mut rng, n));
            nz.iter().enumerate().map(|(i, v)| v * (-t(i) / 0.8).exp()).collect()
        }
        "Ride" => {
            let nz = highpass(&noise(&mut rng, n));
            (0..n)
                .map(|i| {
                    let bell: f64 = [3100.0, 4650.0, 5800.0]
                        .iter()
                        .map(|f| (2.0 * PI * f * detune * t(i)).sin())
                        .sum();
                    (0.3 * nz[i] + 0.2 * bell) * (-t(i) / 0.6).exp()
                })
                .collect()
        }
        "Cowbell" => (0..n)
            .map(|i| {
                let sq = |f: f64| (2.0 * PI * f * detune * t(i)).sin().signum();
                (sq(540.0) + sq(800.0)) * (-t(i) / 0.15).exp()
            })
            .collect(),
        "Clap" => {
            let nz = resonate(&noise(&mut rng, n), 1200.0, 0.9, sr);
            (0..n)
                .map(|i| {
                    let burst: f64 = [0.0, 0.011, 0.023]
                        .iter()
                        .map(|o| if t(i) >= *o { (-(t(i) - o) / 0.008).exp() } else { 0.0 })
                        .sum::<f64>()
                        + (-t(i) / 0.1).exp() * 0.3;
                    nz[i] * burst
                })
                .collect()
        }
        other => unreachable!("unknown drum class {other}"),
    };
    normalized(x)
}

/// `per_class` hits of each drum class.
pub fn drum_corpus(sample_rate: u32, seconds: f64, per_class: usize, seed: u64) -> Vec<ToySound> {
    let mut out = Vec::new();
    for class in 0..DRUM_CLASSES.len() {
        for k in 0..per_class {
            out.push(ToySound {
                name: format!("{}_{k}", DRUM_CLASSES[class].to_lowercase()),
                label: Some(class),
                samples: drum_hit(class, sample_rate, seconds, seed ^ ((class * 1000 + k) as u64)),
            });
        }
    }
    out
}

/// Writes sounds as WAV files, in per-label subdirectories when labelled.
pub fn write_corpus(dir: impl AsRef<Path>, sounds: &[ToySound], labels: &[&str], sample_rate: u32) -> Result<()> {
    let dir = dir.as_ref();
    for s in sounds {
        let sub = match s.label {
            Some(l) => dir.join(labels[l]),
            None => dir.to_path_buf(),
        };
        fs::create_dir_all(&sub)?;
        write_wav(sub.join(format!("{}.wav", s.name)), &s.samples, sample_rate)?;
    }
    Ok(())
}
