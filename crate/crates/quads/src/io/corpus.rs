//! Synthetic spoken-command corpus.
//!
//! Each class is a chirp with its own base frequency, sweep rate and
//! amplitude envelope; per-sample variation comes from seeded frequency
//! and amplitude jitter plus Gaussian noise at a configurable SNR. The
//! generator is a pure function of its spec: identical specs produce
//! byte-identical WAV files and manifests on any platform.
//!
//! Output layout under the target directory: one WAV per sample,
//! `manifest.csv` over all rows, and a 70/15/15 `train.csv` / `val.csv` /
//! `test.csv` split drawn by seeded shuffle.

use std::fs;
use std::path::Path;

use super::wav::{quantize_i16, write_wav_pcm};
use super::{IoError, Manifest};
use crate::rng::SplitMix64;

pub const TRAIN_MANIFEST: &str = "train.csv";
pub const VAL_MANIFEST: &str = "val.csv";
pub const TEST_MANIFEST: &str = "test.csv";
pub const FULL_MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Envelope {
    Flat,
    Rise,
    Fall,
    Pulse,
}

impl Envelope {
    fn value(self, t: f64, total: f64) -> f64 {
        let x = t / total;
        match self {
            Envelope::Flat => 1.0,
            Envelope::Rise => x,
            Envelope::Fall => 1.0 - x,
            Envelope::Pulse => {
                let s = libm::sin(std::f64::consts::PI * x);
                s * s
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassSignature {
    pub label: String,
    pub base_freq_hz: f64,
    /// Linear sweep rate in Hz per second.
    pub chirp_rate: f64,
    pub envelope: Envelope,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpusSpec {
    pub signatures: Vec<ClassSignature>,
    pub samples_per_class: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
    /// Relative per-sample jitter of the base frequency.
    pub freq_jitter: f64,
    pub seed: u64,
}

const LABEL_WORDS: [&str; 8] = ["down", "go", "left", "no", "right", "stop", "up", "yes"];

impl SyntheticCorpusSpec {
    /// Spec with geometrically spaced base frequencies (non-overlapping
    /// even after sweep and jitter), alternating envelopes and sweep signs.
    pub fn with_default_classes(
        n_classes: usize,
        samples_per_class: usize,
        snr_db: Option<f64>,
        seed: u64,
    ) -> Self {
        let envelopes = [
            Envelope::Flat,
            Envelope::Rise,
            Envelope::Fall,
            Envelope::Pulse,
        ];
        let signatures = (0..n_classes)
            .map(|i| {
                let base = 400.0 * libm::pow(1.6, i as f64);
                ClassSignature {
                    label: LABEL_WORDS
                        .get(i)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("word{i}")),
                    base_freq_hz: base,
                    chirp_rate: if i % 2 == 0 { 0.08 } else { -0.08 } * base,
                    envelope: envelopes[i % envelopes.len()],
                }
            })
            .collect();
        Self {
            signatures,
            samples_per_class,
            sample_rate: 16_000,
            duration_s: 1.0,
            snr_db,
            freq_jitter: 0.02,
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.signatures.len()
    }
}

fn synthesize(spec: &SyntheticCorpusSpec, class: usize, sample: usize) -> Vec<i16> {
    // stream 0 is reserved for the split shuffle
    let stream = 1 + (class * spec.samples_per_class + sample) as u64;
    let mut rng = SplitMix64::substream(spec.seed, stream);
    let sig = &spec.signatures[class];
    let n = (spec.sample_rate as f64 * spec.duration_s).round() as usize;
    let f0 = sig.base_freq_hz * (1.0 + spec.freq_jitter * (2.0 * rng.next_f64() - 1.0));
    let amp = 0.45 * (1.0 + 0.15 * (2.0 * rng.next_f64() - 1.0));
    let sr = spec.sample_rate as f64;

    let mut wave: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let phase = 2.0 * std::f64::consts::PI * (f0 * t + 0.5 * sig.chirp_rate * t * t);
            amp * sig.envelope.value(t, spec.duration_s) * libm::sin(phase)
        })
        .collect();

    if let Some(snr_db) = spec.snr_db {
        let p_signal = wave.iter().map(|s| s * s).sum::<f64>() / n as f64;
        let sigma = (p_signal / libm::pow(10.0, snr_db / 10.0)).sqrt();
        for s in wave.iter_mut() {
            *s += sigma * rng.next_normal();
        }
    }
    wave.iter()
        .map(|&s| quantize_i16(s.clamp(-1.0, 1.0) as f32))
        .collect()
}

/// Writes the corpus and its manifests; returns the full manifest.
pub fn generate_synthetic_corpus(
    spec: &SyntheticCorpusSpec,
    out_dir: &Path,
) -> Result<Manifest, IoError> {
    if !out_dir.exists() {
        fs::create_dir(out_dir).map_err(super::io_err(out_dir))?;
    }
    let mut rows = Vec::new();
    for (ci, sig) in spec.signatures.iter().enumerate() {
        for si in 0..spec.samples_per_class {
            let name = format!("{}_{si:04}.wav", sig.label);
            let pcm = synthesize(spec, ci, si);
            write_wav_pcm(&out_dir.join(&name), &pcm, spec.sample_rate)?;
            rows.push((name, sig.label.clone()));
        }
    }
    let manifest = Manifest::from_rows(rows.clone(), out_dir);
    manifest.save(&out_dir.join(FULL_MANIFEST))?;

    // seeded 70/15/15 split
    let mut order: Vec<usize> = (0..rows.len()).collect();
    SplitMix64::substream(spec.seed, 0).shuffle(&mut order);
    let n_train = rows.len() * 70 / 100;
    let n_val = rows.len() * 15 / 100;
    let pick =
        |ids: &[usize]| -> Vec<(String, String)> { ids.iter().map(|&i| rows[i].clone()).collect() };
    let splits = [
        (TRAIN_MANIFEST, pick(&order[..n_train])),
        (VAL_MANIFEST, pick(&order[n_train..n_train + n_val])),
        (TEST_MANIFEST, pick(&order[n_train + n_val..])),
    ];
    for (name, split_rows) in splits {
        Manifest::from_rows(split_rows, out_dir).save(&out_dir.join(name))?;
    }
    Ok(manifest)
}
