//! Audio buffers, SNR-controlled mixing, SI-SNR and a synthetic corpus.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Ceiling (and floor, negated) applied to SI-SNR values.
pub const SI_SNR_CAP_DB: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Clean,
    Noise,
    Mixture,
    Enhanced,
}

/// Mono 16 kHz signal.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    pub role: Role,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32, role: Role) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(Error::Empty);
        }
        Ok(Self { samples, role })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSpec {
    pub snr_db: f64,
    pub noise_offset: usize,
    pub seed: u64,
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Signal-to-noise ratio in dB.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * libm::log10(energy(signal) / energy(noise))
}

/// Mixes `s` with the segment of `n` starting at `spec.noise_offset`, scaled
/// to reach `spec.snr_db`. Returns the mixture and the scaled noise segment.
pub fn mix(s: &AudioBuffer, n: &AudioBuffer, spec: &MixtureSpec) -> Result<(AudioBuffer, Vec<f64>)> {
    let m = s.len();
    let end = spec.noise_offset.checked_add(m).filter(|&e| e <= n.len());
    let Some(end) = end else {
        return Err(Error::LengthMismatch(n.len().saturating_sub(spec.noise_offset), m));
    };
    let seg = &n.samples()[spec.noise_offset..end];
    let es = energy(s.samples());
    let en = energy(seg);
    if es == 0.0 {
        return Err(Error::ZeroEnergy("speech"));
    }
    if en == 0.0 {
        return Err(Error::ZeroEnergy("noise"));
    }
    let g = libm::sqrt(es / en) / libm::pow(10.0, spec.snr_db / 20.0);
    let scaled: Vec<f64> = seg.iter().map(|v| v * g).collect();
    let x = s.samples().iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok((AudioBuffer::new(x, SAMPLE_RATE, Role::Mixture)?, scaled))
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Scale-invariant SNR of `s_hat` against `s` in dB, clamped to ±60 dB.
pub fn si_snr(s_hat: &[f64], s: &[f64]) -> Result<f64> {
    if s_hat.len() != s.len() {
        return Err(Error::LengthMismatch(s_hat.len(), s.len()));
    }
    if s.is_empty() {
        return Err(Error::Empty);
    }
    let (e_hat, t) = (zero_mean(s_hat), zero_mean(s));
    let tt = energy(&t);
    if tt == 0.0 {
        return Err(Error::ZeroEnergy("target"));
    }
    let alpha = e_hat.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / tt;
    let target: Vec<f64> = t.iter().map(|v| v * alpha).collect();
    let et = energy(&target);
    let er: f64 = e_hat.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
    let v = if er == 0.0 {
        SI_SNR_CAP_DB
    } else if et == 0.0 {
        -SI_SNR_CAP_DB
    } else {
        10.0 * libm::log10(et / er)
    };
    Ok(v.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// SI-SNR gain of `s_hat` over the unprocessed mixture `x`.
pub fn si_snr_improvement(s_hat: &[f64], x: &[f64], s: &[f64]) -> Result<f64> {
    Ok(si_snr(s_hat, s)? - si_snr(x, s)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        }
    }
}

/// One generated training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub mixture: AudioBuffer,
    pub clean: AudioBuffer,
    /// Scaled noise actually added to `clean`.
    pub noise: Vec<f64>,
    pub snr_db: f64,
    pub f0: f64,
    pub kind: NoiseKind,
    pub seed: u64,
}

const TAU: f64 = 2.0 * core::f64::consts::PI;

/// Harmonic tone at constant `f0` with syllable-like amplitude envelopes
/// separated by short silences.
pub fn synth_clean(len: usize, f0: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let harmonics = ((3800.0 / f0) as usize).max(1);
    // The fundamental dominates: overtone k has amplitude at most 1/k.
    let amps: Vec<f64> = (1..=harmonics).map(|k| if k == 1 { 1.0 } else { rng.random_range(0.4..1.0) / k as f64 }).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..TAU)).collect();

    // Envelope: alternating voiced segments (raised-cosine shaped) and silences.
    let mut env = vec![0.0; len];
    let mut pos = rng.random_range(0..(len / 10).max(1));
    while pos < len {
        let seg = (rng.random_range(0.12..0.4) * sr) as usize;
        let gain = rng.random_range(0.5..1.0);
        for i in 0..seg.min(len - pos) {
            env[pos + i] = gain * 0.5 * (1.0 - libm::cos(TAU * i as f64 / seg as f64));
        }
        pos += seg + (rng.random_range(0.03..0.15) * sr) as usize;
    }
    let mut out: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let v: f64 = amps.iter().zip(&phases).enumerate().map(|(k, (a, p))| a * libm::sin(TAU * f0 * (k + 1) as f64 * t + p)).sum();
            v * env[i]
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.3 / peak);
    }
    out
}

/// Seeded noise of the given kind, normalised to unit peak.
pub fn synth_noise(len: usize, kind: NoiseKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut out: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy filter applied to white noise.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w: f64 = rng.random_range(-1.0..1.0);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let voices = 6;
            let mut acc = vec![0.0; len];
            for _ in 0..voices {
                let f0 = rng.random_range(90.0..260.0);
                let detune = rng.random_range(-0.03..0.03);
                let rate = rng.random_range(2.0..6.0);
                let phase = rng.random_range(0.0..TAU);
                for (i, a) in acc.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let am = 0.5 * (1.0 + libm::sin(TAU * rate * t + phase));
                    let mut v = 0.0;
                    for k in 1..=8 {
                        let f = f0 * k as f64 * (1.0 + detune * k as f64);
                        v += libm::sin(TAU * f * t + phase * k as f64) / k as f64;
                    }
                    *a += am * v;
                }
            }
            for a in acc.iter_mut() {
                *a += 0.05 * rng.random_range(-1.0..1.0);
            }
            acc
        }
    };
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

/// Seed of the `index`-th item derived from a dataset seed (SplitMix64 step).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one mixture with fundamental in `[100, 300]` Hz and an SNR drawn
/// uniformly from the integers `-5..=0` dB.
pub fn synth_pair(len: usize, seed: u64) -> Result<SynthPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.random_range(100.0..300.0);
    let kind = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble][rng.random_range(0..3)];
    let snr = rng.random_range(-5i32..=0) as f64;
    let clean = synth_clean(len, f0, &mut rng);
    let extra = len / 4 + 1;
    let noise = synth_noise(len + extra, kind, &mut rng);
    let spec = MixtureSpec { snr_db: snr, noise_offset: rng.random_range(0..extra), seed };
    let clean = AudioBuffer::new(clean, SAMPLE_RATE, Role::Clean)?;
    let n = AudioBuffer::new(noise, SAMPLE_RATE, Role::Noise)?;
    let (mixture, noise) = mix(&clean, &n, &spec)?;
    Ok(SynthPair { mixture, clean, noise, snr_db: snr, f0, kind, seed })
}

/// `count` mixtures of `duration_s` seconds each, deterministic in `seed`.
pub fn synth_dataset(count: usize, duration_s: f64, seed: u64) -> Result<Vec<SynthPair>> {
    if count == 0 {
        return Err(Error::Empty);
    }
    let len = libm::round(duration_s * SAMPLE_RATE as f64) as usize;
    if len == 0 {
        return Err(Error::Empty);
    }
    (0..count).map(|i| synth_pair(len, derive_seed(seed, i as u64))).collect()
}
