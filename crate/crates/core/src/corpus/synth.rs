//! Deterministic generators for voices, wideband noise, music and babble.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{peak_normalize, NoiseKind, Waveform, SAMPLE_RATE};
use crate::error::{invalid, Result};
use crate::seed;

const PEAK: f64 = 0.9;
const MAX_HARMONIC_HZ: f64 = 7000.0;

/// Number of overlapping voices in generated babble.
pub const BABBLE_VOICES: usize = 6;

/// Speaker ids at or above this value are reserved for babble talkers.
const BABBLE_SPEAKER_BASE: u32 = 1_000_000;

/// Formant-center multipliers per vowel; shared by all speakers.
const VOWELS: [[f64; 4]; 5] = [
    [1.00, 1.00, 1.00, 1.00],
    [1.18, 0.88, 0.98, 1.00],
    [0.82, 1.14, 1.03, 1.01],
    [1.10, 1.08, 0.96, 0.99],
    [0.90, 0.86, 1.05, 1.02],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: u32,
    pub fundamental_hz: f64,
    pub formants: Vec<Formant>,
    pub seed: u64,
}

impl SpeakerSpec {
    /// Draw a random voice. Distinct seeds give distinct profiles with
    /// probability one.
    pub fn random(speaker_id: u32, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "speaker", speaker_id as u64));
        let fundamental_hz = rng.gen_range(85.0..240.0);
        let f1 = rng.gen_range(320.0..880.0);
        let f2 = f1 + rng.gen_range(450.0..1300.0);
        let f3 = f2 + rng.gen_range(500.0..1000.0);
        let f4 = f3 + rng.gen_range(400.0..900.0);
        let base_gain = [1.0, 0.65, 0.4, 0.25];
        let formants = [f1, f2, f3, f4]
            .iter()
            .zip(base_gain)
            .map(|(&c, g)| Formant {
                center_hz: c,
                bandwidth_hz: rng.gen_range(70.0..220.0),
                gain: g * rng.gen_range(0.75..1.25),
            })
            .collect();
        Self {
            speaker_id,
            fundamental_hz,
            formants,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fundamental_hz > 0.0) {
            return Err(invalid("fundamental_hz must be positive"));
        }
        if self.formants.is_empty() {
            return Err(invalid("formant profile is empty"));
        }
        for pair in self.formants.windows(2) {
            if !(pair[1].center_hz > pair[0].center_hz) {
                return Err(invalid("formant centers must be strictly increasing"));
            }
        }
        if self
            .formants
            .iter()
            .any(|f| !(f.bandwidth_hz > 0.0) || !(f.gain >= 0.0))
        {
            return Err(invalid(
                "formant bandwidths must be positive and gains non-negative",
            ));
        }
        Ok(())
    }

    /// Spectral envelope at `freq`, with per-formant center multipliers.
    fn envelope(&self, freq: f64, mult: &[f64]) -> f64 {
        let resonances: f64 = self
            .formants
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let c = f.center_hz * mult.get(i).copied().unwrap_or(1.0);
                let d = (freq - c) / (0.5 * f.bandwidth_hz);
                f.gain / (1.0 + d * d)
            })
            .sum();
        resonances + 0.01 / (1.0 + freq / 1000.0)
    }
}

fn samples_for(duration_s: f64) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(invalid(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    if n == 0 {
        return Err(invalid("duration shorter than one sample"));
    }
    Ok(n)
}

/// Voiced "syllables" from a jittered harmonic source shaped by the
/// speaker's formants, separated by short silences.
pub fn synth_utterance(
    spec: &SpeakerSpec,
    duration_s: f64,
    utterance_seed: u64,
) -> Result<Waveform> {
    spec.validate()?;
    let n = samples_for(duration_s)?;
    let sr = SAMPLE_RATE as f64;
    let mut rng = seed::rng(seed::derive(
        spec.seed ^ spec.speaker_id as u64,
        "utterance",
        utterance_seed,
    ));

    let pitch_scale = 1.0 + rng.gen_range(-0.06..0.06);
    let jitter: Vec<f64> = spec
        .formants
        .iter()
        .map(|_| 1.0 + rng.gen_range(-0.03..0.03))
        .collect();

    let mut out = vec![0.0; n];
    let mut pos = (rng.gen_range(0.0..0.04) * sr) as usize;
    let mut phase = 0.0_f64;
    let ramp = 0.015 * sr;
    while pos < n {
        let syl_len = (rng.gen_range(0.12..0.30) * sr) as usize;
        let gap = (rng.gen_range(0.02..0.07) * sr) as usize;
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        let mult: Vec<f64> = jitter.iter().zip(vowel).map(|(j, v)| j * v).collect();
        let amp = rng.gen_range(0.6..1.0);
        let f_start = spec.fundamental_hz * pitch_scale * (1.0 + rng.gen_range(-0.08..0.08));
        let f_end = spec.fundamental_hz * pitch_scale * (1.0 + rng.gen_range(-0.08..0.08));
        let f_mid = 0.5 * (f_start + f_end);
        let n_harm = ((MAX_HARMONIC_HZ / f_mid).floor() as usize).max(1);
        let harm: Vec<f64> = (1..=n_harm)
            .map(|k| spec.envelope(k as f64 * f_mid, &mult))
            .collect();
        let vib_phase = rng.gen_range(0.0..2.0 * PI);

        for i in 0..syl_len {
            let idx = pos + i;
            if idx >= n {
                break;
            }
            let frac = i as f64 / syl_len as f64;
            let t = idx as f64 / sr;
            let f0 = (f_start + (f_end - f_start) * frac)
                * (1.0 + 0.01 * (2.0 * PI * 5.5 * t + vib_phase).sin());
            phase += 2.0 * PI * f0 / sr;
            if phase > 2.0 * PI {
                phase -= 2.0 * PI;
            }
            let env = (i as f64 / ramp).min(1.0) * ((syl_len - i) as f64 / ramp).min(1.0);
            // sin(kφ) by the Chebyshev recurrence
            let (s1, c1) = phase.sin_cos();
            let two_c = 2.0 * c1;
            let (mut s_prev, mut s_k) = (0.0, s1);
            let mut acc = 0.0;
            for &a in &harm {
                acc += a * s_k;
                let next = two_c * s_k - s_prev;
                s_prev = s_k;
                s_k = next;
            }
            let breath: f64 = StandardNormal.sample(&mut rng);
            out[idx] += amp * env * (acc + 0.004 * breath);
        }
        pos += syl_len + gap;
    }
    peak_normalize(&mut out, PEAK);
    Waveform::new(out, SAMPLE_RATE)
}

fn synth_wideband(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(seed, "noise", 0));
    let sr = SAMPLE_RATE as f64;
    let pole = rng.gen_range(0.2..0.75);
    let mix = rng.gen_range(0.3..0.7);
    let fm = rng.gen_range(0.2..1.0);
    let depth = rng.gen_range(0.1..0.35);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let mut lp = 0.0;
    (0..n)
        .map(|i| {
            let w: f64 = StandardNormal.sample(&mut rng);
            lp = pole * lp + (1.0 - pole) * w;
            let am = 1.0 + depth * (2.0 * PI * fm * i as f64 / sr + phi).sin();
            am * (mix * w + (1.0 - mix) * 2.0 * lp)
        })
        .collect()
}

fn synth_music(n: usize, seed: u64) -> Vec<f64> {
    const CHORDS: [&[i32]; 4] = [&[0, 4, 7], &[0, 3, 7], &[0, 4, 7, 11], &[0, 5, 9]];
    let mut rng = seed::rng(seed::derive(seed, "music", 0));
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0; n];
    let mut pos = 0usize;
    while pos < n {
        let dur = (rng.gen_range(0.35..0.9) * sr) as usize;
        let root = rng.gen_range(40..64);
        let chord = CHORDS[rng.gen_range(0..CHORDS.len())];
        let tau = rng.gen_range(0.3..0.8) * sr;
        let tail = (dur + (0.4 * sr) as usize).min(n - pos);
        for (ni, &interval) in chord.iter().chain(std::iter::once(&-12)).enumerate() {
            let midi = root + interval;
            let f = 440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0);
            let gain = if ni == chord.len() { 0.6 } else { 1.0 };
            let phase0 = rng.gen_range(0.0..2.0 * PI);
            for k in 1..=6 {
                let fk = f * k as f64;
                if fk > MAX_HARMONIC_HZ {
                    break;
                }
                let a = gain / (k as f64).powf(1.2);
                let w = 2.0 * PI * fk / sr;
                for i in 0..tail {
                    let env = (i as f64 / (0.01 * sr)).min(1.0) * (-(i as f64) / tau).exp();
                    out[pos + i] += a * env * (w * i as f64 + phase0 * k as f64).sin();
                }
            }
        }
        pos += dur;
    }
    out
}

fn babble_speaker(seed: u64, voice: usize) -> SpeakerSpec {
    SpeakerSpec::random(
        BABBLE_SPEAKER_BASE + voice as u32,
        seed::derive(seed, "babble-speaker", voice as u64),
    )
}

/// The individual talkers that make up a babble signal.
pub fn babble_components(duration_s: f64, seed: u64, voices: usize) -> Result<Vec<Waveform>> {
    if voices == 0 {
        return Err(invalid("babble needs at least one voice"));
    }
    (0..voices)
        .map(|v| {
            synth_utterance(
                &babble_speaker(seed, v),
                duration_s,
                seed::derive(seed, "babble-utt", v as u64),
            )
        })
        .collect()
}

/// Peak-normalized sum of `voices` independent talkers.
pub fn synth_babble(duration_s: f64, seed: u64, voices: usize) -> Result<Waveform> {
    let parts = babble_components(duration_s, seed, voices)?;
    let mut sum = vec![0.0; parts[0].len()];
    for p in &parts {
        for (acc, s) in sum.iter_mut().zip(p.samples()) {
            *acc += s;
        }
    }
    peak_normalize(&mut sum, PEAK);
    Waveform::new(sum, SAMPLE_RATE)
}

pub fn synth_noise(kind: NoiseKind, duration_s: f64, seed: u64) -> Result<Waveform> {
    let n = samples_for(duration_s)?;
    let mut samples = match kind {
        NoiseKind::Noise => synth_wideband(n, seed),
        NoiseKind::Music => synth_music(n, seed),
        NoiseKind::Babble => return synth_babble(duration_s, seed, BABBLE_VOICES),
    };
    peak_normalize(&mut samples, PEAK);
    Waveform::new(samples, SAMPLE_RATE)
}
