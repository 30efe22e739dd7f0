//! Synthetic speaker/noise corpus, SNR mixing, segment cropping and WAV I/O.

mod condition;
mod mix;
mod pool;
mod synth;
mod wav;

pub use condition::{Condition, ConditionKind, NoiseCondition, NoiseKind, Pool};
pub use mix::{crop, mix_at_snr, mix_at_snr_parts, truncate_or_pad, truncate_segment, Mixture};
pub use pool::{
    build_eval_set, build_training_set, eval_speakers, training_speakers, CorpusSpec, NoiseBank,
    PoolRegistry, Utterance,
};
pub use synth::{
    babble_components, synth_babble, synth_noise, synth_utterance, Formant, SpeakerSpec,
    BABBLE_VOICES,
};
pub use wav::{load_wav, read_manifest, write_manifest, write_wav, ManifestEntry};

use crate::error::{invalid, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("waveform must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square power.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * c).collect(),
            self.sample_rate,
        )
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Scale so the absolute peak equals `target` (no-op on silence).
pub(crate) fn peak_normalize(x: &mut [f64], target: f64) {
    let peak = x.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let g = target / peak;
        x.iter_mut().for_each(|s| *s *= g);
    }
}
