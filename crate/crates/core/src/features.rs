//! Log-mel features and the multi-channel fusion input.

use serde::{Deserialize, Serialize};

use crate::corpus::Waveform;
use crate::dsp::Stft;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub log_eps: f64,
    pub sample_rate: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            log_eps: 1e-6,
            sample_rate: 16_000,
        }
    }
}

impl FeatureConfig {
    pub fn win_len(&self) -> usize {
        (self.win_ms * 1e-3 * self.sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * 1e-3 * self.sample_rate as f64).round() as usize
    }

    /// `1 + floor((len - win) / hop)`, or 0 when no frame fits.
    pub fn frames_for(&self, len: usize) -> usize {
        let (win, hop) = (self.win_len(), self.hop_len());
        if len < win {
            0
        } else {
            1 + (len - win) / hop
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (win, hop) = (self.win_len(), self.hop_len());
        if self.n_mels == 0 {
            return Err(invalid("n_mels must be positive"));
        }
        if hop == 0 || win < hop || self.n_fft < win {
            return Err(invalid(format!(
                "need 0 < hop ({hop}) <= window ({win}) <= n_fft ({})",
                self.n_fft
            )));
        }
        if !(self.log_eps > 0.0) {
            return Err(invalid("log_eps must be positive"));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular filters from 0 Hz to Nyquist, `n_mels × bins`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<f64> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[m * bins + k] = w;
        }
    }
    fb
}

/// A `frames × n_mels` log-mel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeature {
    values: Vec<f64>,
    frames: usize,
    n_mels: usize,
    pub frame_len_s: f64,
    pub frame_hop_s: f64,
}

impl MelFeature {
    pub fn new(values: Vec<f64>, frames: usize, n_mels: usize) -> Result<Self> {
        if values.len() != frames * n_mels || frames == 0 || n_mels == 0 {
            return Err(invalid(format!(
                "feature of {} values cannot be shaped {frames}×{n_mels}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature contains non-finite values"));
        }
        Ok(Self {
            values,
            frames,
            n_mels,
            frame_len_s: 0.025,
            frame_hop_s: 0.010,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.n_mels + f]
    }

    /// Subtract the per-bin mean over time.
    pub fn mean_normalized(&self) -> Self {
        let mut out = self.clone();
        for f in 0..self.n_mels {
            let mean = (0..self.frames).map(|t| self.get(t, f)).sum::<f64>() / self.frames as f64;
            for t in 0..self.frames {
                out.values[t * self.n_mels + f] -= mean;
            }
        }
        out
    }
}

/// Reusable extractor holding the window, FFT plan and filterbank.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    stft: Stft,
    filters: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let stft = Stft::new(config.n_fft, config.win_len(), config.hop_len());
        let filters = mel_filterbank(config.n_mels, config.n_fft, config.sample_rate);
        Ok(Self {
            config,
            stft,
            filters,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn extract(&self, w: &Waveform) -> Result<MelFeature> {
        if w.sample_rate() != self.config.sample_rate {
            return Err(invalid(format!(
                "waveform at {} Hz, features configured for {} Hz",
                w.sample_rate(),
                self.config.sample_rate
            )));
        }
        let frames = self.config.frames_for(w.len());
        if frames == 0 {
            return Err(invalid(format!(
                "{} samples is shorter than one {}-sample frame",
                w.len(),
                self.config.win_len()
            )));
        }
        let spec = self.stft.analyze(w.samples());
        let bins = spec.bins;
        let n_mels = self.config.n_mels;
        let mut values = Vec::with_capacity(frames * n_mels);
        let mut mag = vec![0.0; bins];
        for t in 0..frames {
            for (m, c) in mag.iter_mut().zip(spec.frame(t)) {
                *m = c.norm();
            }
            for f in 0..n_mels {
                let row = &self.filters[f * bins..(f + 1) * bins];
                let e: f64 = row.iter().zip(&mag).map(|(a, b)| a * b).sum();
                values.push((e + self.config.log_eps).ln());
            }
        }
        let mut feat = MelFeature::new(values, frames, n_mels)?;
        feat.frame_len_s = self.config.win_ms * 1e-3;
        feat.frame_hop_s = self.config.hop_ms * 1e-3;
        Ok(feat)
    }
}

/// Magnitude STFT → mel filterbank → `ln(x + eps)`.
pub fn log_mel(w: &Waveform, config: &FeatureConfig) -> Result<MelFeature> {
    FeatureExtractor::new(config.clone())?.extract(w)
}

/// `channels × frames × n_mels`; channel order is the caller's stacking order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelFeature {
    channels: usize,
    frames: usize,
    n_mels: usize,
    values: Vec<f64>,
}

impl MultiChannelFeature {
    pub fn from_channels(chans: &[&MelFeature]) -> Result<Self> {
        let first = chans
            .first()
            .ok_or_else(|| invalid("cannot stack zero channels"))?;
        let shape = first.shape();
        let mut values = Vec::with_capacity(chans.len() * shape.0 * shape.1);
        for (i, c) in chans.iter().enumerate() {
            if c.shape() != shape {
                return Err(invalid(format!(
                    "channel {i} has shape {:?}, expected {:?}",
                    c.shape(),
                    shape
                )));
            }
            values.extend_from_slice(c.values());
        }
        Ok(Self {
            channels: chans.len(),
            frames: shape.0,
            n_mels: shape.1,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, i: usize) -> MelFeature {
        let n = self.frames * self.n_mels;
        MelFeature::new(
            self.values[i * n..(i + 1) * n].to_vec(),
            self.frames,
            self.n_mels,
        )
        .expect("channel shape is consistent")
    }

    pub fn unstack(&self) -> Vec<MelFeature> {
        (0..self.channels).map(|i| self.channel(i)).collect()
    }
}

/// Channel 0 is the noisy feature, channels `1..=N` the enhancer outputs.
pub fn stack_channels(noisy: &MelFeature, enhanced: &[MelFeature]) -> Result<MultiChannelFeature> {
    if enhanced.is_empty() {
        return Err(invalid("at least one enhanced feature is required"));
    }
    let mut all = vec![noisy];
    all.extend(enhanced.iter());
    MultiChannelFeature::from_channels(&all).map_err(|e| match e {
        crate::Error::InvalidArgument(msg) => invalid(format!(
            "{msg} (channel 0 is noisy, channel i is enhancer i)"
        )),
        other => other,
    })
}
