//! Short-time Fourier analysis/synthesis shared by features and enhancers.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex spectrogram, frames × bins, row-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    win_len: usize,
    hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("win_len", &self.win_len)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    /// Panics unless `0 < hop <= win_len <= n_fft`.
    pub fn new(n_fft: usize, win_len: usize, hop: usize) -> Self {
        assert!(
            hop > 0 && hop <= win_len && win_len <= n_fft,
            "bad STFT geometry"
        );
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            win_len,
            hop,
            window: hann(win_len),
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    /// Frames that fit entirely inside a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            1 + (len - self.win_len) / self.hop
        }
    }

    /// Uncentered analysis: frame `t` covers `x[t*hop .. t*hop + win_len]`.
    pub fn analyze(&self, x: &[f64]) -> Spectrogram {
        let frames = self.frame_count(x.len());
        let bins = self.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = t * self.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                b.re = x[start + i] * w;
            }
            self.fwd.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrogram { frames, bins, data }
    }

    /// Analysis over a zero-padded copy of `x` so that every sample is
    /// covered by a full set of overlapping frames; pair with [`Self::synthesize`].
    pub fn analyze_padded(&self, x: &[f64]) -> Spectrogram {
        let mut padded = vec![0.0; self.win_len];
        padded.extend_from_slice(x);
        padded.extend(std::iter::repeat(0.0).take(self.win_len + self.hop));
        self.analyze(&padded)
    }

    /// Weighted overlap-add inverse of [`Self::analyze_padded`], cropped to `len`.
    pub fn synthesize(&self, spec: &Spectrogram, len: usize) -> Vec<f64> {
        let total = (spec.frames.saturating_sub(1)) * self.hop + self.win_len;
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..spec.frames {
            let frame = spec.frame(t);
            buf[..spec.bins].copy_from_slice(frame);
            // Hermitian completion; DC and Nyquist imaginary parts dropped
            buf[0].im = 0.0;
            if self.n_fft % 2 == 0 {
                buf[self.n_fft / 2].im = 0.0;
            }
            for k in spec.bins..self.n_fft {
                buf[k] = buf[self.n_fft - k].conj();
            }
            self.inv.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.win_len {
                let w = self.window[i];
                out[start + i] += buf[i].re * scale * w;
                norm[start + i] += w * w;
            }
        }
        let offset = self.win_len;
        (0..len)
            .map(|i| {
                let j = offset + i;
                if j < total && norm[j] > 1e-10 {
                    out[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_roundtrip_is_identity() {
        let x: Vec<f64> = (0..3001)
            .map(|i| ((i * 7919) % 1013) as f64 / 1013.0 - 0.5)
            .collect();
        for (n_fft, win, hop) in [(512, 512, 128), (512, 400, 160), (256, 256, 128)] {
            let stft = Stft::new(n_fft, win, hop);
            let spec = stft.analyze_padded(&x);
            let y = stft.synthesize(&spec, x.len());
            let err = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "{n_fft}/{win}/{hop}: {err}");
        }
    }

    #[test]
    fn frame_count_formula() {
        let stft = Stft::new(512, 400, 160);
        assert_eq!(stft.frame_count(32_000), 198);
        assert_eq!(stft.frame_count(399), 0);
        assert_eq!(stft.frame_count(400), 1);
    }
}
