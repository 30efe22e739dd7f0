use rand::Rng;

use super::{mean_square, Waveform};
use crate::error::{invalid, Error, Result};
use crate::seed;

/// The pieces of an additive mixture, kept so SNR can be re-measured.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixture: Waveform,
    pub scaled_noise: Waveform,
    pub gain: f64,
}

/// `noise[offset .. offset + len]`. Never wraps around.
pub fn crop(noise: &Waveform, offset: usize, len: usize) -> Result<Waveform> {
    let end = offset
        .checked_add(len)
        .filter(|&e| e <= noise.len())
        .ok_or_else(|| {
            invalid(format!(
                "crop [{offset}, {offset}+{len}) exceeds waveform of {} samples",
                noise.len()
            ))
        })?;
    Waveform::new(noise.samples()[offset..end].to_vec(), noise.sample_rate())
}

/// Mix `clean` with the leading `clean.len()` samples of `noise`, scaled so
/// the clean-to-noise power ratio over the mixed region is `snr_db`.
pub fn mix_at_snr_parts(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(invalid(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    if noise.len() < clean.len() {
        return Err(invalid(format!(
            "noise ({} samples) shorter than clean ({} samples); noise is never looped",
            noise.len(),
            clean.len()
        )));
    }
    if !snr_db.is_finite() {
        return Err(invalid("snr_db must be finite"));
    }
    let region = &noise.samples()[..clean.len()];
    let p_clean = clean.power();
    let p_noise = mean_square(region);
    if p_clean <= 0.0 {
        return Err(Error::DegenerateInput("clean signal has zero power".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::DegenerateInput(
            "noise has zero power over the mixed region".into(),
        ));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = region.iter().map(|n| gain * n).collect();
    let mixed: Vec<f64> = clean
        .samples()
        .iter()
        .zip(&scaled)
        .map(|(c, n)| c + n)
        .collect();
    Ok(Mixture {
        mixture: Waveform::new(mixed, clean.sample_rate())?,
        scaled_noise: Waveform::new(scaled, clean.sample_rate())?,
        gain,
    })
}

pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    mix_at_snr_parts(clean, noise, snr_db).map(|m| m.mixture)
}

fn segment_len(w: &Waveform, seconds: f64) -> Result<usize> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(invalid(format!(
            "segment length must be positive, got {seconds}"
        )));
    }
    let len = (seconds * w.sample_rate() as f64).round() as usize;
    if len == 0 {
        return Err(invalid("segment shorter than one sample"));
    }
    Ok(len)
}

/// Crop offset for a waveform of `total` samples: uniform over
/// `0..=total - len` from a ChaCha8 generator seeded with `seed`.
fn crop_offset(total: usize, len: usize, seed: u64) -> usize {
    seed::rng(seed).gen_range(0..=total - len)
}

/// Contiguous crop of exactly `seconds`, offset drawn from `seed`.
pub fn truncate_segment(w: &Waveform, seconds: f64, seed: u64) -> Result<Waveform> {
    let len = segment_len(w, seconds)?;
    if w.len() < len {
        return Err(invalid(format!(
            "waveform of {} samples shorter than the {len}-sample segment",
            w.len()
        )));
    }
    crop(w, crop_offset(w.len(), len, seed), len)
}

/// Like [`truncate_segment`], but short inputs are extended by reflection
/// instead of failing. The flag reports whether padding happened.
pub fn truncate_or_pad(w: &Waveform, seconds: f64, seed: u64) -> Result<(Waveform, bool)> {
    let len = segment_len(w, seconds)?;
    if w.len() >= len {
        return Ok((crop(w, crop_offset(w.len(), len, seed), len)?, false));
    }
    let src = w.samples();
    let n = src.len();
    let padded: Vec<f64> = (0..len)
        .map(|i| {
            if n == 1 {
                return src[0];
            }
            // reflect without repeating the edge sample
            let period = 2 * (n - 1);
            let j = i % period;
            src[if j < n { j } else { period - j }]
        })
        .collect();
    Ok((Waveform::new(padded, w.sample_rate())?, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000).unwrap()
    }

    #[test]
    fn equal_power_gains() {
        let clean = wf(vec![1.0, -1.0, 1.0, -1.0]);
        let noise = wf(vec![-1.0, 1.0, 1.0, -1.0, 7.0]);
        let m = mix_at_snr_parts(&clean, &noise, 0.0).unwrap();
        assert_eq!(m.gain, 1.0);
        let m = mix_at_snr_parts(&clean, &noise, 20.0).unwrap();
        assert!((m.gain - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mixing_errors() {
        let clean = wf(vec![0.0; 4]);
        let noise = wf(vec![1.0; 4]);
        assert!(matches!(
            mix_at_snr(&clean, &noise, 0.0),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            mix_at_snr(&noise, &clean, 0.0),
            Err(Error::DegenerateInput(_))
        ));
        let short = wf(vec![1.0; 3]);
        assert!(mix_at_snr(&noise, &short, 0.0).is_err());
        let other_rate = Waveform::new(vec![1.0; 8], 8_000).unwrap();
        assert!(mix_at_snr(&noise, &other_rate, 0.0).is_err());
    }

    #[test]
    fn noise_is_cropped_from_the_start() {
        let clean = wf(vec![1.0, 1.0]);
        let noise = wf(vec![1.0, 1.0, 100.0]);
        let m = mix_at_snr(&clean, &noise, 0.0).unwrap();
        assert_eq!(m.samples(), &[2.0, 2.0]);
    }

    #[test]
    fn truncation_lengths_and_errors() {
        let w = wf((0..64_000).map(|i| (i as f64 * 1e-3).sin()).collect());
        let seg = truncate_segment(&w, 2.0, 3).unwrap();
        assert_eq!(seg.len(), 32_000);
        assert_eq!(seg, truncate_segment(&w, 2.0, 3).unwrap());
        let short = wf(vec![0.5; 100]);
        assert!(truncate_segment(&short, 2.0, 3).is_err());
        let (padded, flagged) = truncate_or_pad(&short, 0.01, 3).unwrap();
        assert!(flagged);
        assert_eq!(padded.len(), 160);
        let (_, flagged) = truncate_or_pad(&w, 2.0, 3).unwrap();
        assert!(!flagged);
    }

    #[test]
    fn reflection_padding_mirrors() {
        let w = wf(vec![0.0, 1.0, 2.0]);
        let (p, _) = truncate_or_pad(&w, 7.0 / 16_000.0, 0).unwrap();
        assert_eq!(p.samples(), &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
    }

    proptest::proptest! {
        #[test]
        fn achieved_snr_matches_request(snr in -20.0f64..40.0, seed in 0u64..1000, extra in 0usize..400) {
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = crate::seed::rng(seed);
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let clean = wf(draw(800));
            let noise = wf(draw(800 + extra).iter().map(|v| 0.2 * v).collect());
            let m = mix_at_snr_parts(&clean, &noise, snr).unwrap();
            let achieved = 10.0 * (clean.power() / m.scaled_noise.power()).log10();
            proptest::prop_assert!((achieved - snr).abs() < 1e-9);
            for ((x, c), n) in m.mixture.samples().iter().zip(clean.samples()).zip(m.scaled_noise.samples()) {
                proptest::prop_assert_eq!(*x, c + n);
            }
        }
    }
}
