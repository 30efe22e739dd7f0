use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{invalid, Error, Result};

const PCM_SCALE: f64 = 32768.0;

/// Read a mono 16-bit PCM WAV file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::ChannelCount(spec.channels));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} {}-bit (only 16-bit PCM is supported)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Write as mono 16-bit PCM. Samples outside the representable range clip.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &s in w.samples() {
        let q = (s * PCM_SCALE)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64);
        writer.write_sample(q as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: u32,
    pub relative_path: PathBuf,
}

/// Corpus manifest: one `utt_id<TAB>speaker_id<TAB>relative_path` per line.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(
            f,
            "{}\t{}\t{}",
            e.utt_id,
            e.speaker_id,
            e.relative_path.display()
        )?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [utt, spk, rel] = fields[..] else {
            return Err(invalid(format!(
                "manifest line {}: expected 3 tab-separated fields",
                i + 1
            )));
        };
        let speaker_id = spk
            .parse()
            .map_err(|_| invalid(format!("manifest line {}: bad speaker id `{spk}`", i + 1)))?;
        out.push(ManifestEntry {
            utt_id: utt.to_string(),
            speaker_id,
            relative_path: PathBuf::from(rel),
        });
    }
    Ok(out)
}
