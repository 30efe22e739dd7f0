//! Flat, strict experiment configuration.
//!
//! Every key has a documented default, so an empty file is a valid config.
//! Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::encoder::{AamConfig, EncoderConfig, PretrainConfig};
use crate::enhancement::MaskNetConfig;
use crate::error::{invalid, Error, Result};
use crate::features::FeatureConfig;
use crate::fusion::UNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// pretrained start, EMA shadow used for evaluation
    Ema,
    /// pretrained and frozen
    Fixed,
    /// random init, plain backprop
    Scratch,
    /// pretrained start, plain backprop
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Unet,
    Linear,
}

/// Which encoder copy produces evaluation embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalCopy {
    Ema,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub utt_duration_s: f64,
    pub segment_s: f64,
    pub n_eval_speakers: usize,
    pub eval_utts_per_speaker: usize,
    pub noise_clips_per_kind: usize,
    pub noise_clip_s: f64,

    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,

    /// Enhancer names in channel order.
    pub enhancers: Vec<String>,
    pub ss_oversubtraction: f64,
    pub ss_floor: f64,
    pub mask_hidden: usize,
    pub mask_bottleneck: usize,
    pub mask_epochs: usize,
    pub mask_train_pairs: usize,

    pub unet_channels: Vec<usize>,
    pub skip_connections: bool,

    pub encoder_channels: usize,
    pub encoder_dilations: Vec<usize>,
    pub embedding_dim: usize,
    pub aam_margin: f64,
    pub aam_scale: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,

    pub ema_alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Segments drawn per joint-training epoch; 0 uses the whole training set.
    pub segments_per_epoch: usize,
    pub train_snrs: Vec<f64>,
    pub clean_fraction: f64,
    pub train_head: bool,

    pub use_noisy_channel: bool,
    /// Subset of `enhancers` feeding the fusion input; all when absent.
    pub enabled_enhancers: Option<Vec<String>>,
    pub encoder_mode: EncoderMode,
    pub interp_mode: InterpMode,
    pub interp_weight: f64,
    pub eval_copy: EvalCopy,

    pub eval_snrs: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_speakers: 20,
            utts_per_speaker: 50,
            utt_duration_s: 3.0,
            segment_s: 2.0,
            n_eval_speakers: 10,
            eval_utts_per_speaker: 8,
            noise_clips_per_kind: 8,
            noise_clip_s: 8.0,
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            enhancers: vec!["spectral_subtraction".into(), "mask_net".into()],
            ss_oversubtraction: 2.0,
            ss_floor: 0.05,
            mask_hidden: 128,
            mask_bottleneck: 48,
            mask_epochs: 12,
            mask_train_pairs: 200,
            unet_channels: vec![32, 64, 128, 256],
            skip_connections: true,
            encoder_channels: 64,
            encoder_dilations: vec![1, 2, 3],
            embedding_dim: 192,
            aam_margin: 0.2,
            aam_scale: 30.0,
            pretrain_epochs: 10,
            pretrain_batch_size: 32,
            ema_alpha: 0.999,
            lr: 1e-3,
            epochs: 5,
            batch_size: 32,
            segments_per_epoch: 0,
            train_snrs: vec![-5.0, 0.0, 5.0, 10.0],
            clean_fraction: 0.2,
            train_head: true,
            use_noisy_channel: true,
            enabled_enhancers: None,
            encoder_mode: EncoderMode::Ema,
            interp_mode: InterpMode::Unet,
            interp_weight: 0.5,
            eval_copy: EvalCopy::Ema,
            eval_snrs: vec![-5.0, 0.0, 5.0, 10.0],
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            if let Some(rest) = msg.strip_prefix("unknown field `") {
                let key = rest.split('`').next().unwrap_or_default();
                return Error::UnknownKey(key.to_string());
            }
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            Error::Config { line, msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        crate::nn::hex_string(&Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_config().validate()?;
        self.encoder_config().validate()?;
        self.aam_config().validate()?;
        if self.enhancers.is_empty() {
            return Err(invalid("at least one enhancer must be registered"));
        }
        for name in &self.enhancers {
            if !KNOWN_ENHANCERS.contains(&name.as_str()) {
                return Err(invalid(format!(
                    "unknown enhancer `{name}` (known: {})",
                    KNOWN_ENHANCERS.join(", ")
                )));
            }
        }
        let mut dedup = self.enhancers.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != self.enhancers.len() {
            return Err(invalid("enhancer list has duplicates"));
        }
        let enabled = self.enabled_enhancer_names();
        if let Some(bad) = enabled.iter().find(|n| !self.enhancers.contains(n)) {
            return Err(invalid(format!(
                "enabled enhancer `{bad}` is not registered"
            )));
        }
        if enabled.is_empty() && !self.use_noisy_channel {
            return Err(invalid("at least one fusion input channel must be enabled"));
        }
        if self.interp_mode == InterpMode::Linear && enabled.is_empty() {
            return Err(invalid("linear interpolation needs an enhanced signal"));
        }
        if !(0.0..=1.0).contains(&self.interp_weight) {
            return Err(invalid(format!(
                "interp_weight {} outside [0, 1]",
                self.interp_weight
            )));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(invalid(format!(
                "ema_alpha {} outside [0, 1)",
                self.ema_alpha
            )));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("lr must be positive"));
        }
        if self.batch_size < 2 || self.pretrain_batch_size < 2 {
            return Err(invalid("batch sizes must be at least 2"));
        }
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return Err(invalid("epoch counts must be positive"));
        }
        if self.n_speakers < 2 {
            return Err(invalid("need at least two training speakers"));
        }
        if self.segment_s > self.utt_duration_s || !(self.segment_s > 0.0) {
            return Err(invalid(
                "segment_s must be positive and at most utt_duration_s",
            ));
        }
        if self.noise_clip_s < self.segment_s {
            return Err(invalid("noise clips must be at least one segment long"));
        }
        if self.noise_clips_per_kind == 0 {
            return Err(invalid("noise_clips_per_kind must be positive"));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(invalid("clean_fraction outside [0, 1]"));
        }
        if self.train_snrs.is_empty() && self.clean_fraction < 1.0 {
            return Err(invalid(
                "train_snrs is empty but noisy batches are requested",
            ));
        }
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            return Err(invalid("unet_channels must be non-empty and positive"));
        }
        if self
            .train_snrs
            .iter()
            .chain(&self.eval_snrs)
            .any(|s| !s.is_finite())
        {
            return Err(invalid("SNR lists must be finite"));
        }
        Ok(())
    }

    fn corpus_spec_unchecked(&self) -> CorpusSpec {
        CorpusSpec {
            n_speakers: self.n_speakers,
            utts_per_speaker: self.utts_per_speaker,
            utt_duration_s: self.utt_duration_s,
            segment_s: self.segment_s,
            n_eval_speakers: self.n_eval_speakers,
            eval_utts_per_speaker: self.eval_utts_per_speaker,
            seed: self.seed,
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        self.corpus_spec_unchecked()
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            n_mels: self.n_mels,
            win_ms: self.win_ms,
            hop_ms: self.hop_ms,
            n_fft: self.n_fft,
            ..FeatureConfig::default()
        }
    }

    pub fn enabled_enhancer_names(&self) -> Vec<String> {
        match &self.enabled_enhancers {
            None => self.enhancers.clone(),
            Some(list) => self
                .enhancers
                .iter()
                .filter(|n| list.contains(n))
                .cloned()
                .chain(list.iter().filter(|n| !self.enhancers.contains(n)).cloned())
                .collect(),
        }
    }

    /// Channels of the fusion input.
    pub fn fusion_channels(&self) -> usize {
        self.enabled_enhancer_names().len() + usize::from(self.use_noisy_channel)
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.fusion_channels(),
            encoder_channels: self.unet_channels.clone(),
            skip_connections: self.skip_connections,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            n_mels: self.n_mels,
            channels: self.encoder_channels,
            kernel: 3,
            dilations: self.encoder_dilations.clone(),
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn aam_config(&self) -> AamConfig {
        AamConfig {
            margin: self.aam_margin,
            scale: self.aam_scale,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            lr: self.lr,
            segment_s: self.segment_s,
            seed: crate::seed::derive(self.seed, "pretrain", 0),
        }
    }

    pub fn mask_config(&self) -> MaskNetConfig {
        MaskNetConfig {
            hidden: self.mask_hidden,
            bottleneck: self.mask_bottleneck,
            epochs: self.mask_epochs,
            seed: crate::seed::derive(self.seed, "mask-net", 0),
            ..MaskNetConfig::default()
        }
    }
}

pub const KNOWN_ENHANCERS: [&str; 2] = ["spectral_subtraction", "mask_net"];

/// One row of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arm {
    All,
    NoNoisyInput,
    WithoutEnhancer(String),
    Fixed,
    Scratch,
    Finetune,
}

impl Arm {
    /// The seven rows for a two-enhancer registry, in table order.
    pub fn matrix(enhancers: &[String]) -> Vec<Arm> {
        let mut arms = vec![Arm::All, Arm::NoNoisyInput];
        arms.extend(enhancers.iter().cloned().map(Arm::WithoutEnhancer));
        arms.extend([Arm::Fixed, Arm::Scratch, Arm::Finetune]);
        arms
    }

    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            Arm::All => {}
            Arm::NoNoisyInput => cfg.use_noisy_channel = false,
            Arm::WithoutEnhancer(name) => {
                let mut enabled = base.enabled_enhancer_names();
                if !enabled.contains(name) {
                    return Err(invalid(format!("enhancer `{name}` is not enabled")));
                }
                enabled.retain(|n| n != name);
                cfg.enabled_enhancers = Some(enabled);
            }
            Arm::Fixed => cfg.encoder_mode = EncoderMode::Fixed,
            Arm::Scratch => cfg.encoder_mode = EncoderMode::Scratch,
            Arm::Finetune => cfg.encoder_mode = EncoderMode::Finetune,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::All => f.write_str("all"),
            Arm::NoNoisyInput => f.write_str("no-noisy-input"),
            Arm::WithoutEnhancer(n) => write!(f, "without-{n}"),
            Arm::Fixed => f.write_str("fixed"),
            Arm::Scratch => f.write_str("scratch"),
            Arm::Finetune => f.write_str("finetune"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Arm::All,
            "no-noisy-input" => Arm::NoNoisyInput,
            "fixed" => Arm::Fixed,
            "scratch" => Arm::Scratch,
            "finetune" => Arm::Finetune,
            other => match other.strip_prefix("without-") {
                Some(name) if !name.is_empty() => Arm::WithoutEnhancer(name.to_string()),
                _ => return Err(invalid(format!("unknown ablation arm `{s}`"))),
            },
        })
    }
}
