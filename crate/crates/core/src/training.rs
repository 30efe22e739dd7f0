//! Joint training of the fusion network and speaker encoder, the ablation
//! matrix and the linear-interpolation sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{EncoderCheckpoint, JointCheckpoint};
use crate::config::{Arm, EncoderMode, EvalCopy, ExperimentConfig, InterpMode};
use crate::corpus::{
    build_eval_set, build_training_set, truncate_segment, Condition, NoiseBank, NoiseCondition,
    NoiseKind, Pool, PoolRegistry, Utterance, Waveform,
};
use crate::ema::EmaState;
use crate::encoder::{
    epoch_order, speaker_classes, steps_per_epoch, AamHead, SpeakerEncoder, StepStats,
};
use crate::enhancement::{
    build_spectral_subtraction, train_mask_enhancer, EnhancerRegistry, MaskTrainReport,
};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{average_waveforms, fusion_input, Evaluator, FrontEnd, Pipeline, Trial};
use crate::features::FeatureExtractor;
use crate::fusion::{Fusion, UNet};
use crate::nn::Adam;
use crate::seed;

pub use crate::evaluation::linear_interp_baseline;

/// Clean speech and noise shared by every stage of an experiment.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    /// unseen speakers; acceptance is gated on this set
    pub eval: Vec<Utterance>,
    /// held-out utterances of the training speakers
    pub eval_seen: Vec<Utterance>,
    pub train_noise: NoiseBank,
    pub test_noise: NoiseBank,
}

impl Corpus {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.corpus_spec();
        let corpus = Self {
            train: build_training_set(&spec)?,
            eval: build_eval_set(&spec, false)?,
            eval_seen: build_eval_set(&spec, true)?,
            train_noise: NoiseBank::build(
                Pool::Train,
                cfg.noise_clips_per_kind,
                cfg.noise_clip_s,
                seed::derive(cfg.seed, "train-noise", 0),
            )?,
            test_noise: NoiseBank::build(
                Pool::Test,
                cfg.noise_clips_per_kind,
                cfg.noise_clip_s,
                seed::derive(cfg.seed, "test-noise", 0),
            )?,
        };
        corpus.pool_registry()?;
        Ok(corpus)
    }

    /// Registers both banks; fails if any noise source is shared.
    pub fn pool_registry(&self) -> Result<PoolRegistry> {
        let mut reg = PoolRegistry::new();
        reg.register_bank(&self.train_noise)?;
        reg.register_bank(&self.test_noise)?;
        Ok(reg)
    }
}

/// Draw a training mixture condition for one sample.
fn noisy_pair(clean: &Waveform, bank: &NoiseBank, snr: Option<f64>, seed: u64) -> Result<Waveform> {
    let condition = match snr {
        None => Condition::clean(),
        Some(s) => {
            let kind = NoiseKind::ALL
                [seed::rng(seed::derive(seed, "kind", 0)).gen_range(0..NoiseKind::ALL.len())];
            Condition::noisy(kind, s)
        }
    };
    bank.corrupt(clean, &NoiseCondition::new(condition, Pool::Train)?, seed)
}

/// Build the enhancer registry named in `cfg`, training the mask network on
/// train-pool mixtures.
pub fn train_enhancers(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<(EnhancerRegistry, Option<MaskTrainReport>)> {
    let mut out = Vec::new();
    let mut report = None;
    for name in &cfg.enhancers {
        match name.as_str() {
            "spectral_subtraction" => out.push(build_spectral_subtraction(
                cfg.ss_oversubtraction,
                cfg.ss_floor,
            )?),
            "mask_net" => {
                let mut pairs = Vec::with_capacity(cfg.mask_train_pairs);
                for i in 0..cfg.mask_train_pairs {
                    let s = seed::derive(cfg.seed, "mask-pairs", i as u64);
                    let mut rng = seed::rng(s);
                    let clean = &corpus.train[rng.gen_range(0..corpus.train.len())].waveform;
                    let snr = *cfg
                        .train_snrs
                        .choose(&mut rng)
                        .ok_or_else(|| invalid("train_snrs is empty"))?;
                    pairs.push((
                        noisy_pair(clean, &corpus.train_noise, Some(snr), s)?,
                        clean.clone(),
                    ));
                }
                let (e, r) = train_mask_enhancer(&pairs, &cfg.mask_config())?;
                tracing::info!(
                    initial = r.initial_mse,
                    last = r.final_mse(),
                    "mask enhancer trained"
                );
                out.push(e);
                report = Some(r);
            }
            other => return Err(invalid(format!("unknown enhancer `{other}`"))),
        }
    }
    Ok((EnhancerRegistry::new(out), report))
}

/// Joint-training driver. All per-step randomness derives from the
/// experiment seed and the step counter, so a checkpoint resumes exactly.
pub struct JointTrainer<'a> {
    cfg: ExperimentConfig,
    corpus: &'a Corpus,
    registry: EnhancerRegistry,
    extractor: FeatureExtractor,
    labels: Vec<usize>,
    pub state: JointCheckpoint,
}

impl<'a> JointTrainer<'a> {
    pub fn new(
        cfg: &ExperimentConfig,
        corpus: &'a Corpus,
        registry: &EnhancerRegistry,
        pretrained: Option<&EncoderCheckpoint>,
    ) -> Result<Self> {
        cfg.validate()?;
        corpus.pool_registry()?;
        let enabled = registry.subset(&cfg.enabled_enhancer_names())?;
        let classes = speaker_classes(&corpus.train);
        let labels = corpus
            .train
            .iter()
            .map(|u| classes[&u.speaker_id])
            .collect();
        let enc_cfg = cfg.encoder_config();
        let fusion_seed = seed::derive(cfg.seed, "fusion", 0);
        let (fusion_net, fusion) = UNet::new::<f32>(&cfg.unet_config(), fusion_seed)?;

        let (encoder, enc_params, head, head_params) = match (cfg.encoder_mode, pretrained) {
            (EncoderMode::Scratch, _) => {
                let s = seed::derive(cfg.seed, "scratch-encoder", 0);
                let (e, p) = SpeakerEncoder::new::<f32>(&enc_cfg, s)?;
                let (h, hp) =
                    AamHead::new::<f32>(classes.len(), enc_cfg.embedding_dim, cfg.aam_config(), s)?;
                (e, p, h, hp)
            }
            (_, None) => {
                return Err(invalid(format!(
                    "encoder mode {:?} needs a pretrained encoder checkpoint",
                    cfg.encoder_mode
                )))
            }
            (_, Some(ck)) => {
                if ck.encoder.config() != &enc_cfg {
                    return Err(invalid(
                        "pretrained encoder architecture differs from the config",
                    ));
                }
                if ck.head.classes != classes.len() {
                    return Err(invalid(
                        "pretrained classifier has a different speaker count",
                    ));
                }
                let mut head = ck.head.clone();
                head.config = cfg.aam_config();
                (
                    ck.encoder.clone(),
                    ck.params.clone(),
                    head,
                    ck.head_params.clone(),
                )
            }
        };
        let alpha = match cfg.encoder_mode {
            EncoderMode::Ema => cfg.ema_alpha,
            _ => 0.0,
        };
        let state = JointCheckpoint {
            config: cfg.clone(),
            fusion_opt: Adam::new(&fusion, cfg.lr),
            fusion_net,
            fusion,
            fusion_init_seed: fusion_seed,
            encoder_opt: Adam::new(&enc_params, cfg.lr),
            encoder,
            ema: EmaState::new(&enc_params, alpha)?,
            head_opt: Adam::new(&head_params, cfg.lr),
            head,
            head_params,
            enhancer_hashes: enabled.hashes(),
            step: 0,
        };
        Ok(Self {
            cfg: cfg.clone(),
            corpus,
            extractor: FeatureExtractor::new(cfg.feature_config())?,
            registry: enabled,
            labels,
            state,
        })
    }

    /// Continue from a checkpoint written by an identically configured run.
    pub fn resume(mut self, ckpt: JointCheckpoint) -> Result<Self> {
        if ckpt.config != self.cfg {
            return Err(invalid("checkpoint was written under a different config"));
        }
        ckpt.verify_enhancers(&self.registry)?;
        if !ckpt.fusion.same_layout(&self.state.fusion)
            || !ckpt
                .ema
                .theta_model
                .same_layout(&self.state.ema.theta_model)
        {
            return Err(Error::Corruption(
                "checkpoint networks do not match the config".into(),
            ));
        }
        self.state = ckpt;
        Ok(self)
    }

    pub fn segments_per_epoch(&self) -> usize {
        match self.cfg.segments_per_epoch {
            0 => self.corpus.train.len(),
            n => n.min(self.corpus.train.len()),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.segments_per_epoch(), self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.cfg.epochs) as u64
    }

    /// Fusion-network input (or linear-mix log-mel) for a batch, with labels.
    fn batch(&self, step: u64) -> Result<(Vec<f32>, usize, usize, usize, Vec<usize>)> {
        let cfg = &self.cfg;
        let spe = self.steps_per_epoch() as u64;
        let epoch = step / spe;
        let within = (step % spe) as usize;
        let order = epoch_order(
            seed::derive(cfg.seed, "joint", 0),
            epoch,
            self.corpus.train.len(),
        );
        let bs = cfg.batch_size.min(self.segments_per_epoch());
        let mut brng = seed::rng(seed::derive(cfg.seed, "joint-batch", step));
        let snr = if brng.gen::<f64>() < cfg.clean_fraction {
            None
        } else {
            Some(cfg.train_snrs[brng.gen_range(0..cfg.train_snrs.len())])
        };
        let mut x = Vec::new();
        let mut labels = Vec::with_capacity(bs);
        let (mut c, mut t, mut f) = (0, 0, 0);
        for (j, &i) in order[within * bs..(within + 1) * bs].iter().enumerate() {
            let key = step * bs as u64 + j as u64;
            let clean = truncate_segment(
                &self.corpus.train[i].waveform,
                cfg.segment_s,
                seed::derive(cfg.seed, "joint-segment", key),
            )?;
            let noisy = noisy_pair(
                &clean,
                &self.corpus.train_noise,
                snr,
                seed::derive(cfg.seed, "joint-noise", key),
            )?;
            match cfg.interp_mode {
                InterpMode::Unet => {
                    let z = fusion_input(
                        &self.extractor,
                        &self.registry,
                        cfg.use_noisy_channel,
                        &noisy,
                    )?;
                    (c, t, f) = (z.channels(), z.frames(), z.n_mels());
                    x.extend(z.values().iter().map(|&v| v as f32));
                }
                InterpMode::Linear => {
                    let enhanced = average_waveforms(&self.registry.enhance_all(&noisy)?)?;
                    let mixed = linear_interp_baseline(cfg.interp_weight, &noisy, &enhanced)?;
                    let m = self.extractor.extract(&mixed)?;
                    (c, t, f) = (1, m.frames(), m.n_mels());
                    x.extend(m.values().iter().map(|&v| v as f32));
                }
            }
            labels.push(self.labels[i]);
        }
        Ok((x, c, t, f, labels))
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.state.step;
        let (x, _c, t, f, labels) = self.batch(step)?;
        let b = labels.len();
        let mode = self.cfg.encoder_mode;
        let use_unet = self.cfg.interp_mode == InterpMode::Unet;
        let st = &mut self.state;

        let (fused, ucache) = if use_unet {
            let (y, cache) = st.fusion_net.forward(&st.fusion, &x, b, t, f, true)?;
            (y, Some(cache))
        } else {
            (x, None)
        };
        let enc_train = mode != EncoderMode::Fixed;
        let (emb, ecache) = st
            .encoder
            .forward(&st.ema.theta_model, &fused, b, t, enc_train)?;
        let mut g_head = st.head_params.zero_grads();
        let out = st.head.loss(&st.head_params, &mut g_head, &emb, &labels)?;
        let mut g_enc = st.ema.theta_model.zero_grads();
        let d_fused = st
            .encoder
            .backward(&st.ema.theta_model, &mut g_enc, &ecache, &out.d_emb);
        let mut g_fusion = st.fusion.zero_grads();
        if let Some(cache) = &ucache {
            st.fusion_net
                .backward(&st.fusion, &mut g_fusion, cache, &d_fused);
        }
        if !out.loss.is_finite() || !g_fusion.all_finite() || !g_enc.all_finite() {
            return Err(Error::TrainingFailure(format!(
                "non-finite loss or gradient at step {step}: loss={}, |g_fusion|={}, |g_encoder|={}",
                out.loss,
                g_fusion.l2_norm(),
                g_enc.l2_norm()
            )));
        }
        if let Some(cache) = &ucache {
            st.fusion_opt.step(&mut st.fusion, &g_fusion);
            st.fusion_net.commit_stats(&mut st.fusion, cache);
        }
        if enc_train {
            st.encoder_opt.step(&mut st.ema.theta_model, &g_enc);
            st.encoder.commit_stats(&mut st.ema.theta_model, &ecache);
            st.ema.update()?;
        }
        if self.cfg.train_head {
            st.head_opt.step(&mut st.head_params, &g_head);
        }
        st.step += 1;
        Ok(StepStats {
            step,
            loss: out.loss,
            accuracy: out.correct as f64 / b as f64,
        })
    }

    pub fn run_until(&mut self, step: u64, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        while self.state.step < step.min(self.total_steps()) {
            let s = self.step()?;
            on_step(&s);
        }
        Ok(())
    }

    pub fn enhancers(&self) -> &EnhancerRegistry {
        &self.registry
    }
}

/// Line-oriented training log: `step=<n> loss=<x> acc=<x> lr=<x>`.
pub fn log_line(s: &StepStats, lr: f64) -> String {
    format!(
        "step={} loss={:.6} acc={:.4} lr={lr}",
        s.step, s.loss, s.accuracy
    )
}

/// Train one configuration end to end.
pub fn train_ufema(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    registry: &EnhancerRegistry,
    pretrained: Option<&EncoderCheckpoint>,
) -> Result<(JointCheckpoint, Vec<StepStats>)> {
    let mut trainer = JointTrainer::new(cfg, corpus, registry, pretrained)?;
    let mut log = Vec::new();
    let total = trainer.total_steps();
    trainer.run_until(total, |s| {
        if s.step % 25 == 0 {
            tracing::info!(step = s.step, loss = s.loss, "joint");
        }
        log.push(*s)
    })?;
    Ok((trainer.state, log))
}

/// Evaluation pipeline for a trained joint checkpoint.
pub fn joint_pipeline(ckpt: &JointCheckpoint, registry: &EnhancerRegistry) -> Result<Pipeline> {
    ckpt.verify_enhancers(registry)?;
    let cfg = &ckpt.config;
    let enhancers = registry.subset(&cfg.enabled_enhancer_names())?;
    let front = match cfg.interp_mode {
        InterpMode::Unet => FrontEnd::Fusion {
            fusion: Fusion {
                net: ckpt.fusion_net.clone(),
                params: ckpt.fusion.clone(),
                init_seed: ckpt.fusion_init_seed,
            },
            use_noisy_channel: cfg.use_noisy_channel,
        },
        InterpMode::Linear => FrontEnd::Linear(cfg.interp_weight),
    };
    let params = match cfg.eval_copy {
        EvalCopy::Ema => ckpt.ema.snapshot(),
        EvalCopy::Model => ckpt.ema.theta_model.clone(),
    };
    Ok(Pipeline {
        extractor: FeatureExtractor::new(cfg.feature_config())?,
        enhancers,
        front,
        encoder: ckpt.encoder.clone(),
        params,
    })
}

/// Pipeline of the clean-pretrained encoder with a non-learned front end.
pub fn baseline_pipeline(
    cfg: &ExperimentConfig,
    pretrained: &EncoderCheckpoint,
    registry: &EnhancerRegistry,
    front: FrontEnd,
) -> Result<Pipeline> {
    Ok(Pipeline {
        extractor: FeatureExtractor::new(cfg.feature_config())?,
        enhancers: registry.subset(&cfg.enabled_enhancer_names())?,
        front,
        encoder: pretrained.encoder.clone(),
        params: pretrained.params.clone(),
    })
}

/// The three noise types at one SNR.
pub fn noisy_conditions(snr: f64) -> Vec<Condition> {
    NoiseKind::ALL
        .iter()
        .map(|&k| Condition::noisy(k, snr))
        .collect()
}

pub const ABLATION_SNR_DB: f64 = -5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub condition: Condition,
    pub eer: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("arm,condition,snr_db,eer\n");
    for r in rows {
        let snr = r
            .condition
            .snr_db
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(s, "{},{},{},{}", r.arm, r.condition.kind_name(), snr, r.eer).unwrap();
    }
    s
}

/// Train and evaluate every arm at −5 dB with shared seeds.
pub fn run_ablation_matrix(
    base: &ExperimentConfig,
    arms: &[Arm],
    corpus: &Corpus,
    registry: &EnhancerRegistry,
    pretrained: &EncoderCheckpoint,
    trials: &[Trial],
) -> Result<Vec<AblationRow>> {
    let evaluator = Evaluator::new(&corpus.eval, &corpus.test_noise, base.seed)?;
    let conditions = noisy_conditions(ABLATION_SNR_DB);
    let mut rows = Vec::new();
    for arm in arms {
        let cfg = arm.apply(base)?;
        let hashes_before = registry.hashes();
        let (ckpt, _) = train_ufema(&cfg, corpus, registry, Some(pretrained))?;
        if registry.hashes() != hashes_before {
            return Err(Error::Corruption(
                "an enhancer changed during joint training".into(),
            ));
        }
        let pipeline = joint_pipeline(&ckpt, registry)?;
        for c in &conditions {
            let r = evaluator.condition_eer(&pipeline, trials, c)?;
            tracing::info!(arm = %arm, condition = %c, eer = r.eer, "ablation");
            rows.push(AblationRow {
                arm: arm.to_string(),
                condition: *c,
                eer: r.eer,
            });
        }
    }
    Ok(rows)
}

/// EER curves of the linear baseline against weight, plus the fusion point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub weights: Vec<f64>,
    /// per condition, one EER per weight
    pub linear: BTreeMap<String, Vec<f64>>,
    pub unet: BTreeMap<String, f64>,
    pub conditions: Vec<Condition>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,w,condition,snr_db,eer\n");
        for c in &self.conditions {
            let name = c.to_string();
            let snr = c.snr_db.map(|v| v.to_string()).unwrap_or_default();
            for (w, e) in self.weights.iter().zip(&self.linear[&name]) {
                writeln!(s, "linear,{w},{},{snr},{e}", c.kind_name()).unwrap();
            }
            if let Some(e) = self.unet.get(&name) {
                writeln!(s, "unet,,{},{snr},{e}", c.kind_name()).unwrap();
            }
        }
        s
    }

    pub fn series(&self) -> Vec<crate::plot::Series> {
        self.conditions
            .iter()
            .map(|c| crate::plot::Series {
                label: c.kind_name().to_string(),
                points: self
                    .weights
                    .iter()
                    .zip(&self.linear[&c.to_string()])
                    .map(|(&w, &e)| (w, 100.0 * e))
                    .collect(),
                reference: self.unet.get(&c.to_string()).map(|e| 100.0 * e),
            })
            .collect()
    }
}

/// Parse `start:stop:step` (inclusive) or a comma list into weights.
pub fn parse_weights(spec: &str) -> Result<Vec<f64>> {
    let bad = || invalid(format!("cannot parse weights `{spec}`"));
    let ws: Vec<f64> = if spec.contains(':') {
        let p: Vec<f64> = spec
            .split(':')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if p.len() != 3 || !(p[2] > 0.0) || p[1] < p[0] {
            return Err(bad());
        }
        let n = ((p[1] - p[0]) / p[2] + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((p[0] + i as f64 * p[2]) * 1e9).round() / 1e9)
            .collect()
    } else {
        spec.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if ws.is_empty() || ws.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(invalid(format!("weights `{spec}` must lie in [0, 1]")));
    }
    Ok(ws)
}

/// Linear-interpolation curve with the clean-pretrained encoder, and the
/// fusion system's EER at the same conditions.
pub fn sweep_interpolation(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    registry: &EnhancerRegistry,
    pretrained: &EncoderCheckpoint,
    joint: Option<&JointCheckpoint>,
    weights: &[f64],
    trials: &[Trial],
) -> Result<SweepResult> {
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(invalid("interpolation weights must lie in [0, 1]"));
    }
    let evaluator = Evaluator::new(&corpus.eval, &corpus.test_noise, cfg.seed)?;
    let conditions = noisy_conditions(ABLATION_SNR_DB);
    let mut linear = BTreeMap::new();
    for c in &conditions {
        let mut curve = Vec::with_capacity(weights.len());
        for &w in weights {
            let p = baseline_pipeline(cfg, pretrained, registry, FrontEnd::Linear(w))?;
            curve.push(evaluator.condition_eer(&p, trials, c)?.eer);
        }
        linear.insert(c.to_string(), curve);
    }
    let mut unet = BTreeMap::new();
    if let Some(j) = joint {
        let p = joint_pipeline(j, registry)?;
        for c in &conditions {
            unet.insert(c.to_string(), evaluator.condition_eer(&p, trials, c)?.eer);
        }
    }
    Ok(SweepResult {
        weights: weights.to_vec(),
        linear,
        unet,
        conditions,
    })
}
