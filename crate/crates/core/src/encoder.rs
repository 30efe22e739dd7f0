//! Speaker encoder, additive angular margin loss and clean pretraining.
//!
//! The encoder mean-normalizes its input over time, runs dilated 1-D
//! convolutions across frames (mel bins as input channels), pools mean and
//! standard deviation over time and projects to a `D`-dimensional
//! embedding.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_segment, Utterance};
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, MelFeature};
use crate::nn::{
    relu, relu_backward, Adam, BatchNorm, BnState, Conv1d, Grads, Linear, ParamId, ParamStore,
};
use crate::real::Real;
use crate::seed;

const POOL_EPS: f64 = 1e-5;
/// Cosines are clamped this far inside `[-1, 1]` before taking `sin θ`.
const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: 64,
            kernel: 3,
            dilations: vec![1, 2, 3],
            embedding_dim: 192,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.channels == 0 || self.embedding_dim == 0 {
            return Err(invalid("encoder sizes must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid("encoder kernel must be odd"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(invalid("encoder needs at least one positive dilation"));
        }
        Ok(())
    }

    /// Receptive field in frames, also the shortest accepted input.
    pub fn min_frames(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("embedding is not finite".into()));
        }
        if vector.iter().all(|v| *v == 0.0) {
            return Err(Error::DegenerateInput("embedding has zero norm".into()));
        }
        Ok(Self { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    config: EncoderConfig,
    convs: Vec<Conv1d>,
    bns: Vec<BatchNorm>,
    proj: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    batch: usize,
    t: usize,
    inputs: Vec<Vec<T>>,
    bn: Vec<BnState<T>>,
    outs: Vec<Vec<T>>,
    mean: Vec<T>,
    std: Vec<T>,
    pooled: Vec<T>,
}

impl<T> EncoderCache<T> {
    /// Batch statistics of each normalization layer in train mode.
    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }
}

impl SpeakerEncoder {
    pub fn new<T: Real>(config: &EncoderConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "encoder-init", 0));
        let mut p = ParamStore::new();
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = config.n_mels;
        for (i, &d) in config.dilations.iter().enumerate() {
            convs.push(Conv1d::new(
                &mut p,
                &format!("tdnn{i}"),
                cin,
                config.channels,
                config.kernel,
                d,
                &mut rng,
            ));
            bns.push(BatchNorm::new(
                &mut p,
                &format!("tdnn{i}.bn"),
                config.channels,
            ));
            cin = config.channels;
        }
        let proj = Linear::new(
            &mut p,
            "proj",
            2 * config.channels,
            config.embedding_dim,
            &mut rng,
        );
        Ok((
            Self {
                config: config.clone(),
                convs,
                bns,
                proj,
            },
            p,
        ))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `x` is `[batch, t, n_mels]`; returns `[batch, embedding_dim]`.
    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        batch: usize,
        t: usize,
        train: bool,
    ) -> Result<(Vec<T>, EncoderCache<T>)> {
        let f = self.config.n_mels;
        if batch == 0 || x.len() != batch * t * f {
            return Err(invalid(format!(
                "encoder input of {} values does not match [{batch}, {t}, {f}]",
                x.len()
            )));
        }
        if t < self.config.min_frames() {
            return Err(invalid(format!(
                "encoder needs at least {} frames, got {t}",
                self.config.min_frames()
            )));
        }
        if train && batch < 2 {
            return Err(invalid(
                "batch normalization in training mode needs batch >= 2",
            ));
        }
        let tn = T::from_usize(t);
        let mut h = vec![T::zero(); batch * f * t];
        for b in 0..batch {
            for k in 0..f {
                let mean = (0..t).map(|i| x[(b * t + i) * f + k]).sum::<T>() / tn;
                for i in 0..t {
                    h[(b * f + k) * t + i] = x[(b * t + i) * f + k] - mean;
                }
            }
        }
        let c = self.config.channels;
        let mut inputs = Vec::new();
        let mut bn = Vec::new();
        let mut outs = Vec::new();
        for (conv, norm) in self.convs.iter().zip(&self.bns) {
            let a = conv.forward(p, &h, batch, t);
            let (y, st) = norm.forward(p, &a, batch, t, train);
            inputs.push(std::mem::replace(&mut h, relu(&y)));
            bn.push(st);
            outs.push(h.clone());
        }
        let eps = T::lit(POOL_EPS);
        let mut mean = vec![T::zero(); batch * c];
        let mut std = vec![T::zero(); batch * c];
        let mut pooled = vec![T::zero(); batch * 2 * c];
        for b in 0..batch {
            for ch in 0..c {
                let row = &h[(b * c + ch) * t..(b * c + ch + 1) * t];
                let mu = row.iter().copied().sum::<T>() / tn;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / tn;
                let sd = (var + eps).sqrt();
                mean[b * c + ch] = mu;
                std[b * c + ch] = sd;
                pooled[b * 2 * c + ch] = mu;
                pooled[b * 2 * c + c + ch] = sd;
            }
        }
        let emb = self.proj.forward(p, &pooled, batch);
        Ok((
            emb,
            EncoderCache {
                batch,
                t,
                inputs,
                bn,
                outs,
                mean,
                std,
                pooled,
            },
        ))
    }

    pub fn commit_stats<T: Real>(&self, p: &mut ParamStore<T>, cache: &EncoderCache<T>) {
        for (norm, st) in self.bns.iter().zip(&cache.bn) {
            if let Some(stats) = st.stats() {
                norm.update_running(p, stats);
            }
        }
    }

    /// Accumulates parameter gradients and returns `d loss / d x`.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &EncoderCache<T>,
        d_emb: &[T],
    ) -> Vec<T> {
        let (batch, t) = (cache.batch, cache.t);
        let c = self.config.channels;
        let f = self.config.n_mels;
        let tn = T::from_usize(t);
        let d_pooled = self.proj.backward(p, g, &cache.pooled, batch, d_emb);
        let h = cache.outs.last().expect("encoder has layers");
        let mut dh = vec![T::zero(); h.len()];
        for b in 0..batch {
            for ch in 0..c {
                let dmu = d_pooled[b * 2 * c + ch];
                let dsd = d_pooled[b * 2 * c + c + ch];
                let mu = cache.mean[b * c + ch];
                let sd = cache.std[b * c + ch];
                let off = (b * c + ch) * t;
                for i in 0..t {
                    dh[off + i] = dmu / tn + dsd * (h[off + i] - mu) / (tn * sd);
                }
            }
        }
        for l in (0..self.convs.len()).rev() {
            let dy = relu_backward(&cache.outs[l], &dh);
            let da = self.bns[l].backward_state(p, g, &cache.bn[l], &dy, batch, t);
            dh = self.convs[l].backward(p, g, &cache.inputs[l], batch, t, &da);
        }
        let mut dx = vec![T::zero(); batch * t * f];
        for b in 0..batch {
            for k in 0..f {
                let row = &dh[(b * f + k) * t..(b * f + k + 1) * t];
                let mean = row.iter().copied().sum::<T>() / tn;
                for i in 0..t {
                    dx[(b * t + i) * f + k] = row[i] - mean;
                }
            }
        }
        dx
    }

    /// Inference-mode embedding of one feature.
    pub fn embed<T: Real>(
        &self,
        p: &ParamStore<T>,
        feature: &MelFeature,
    ) -> Result<SpeakerEmbedding> {
        if feature.n_mels() != self.config.n_mels {
            return Err(invalid(format!(
                "encoder expects {} mel bins, got {}",
                self.config.n_mels,
                feature.n_mels()
            )));
        }
        let x: Vec<T> = feature.values().iter().map(|&v| T::lit(v)).collect();
        let (e, _) = self.forward(p, &x, 1, feature.frames(), false)?;
        SpeakerEmbedding::new(e.iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AamConfig {
    /// additive angular margin in radians
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.margin) {
            return Err(invalid(format!(
                "AAM margin {} outside [0, 0.5]",
                self.margin
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid(format!(
                "AAM scale {} must be positive",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Loss value and gradients of one AAM evaluation.
#[derive(Debug, Clone)]
pub struct AamOutput<T> {
    pub loss: f64,
    pub d_emb: Vec<T>,
    pub d_weights: Vec<T>,
    /// samples whose highest plain cosine is their own class
    pub correct: usize,
}

/// Mean AAM-softmax cross-entropy over a batch.
///
/// `weights` is `[classes, dim]`, `emb` is `[batch, dim]`. Rows of both are
/// L2-normalized internally; gradients are with respect to the raw values.
pub fn aam_loss<T: Real>(
    weights: &[T],
    classes: usize,
    emb: &[T],
    dim: usize,
    labels: &[usize],
    config: AamConfig,
) -> Result<AamOutput<T>> {
    config.validate()?;
    let batch = labels.len();
    if batch == 0 {
        return Err(invalid("AAM loss needs a non-empty batch"));
    }
    if weights.len() != classes * dim || emb.len() != batch * dim {
        return Err(invalid("AAM weight or embedding size mismatch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let normalize = |rows: &[T]| -> (Vec<T>, Vec<T>) {
        let mut unit = rows.to_vec();
        let mut norms = Vec::with_capacity(rows.len() / dim);
        for r in unit.chunks_mut(dim) {
            let n = r.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            r.iter_mut().for_each(|v| *v /= n);
        }
        (unit, norms)
    };
    let (u, u_norm) = normalize(emb);
    let (v, v_norm) = normalize(weights);
    if u_norm.iter().chain(&v_norm).any(|n| *n == T::zero()) {
        return Err(Error::DegenerateInput(
            "zero-norm embedding or class weight".into(),
        ));
    }
    let mut cos = vec![T::zero(); batch * classes];
    crate::real::matmul(
        batch,
        dim,
        classes,
        &u,
        false,
        &v,
        true,
        T::zero(),
        &mut cos,
    );

    let s = T::lit(config.scale);
    let (cm, sm) = (T::lit(config.margin.cos()), T::lit(config.margin.sin()));
    let lim = T::one() - T::lit(COS_CLAMP);
    let mut d_cos = vec![T::zero(); batch * classes];
    let mut loss = 0.0;
    let mut correct = 0;
    let inv_b = T::one() / T::from_usize(batch);
    for b in 0..batch {
        let y = labels[b];
        let row = &cos[b * classes..(b + 1) * classes];
        let best = (0..classes).fold(0, |a, j| if row[j] > row[a] { j } else { a });
        if best == y {
            correct += 1;
        }
        let c = row[y];
        let cc = c.max(-lim).min(lim);
        let sin = (T::one() - cc * cc).sqrt();
        let mut logits: Vec<T> = row.iter().map(|&x| s * x).collect();
        logits[y] = s * (c * cm - sin * sm);
        let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let z = logits.iter().map(|&l| (l - top).exp()).sum::<T>();
        loss += ((z.ln() + top) - logits[y]).as_f64();
        let drow = &mut d_cos[b * classes..(b + 1) * classes];
        for j in 0..classes {
            let mut p = (logits[j] - top).exp() / z;
            if j == y {
                p -= T::one();
                drow[j] = p * inv_b * s * (cm + sm * c / sin);
            } else {
                drow[j] = p * inv_b * s;
            }
        }
    }

    let mut du = vec![T::zero(); batch * dim];
    crate::real::matmul(
        batch,
        classes,
        dim,
        &d_cos,
        false,
        &v,
        false,
        T::zero(),
        &mut du,
    );
    let mut dv = vec![T::zero(); classes * dim];
    crate::real::matmul(
        classes,
        batch,
        dim,
        &d_cos,
        true,
        &u,
        false,
        T::zero(),
        &mut dv,
    );
    let unnormalize = |unit: &[T], norms: &[T], d: &mut [T]| {
        for ((ur, dr), &n) in unit.chunks(dim).zip(d.chunks_mut(dim)).zip(norms) {
            let dot = ur.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (g, &uu) in dr.iter_mut().zip(ur) {
                *g = (*g - uu * dot) / n;
            }
        }
    };
    unnormalize(&u, &u_norm, &mut du);
    unnormalize(&v, &v_norm, &mut dv);
    Ok(AamOutput {
        loss: loss / batch as f64,
        d_emb: du,
        d_weights: dv,
        correct,
    })
}

/// Class weights of the AAM classifier, stored in their own parameter set.
#[derive(Debug, Clone)]
pub struct AamHead {
    pub config: AamConfig,
    pub classes: usize,
    pub dim: usize,
    weight: ParamId,
}

impl AamHead {
    pub fn new<T: Real>(
        classes: usize,
        dim: usize,
        config: AamConfig,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if classes < 2 || dim == 0 {
            return Err(invalid("AAM head needs at least two classes"));
        }
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seed::rng(seed::derive(seed, "aam-init", 0));
        let w: Vec<T> = (0..classes * dim)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        let mut p = ParamStore::new();
        let weight = p.push("aam.weight", &[classes, dim], w, true);
        Ok((
            Self {
                config,
                classes,
                dim,
                weight,
            },
            p,
        ))
    }

    pub fn weights<'a, T: Real>(&self, p: &'a ParamStore<T>) -> &'a [T] {
        p.get(self.weight)
    }

    /// Loss over a batch of embeddings; class-weight gradients are
    /// accumulated into `g`.
    pub fn loss<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        emb: &[T],
        labels: &[usize],
    ) -> Result<AamOutput<T>> {
        let out = aam_loss(
            p.get(self.weight),
            self.classes,
            emb,
            self.dim,
            labels,
            self.config,
        )?;
        for (a, b) in g.get_mut(self.weight).iter_mut().zip(&out.d_weights) {
            *a += *b;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub segment_s: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            segment_s: 2.0,
            seed: 0,
        }
    }
}

/// Everything that changes during pretraining; enough to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState {
    pub encoder: ParamStore<f32>,
    pub head: ParamStore<f32>,
    pub encoder_opt: Adam<f32>,
    pub head_opt: Adam<f32>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Order in which utterances are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, "epoch-order", epoch)));
    idx
}

/// Number of full batches per epoch; a short corpus forms one batch.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    (n / batch_size).max(1)
}

/// Contiguous class ids for the speakers of `utts`, in ascending speaker order.
pub fn speaker_classes(utts: &[Utterance]) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = utts.iter().map(|u| u.speaker_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
}

/// Clean-speech AAM pretraining of the speaker encoder.
pub struct Pretrainer<'a> {
    pub encoder: SpeakerEncoder,
    pub head: AamHead,
    pub state: PretrainState,
    config: PretrainConfig,
    extractor: FeatureExtractor,
    utts: &'a [Utterance],
    labels: Vec<usize>,
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        utts: &'a [Utterance],
        features: &FeatureConfig,
        encoder: &EncoderConfig,
        aam: AamConfig,
        config: PretrainConfig,
    ) -> Result<Self> {
        let classes = speaker_classes(utts);
        if classes.len() < 2 {
            return Err(invalid("pretraining needs at least two speakers"));
        }
        if encoder.n_mels != features.n_mels {
            return Err(invalid("encoder and feature mel counts differ"));
        }
        if config.batch_size < 2 || utts.len() < 2 || config.epochs == 0 {
            return Err(invalid(
                "pretraining needs batch size >= 2, >= 2 utterances and >= 1 epoch",
            ));
        }
        let labels = utts.iter().map(|u| classes[&u.speaker_id]).collect();
        let (enc, enc_p) = SpeakerEncoder::new::<f32>(encoder, config.seed)?;
        let (head, head_p) =
            AamHead::new::<f32>(classes.len(), encoder.embedding_dim, aam, config.seed)?;
        let state = PretrainState {
            encoder_opt: Adam::new(&enc_p, config.lr),
            head_opt: Adam::new(&head_p, config.lr),
            encoder: enc_p,
            head: head_p,
            step: 0,
        };
        Ok(Self {
            encoder: enc,
            head,
            state,
            config,
            extractor: FeatureExtractor::new(features.clone())?,
            utts,
            labels,
        })
    }

    /// Continue from a saved state.
    pub fn resume(mut self, state: PretrainState) -> Result<Self> {
        if !state.encoder.same_layout(&self.state.encoder)
            || !state.head.same_layout(&self.state.head)
        {
            return Err(Error::Corruption(
                "pretrain state does not match the configured networks".into(),
            ));
        }
        self.state = state;
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.utts.len(), self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    fn batch(&self, step: u64) -> Result<(Vec<f32>, usize, Vec<usize>)> {
        let spe = self.steps_per_epoch() as u64;
        let epoch = step / spe;
        let within = (step % spe) as usize;
        let order = epoch_order(self.config.seed, epoch, self.utts.len());
        let bs = self.config.batch_size.min(self.utts.len());
        let mut x = Vec::new();
        let mut labels = Vec::with_capacity(bs);
        let mut frames = 0;
        for &i in &order[within * bs..(within + 1) * bs] {
            let seg_seed = seed::derive(
                self.config.seed,
                "pretrain-segment",
                epoch * self.utts.len() as u64 + i as u64,
            );
            let seg = truncate_segment(&self.utts[i].waveform, self.config.segment_s, seg_seed)?;
            let feat = self.extractor.extract(&seg)?;
            frames = feat.frames();
            x.extend(feat.values().iter().map(|&v| v as f32));
            labels.push(self.labels[i]);
        }
        Ok((x, frames, labels))
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.state.step;
        let (x, t, labels) = self.batch(step)?;
        let b = labels.len();
        let st = &mut self.state;
        let (emb, cache) = self.encoder.forward(&st.encoder, &x, b, t, true)?;
        let mut g_head = st.head.zero_grads();
        let out = self.head.loss(&st.head, &mut g_head, &emb, &labels)?;
        if !out.loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "pretraining loss is {} at step {step}",
                out.loss
            )));
        }
        let mut g_enc = st.encoder.zero_grads();
        self.encoder
            .backward(&st.encoder, &mut g_enc, &cache, &out.d_emb);
        st.encoder_opt.step(&mut st.encoder, &g_enc);
        st.head_opt.step(&mut st.head, &g_head);
        self.encoder.commit_stats(&mut st.encoder, &cache);
        st.step += 1;
        Ok(StepStats {
            step,
            loss: out.loss,
            accuracy: out.correct as f64 / b as f64,
        })
    }

    /// Run until `step` optimizer steps have been taken in total.
    pub fn run_until(&mut self, step: u64, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        while self.state.step < step.min(self.total_steps()) {
            let s = self.step()?;
            on_step(&s);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// mean loss of each epoch
    pub epoch_loss: Vec<f64>,
    /// classification accuracy over the last epoch
    pub final_accuracy: f64,
    pub steps: Vec<StepStats>,
}

pub fn summarize(steps: &[StepStats], steps_per_epoch: usize) -> PretrainReport {
    let epoch_loss = steps
        .chunks(steps_per_epoch)
        .map(|c| c.iter().map(|s| s.loss).sum::<f64>() / c.len() as f64)
        .collect();
    let last = steps.chunks(steps_per_epoch).last().unwrap_or(&[]);
    let final_accuracy = if last.is_empty() {
        0.0
    } else {
        last.iter().map(|s| s.accuracy).sum::<f64>() / last.len() as f64
    };
    PretrainReport {
        epoch_loss,
        final_accuracy,
        steps: steps.to_vec(),
    }
}

/// Pretrained encoder and classifier.
#[derive(Debug, Clone)]
pub struct PretrainedEncoder {
    pub encoder: SpeakerEncoder,
    pub params: ParamStore<f32>,
    pub head: AamHead,
    pub head_params: ParamStore<f32>,
}

/// Full pretraining run from scratch.
pub fn pretrain_encoder(
    utts: &[Utterance],
    features: &FeatureConfig,
    encoder: &EncoderConfig,
    aam: AamConfig,
    config: PretrainConfig,
) -> Result<(PretrainedEncoder, PretrainReport)> {
    let mut trainer = Pretrainer::new(utts, features, encoder, aam, config)?;
    let mut steps = Vec::new();
    let total = trainer.total_steps();
    trainer.run_until(total, |s| {
        if s.step % 20 == 0 {
            tracing::info!(step = s.step, loss = s.loss, "pretrain");
        }
        steps.push(*s)
    })?;
    let report = summarize(&steps, trainer.steps_per_epoch());
    Ok((
        PretrainedEncoder {
            encoder: trainer.encoder,
            params: trainer.state.encoder,
            head: trainer.head,
            head_params: trainer.state.head,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_training_set, CorpusSpec};
    use crate::nn::gradcheck;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn toy() -> EncoderConfig {
        EncoderConfig {
            n_mels: 5,
            channels: 4,
            kernel: 3,
            dilations: vec![1, 2],
            embedding_dim: 8,
        }
    }

    fn sq_norm_check(train: bool) {
        let cfg = toy();
        let (enc, p) = SpeakerEncoder::new::<f64>(&cfg, 3).unwrap();
        let (b, t) = (2, 12);
        let x = random(b * t * cfg.n_mels, 4);
        let loss = |p: &ParamStore<f64>, x: &[f64]| {
            let (e, _) = enc.forward(p, x, b, t, train).unwrap();
            e.iter().map(|v| v * v).sum::<f64>()
        };
        let (e, cache) = enc.forward(&p, &x, b, t, train).unwrap();
        let d_emb: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
        let mut g = p.zero_grads();
        let dx = enc.backward(&p, &mut g, &cache, &d_emb);
        for (name, err) in gradcheck::check_params(&p, &g, 1e-4, |q| loss(q, &x)) {
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
        let num = gradcheck::numeric_grad(&x, 1e-4, |v| loss(&p, v));
        assert!(gradcheck::relative_error(&dx, &num) < 1e-3);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        sq_norm_check(true);
        sq_norm_check(false);
    }

    #[test]
    fn aam_gradients_match_finite_differences() {
        let (c, d, b) = (4, 6, 3);
        let w = random(c * d, 1);
        let e = random(b * d, 2);
        let labels = [0, 2, 3];
        let cfg = AamConfig::default();
        let out = aam_loss(&w, c, &e, d, &labels, cfg).unwrap();
        let num_e = gradcheck::numeric_grad(&e, 1e-4, |v| {
            aam_loss(&w, c, v, d, &labels, cfg).unwrap().loss
        });
        let num_w = gradcheck::numeric_grad(&w, 1e-4, |v| {
            aam_loss(v, c, &e, d, &labels, cfg).unwrap().loss
        });
        assert!(gradcheck::relative_error(&out.d_emb, &num_e) < 1e-3);
        assert!(gradcheck::relative_error(&out.d_weights, &num_w) < 1e-3);
    }

    #[test]
    fn margin_free_reduces_to_softmax() {
        let (c, d, b) = (5, 7, 4);
        let w = random(c * d, 5);
        let e = random(b * d, 6);
        let labels = [1, 0, 4, 4];
        let got = aam_loss(
            &w,
            c,
            &e,
            d,
            &labels,
            AamConfig {
                margin: 0.0,
                scale: 1.0,
            },
        )
        .unwrap()
        .loss;
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let er = &e[i * d..(i + 1) * d];
            let cos: Vec<f64> = (0..c)
                .map(|j| {
                    let wr = &w[j * d..(j + 1) * d];
                    er.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() / (norm(er) * norm(wr))
                })
                .collect();
            let z: f64 = cos.iter().map(|v| v.exp()).sum();
            want += -(cos[y].exp() / z).ln();
        }
        want /= labels.len() as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn two_class_closed_form() {
        let w = [1.0, 0.0, 0.0, 1.0];
        let e = [2.5, 0.0];
        let got = aam_loss(
            &w,
            2,
            &e,
            2,
            &[0],
            AamConfig {
                margin: 0.0,
                scale: 10.0,
            },
        )
        .unwrap()
        .loss;
        let want = (1.0 + (-10.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn margin_never_decreases_loss_of_correct_sample() {
        let w = [1.0, 0.2, -0.3, 1.0, 0.1, -0.8];
        let e = [0.9, 0.3];
        let losses: Vec<f64> = [0.0, 0.1, 0.2, 0.3]
            .iter()
            .map(|&m| {
                let out = aam_loss(
                    &w,
                    3,
                    &e,
                    2,
                    &[0],
                    AamConfig {
                        margin: m,
                        scale: 30.0,
                    },
                )
                .unwrap();
                assert_eq!(out.correct, 1);
                out.loss
            })
            .collect();
        assert!(losses.windows(2).all(|p| p[1] >= p[0]), "{losses:?}");
    }

    #[test]
    fn aam_rejects_bad_input() {
        let w = [1.0, 0.0, 0.0, 1.0];
        assert!(aam_loss(&w, 2, &[1.0, 0.0], 2, &[2], AamConfig::default()).is_err());
        assert!(aam_loss(&w, 2, &[], 2, &[], AamConfig::default()).is_err());
        assert!(AamConfig {
            margin: 0.6,
            scale: 30.0
        }
        .validate()
        .is_err());
        assert!(AamConfig {
            margin: 0.2,
            scale: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn default_embedding_is_192_and_deterministic() {
        let cfg = EncoderConfig::default();
        let (enc, p) = SpeakerEncoder::new::<f32>(&cfg, 0).unwrap();
        let feat = MelFeature::new(random(50 * 80, 8), 50, 80).unwrap();
        let a = enc.embed(&p, &feat).unwrap();
        assert_eq!(a.dim(), 192);
        assert_eq!(a, enc.embed(&p, &feat).unwrap());
        let wrong = MelFeature::new(random(50 * 40, 8), 50, 40).unwrap();
        assert!(enc.embed(&p, &wrong).is_err());
        let short = MelFeature::new(random(5 * 80, 8), 5, 80).unwrap();
        assert!(enc.embed(&p, &short).is_err());
    }

    fn tiny_corpus() -> Vec<Utterance> {
        build_training_set(&CorpusSpec {
            n_speakers: 4,
            utts_per_speaker: 8,
            utt_duration_s: 0.8,
            segment_s: 0.6,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn tiny_setup() -> (FeatureConfig, EncoderConfig, PretrainConfig) {
        let feat = FeatureConfig {
            n_mels: 24,
            ..FeatureConfig::default()
        };
        let enc = EncoderConfig {
            n_mels: 24,
            channels: 16,
            embedding_dim: 16,
            ..EncoderConfig::default()
        };
        let pre = PretrainConfig {
            epochs: 6,
            batch_size: 8,
            segment_s: 0.5,
            lr: 3e-3,
            seed: 1,
        };
        (feat, enc, pre)
    }

    #[test]
    fn pretraining_descends_and_resumes_exactly() {
        let utts = tiny_corpus();
        let (feat, enc, pre) = tiny_setup();
        let (_, report) =
            pretrain_encoder(&utts, &feat, &enc, AamConfig::default(), pre.clone()).unwrap();
        assert!(
            report.epoch_loss.last().unwrap() < &report.epoch_loss[0],
            "{:?}",
            report.epoch_loss
        );

        let mut a = Pretrainer::new(&utts, &feat, &enc, AamConfig::default(), pre.clone()).unwrap();
        a.run_until(5, |_| {}).unwrap();
        let saved = a.state.clone();
        let next_a = a.step().unwrap();
        let b = Pretrainer::new(&utts, &feat, &enc, AamConfig::default(), pre).unwrap();
        let mut b = b.resume(saved).unwrap();
        let next_b = b.step().unwrap();
        assert_eq!(next_a.loss.to_bits(), next_b.loss.to_bits());
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn pretraining_needs_two_speakers() {
        let utts: Vec<Utterance> = tiny_corpus()
            .into_iter()
            .filter(|u| u.speaker_id == 0)
            .collect();
        let (feat, enc, pre) = tiny_setup();
        assert!(Pretrainer::new(&utts, &feat, &enc, AamConfig::default(), pre).is_err());
    }
}
