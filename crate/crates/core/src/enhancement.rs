//! Frozen speech enhancers behind a uniform waveform-in/waveform-out interface.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::debug;

use crate::corpus::{Waveform, SAMPLE_RATE};
use crate::dsp::{Spectrogram, Stft};
use crate::error::{invalid, Error, Result};
use crate::nn::{hex_string, relu, relu_backward, sigmoid, Adam, Linear, ParamId, ParamStore};
use crate::seed;

const N_FFT: usize = 512;
const HOP: usize = 128;
const BINS: usize = N_FFT / 2 + 1;
const LOG_FLOOR: f64 = 1e-4;

fn enhancement_stft() -> Stft {
    Stft::new(N_FFT, N_FFT, HOP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnhancerDomain {
    SpectralMask,
    Waveform,
}

/// Magnitude spectral subtraction with over-subtraction and a spectral floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSubtraction {
    pub alpha_oversub: f64,
    pub floor: f64,
}

impl SpectralSubtraction {
    /// Per-bin mean magnitude of the 10% lowest-energy frames.
    pub fn estimate_noise(stft: &Stft, x: &[f64]) -> Vec<f64> {
        let spec = stft.analyze(x);
        if spec.frames == 0 {
            return vec![0.0; spec.bins];
        }
        let mags = spec.magnitudes();
        let mut order: Vec<(f64, usize)> = (0..spec.frames)
            .map(|t| {
                (
                    mags[t * spec.bins..(t + 1) * spec.bins]
                        .iter()
                        .map(|m| m * m)
                        .sum(),
                    t,
                )
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = (spec.frames / 10).max(1);
        let mut noise = vec![0.0; spec.bins];
        for &(_, t) in &order[..take] {
            for (n, m) in noise
                .iter_mut()
                .zip(&mags[t * spec.bins..(t + 1) * spec.bins])
            {
                *n += m;
            }
        }
        noise.iter_mut().for_each(|n| *n /= take as f64);
        noise
    }

    pub fn apply(&self, stft: &Stft, x: &[f64], noise: &[f64]) -> Vec<f64> {
        let mut spec = stft.analyze_padded(x);
        for t in 0..spec.frames {
            for k in 0..spec.bins {
                let c = &mut spec.data[t * spec.bins + k];
                let mag = c.norm();
                if mag <= 0.0 {
                    continue;
                }
                let target = (mag - self.alpha_oversub * noise[k]).max(self.floor * mag);
                *c *= target / mag;
            }
        }
        stft.synthesize(&spec, x.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskNetConfig {
    /// Frames of context on each side of the centre frame.
    pub context: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            context: 1,
            hidden: 128,
            bottleneck: 48,
            epochs: 12,
            batch_frames: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Frame-wise encoder-decoder predicting a `[0, 1]` magnitude mask.
#[derive(Debug, Clone)]
pub struct MaskNet {
    pub config: MaskNetConfig,
    mean: ParamId,
    std: ParamId,
    layers: [Linear; 4],
    params: ParamStore<f32>,
}

struct MaskForward {
    acts: Vec<Vec<f32>>,
    mask: Vec<f32>,
}

impl MaskNet {
    pub fn new(config: MaskNetConfig) -> Self {
        let mut rng = seed::rng(seed::derive(config.seed, "masknet-init", 0));
        let mut params = ParamStore::new();
        let mean = params.push("input.mean", &[BINS], vec![0.0; BINS], false);
        let std = params.push("input.std", &[BINS], vec![1.0; BINS], false);
        let input = BINS * (2 * config.context + 1);
        let layers = [
            Linear::new(&mut params, "enc1", input, config.hidden, &mut rng),
            Linear::new(
                &mut params,
                "enc2",
                config.hidden,
                config.bottleneck,
                &mut rng,
            ),
            Linear::new(
                &mut params,
                "dec1",
                config.bottleneck,
                config.hidden,
                &mut rng,
            ),
            Linear::new(&mut params, "dec2", config.hidden, BINS, &mut rng),
        ];
        // start near a pass-through mask
        params
            .get_mut(layers[3].b)
            .iter_mut()
            .for_each(|b| *b = 1.5);
        Self {
            config,
            mean,
            std,
            layers,
            params,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn load_params(&mut self, params: &ParamStore<f32>) -> Result<()> {
        self.params.copy_from(params)
    }

    fn log_mags(spec: &Spectrogram) -> Vec<f32> {
        spec.data
            .iter()
            .map(|c| (c.norm() + LOG_FLOOR).ln() as f32)
            .collect()
    }

    /// Normalized log-magnitudes with context, `frames × (BINS·(2c+1))`.
    fn inputs(&self, logmag: &[f32], frames: usize) -> Vec<f32> {
        let c = self.config.context as isize;
        let mean = self.params.get(self.mean);
        let std = self.params.get(self.std);
        let width = BINS * (2 * self.config.context + 1);
        let mut x = Vec::with_capacity(frames * width);
        for t in 0..frames as isize {
            for d in -c..=c {
                let s = (t + d).clamp(0, frames as isize - 1) as usize;
                let row = &logmag[s * BINS..(s + 1) * BINS];
                x.extend(
                    row.iter()
                        .zip(mean)
                        .zip(std)
                        .map(|((v, m), sd)| (v - m) / sd),
                );
            }
        }
        x
    }

    fn forward(&self, x: &[f32], batch: usize) -> MaskForward {
        let mut acts = vec![x.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&self.params, acts.last().unwrap(), batch);
            if i + 1 < self.layers.len() {
                acts.push(relu(&z));
            } else {
                let mask = z.iter().map(|&v| sigmoid(v)).collect();
                return MaskForward { acts, mask };
            }
        }
        unreachable!()
    }

    pub fn predict_mask(&self, spec: &Spectrogram) -> Vec<f32> {
        let x = self.inputs(&Self::log_mags(spec), spec.frames);
        self.forward(&x, spec.frames).mask
    }

    fn enhance(&self, stft: &Stft, x: &[f64]) -> Vec<f64> {
        let mut spec = stft.analyze_padded(x);
        let mask = self.predict_mask(&spec);
        for (c, m) in spec.data.iter_mut().zip(&mask) {
            *c *= *m as f64;
        }
        stft.synthesize(&spec, x.len())
    }
}

#[derive(Debug, Clone)]
pub enum EnhancerKind {
    SpectralSubtraction(SpectralSubtraction),
    MaskNet(Box<MaskNet>),
}

/// One member `f_i` of the enhancer ensemble. Immutable once built.
#[derive(Debug, Clone)]
pub struct Enhancer {
    name: String,
    kind: EnhancerKind,
    stft: Stft,
}

impl Enhancer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &EnhancerKind {
        &self.kind
    }

    pub fn domain(&self) -> EnhancerDomain {
        match self.kind {
            EnhancerKind::SpectralSubtraction(_) => EnhancerDomain::SpectralMask,
            EnhancerKind::MaskNet(_) => EnhancerDomain::Waveform,
        }
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// Hyperparameters as JSON, used in checkpoints and hashing.
    pub fn hyperparameters(&self) -> serde_json::Value {
        match &self.kind {
            EnhancerKind::SpectralSubtraction(ss) => serde_json::to_value(ss),
            EnhancerKind::MaskNet(net) => serde_json::to_value(&net.config),
        }
        .expect("plain structs serialize")
    }

    /// Learned parameters (empty for analytic enhancers).
    pub fn params(&self) -> ParamStore<f32> {
        match &self.kind {
            EnhancerKind::SpectralSubtraction(_) => ParamStore::new(),
            EnhancerKind::MaskNet(net) => net.params.clone(),
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(&self.domain()).unwrap());
        h.update(serde_json::to_vec(&self.hyperparameters()).unwrap());
        h.update(self.params().hash());
        hex_string(&h.finalize())
    }

    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        if noisy.sample_rate() != self.sample_rate() {
            return Err(invalid(format!(
                "enhancer `{}` runs at {} Hz, input is {} Hz",
                self.name,
                self.sample_rate(),
                noisy.sample_rate()
            )));
        }
        let x = noisy.samples();
        let y = match &self.kind {
            EnhancerKind::SpectralSubtraction(ss) => {
                let noise = SpectralSubtraction::estimate_noise(&self.stft, x);
                ss.apply(&self.stft, x, &noise)
            }
            EnhancerKind::MaskNet(net) => net.enhance(&self.stft, x),
        };
        Waveform::new(y, noisy.sample_rate())
    }

    pub fn from_parts(name: &str, kind: EnhancerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            stft: enhancement_stft(),
        }
    }
}

pub fn build_spectral_subtraction(alpha_oversub: f64, floor: f64) -> Result<Enhancer> {
    if !(alpha_oversub >= 1.0) || !alpha_oversub.is_finite() {
        return Err(invalid(format!(
            "alpha_oversub must be >= 1, got {alpha_oversub}"
        )));
    }
    if !(0.0..=1.0).contains(&floor) {
        return Err(invalid(format!("floor must lie in [0, 1], got {floor}")));
    }
    Ok(Enhancer::from_parts(
        "spectral_subtraction",
        EnhancerKind::SpectralSubtraction(SpectralSubtraction {
            alpha_oversub,
            floor,
        }),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrainReport {
    pub initial_mse: f64,
    pub epoch_mse: Vec<f64>,
}

impl MaskTrainReport {
    pub fn final_mse(&self) -> f64 {
        *self.epoch_mse.last().unwrap_or(&self.initial_mse)
    }
}

struct FramePairs {
    inputs: Vec<f32>,
    noisy_mag: Vec<f32>,
    clean_mag: Vec<f32>,
    frames: usize,
    width: usize,
}

fn spectral_mse(net: &MaskNet, data: &FramePairs) -> f64 {
    let mut total = 0.0;
    for start in (0..data.frames).step_by(1024) {
        let n = (data.frames - start).min(1024);
        let x = &data.inputs[start * data.width..(start + n) * data.width];
        let fwd = net.forward(x, n);
        for i in 0..n * BINS {
            let j = start * BINS + i;
            let e = (fwd.mask[i] * data.noisy_mag[j] - data.clean_mag[j]) as f64;
            total += e * e;
        }
    }
    total / (data.frames * BINS) as f64
}

/// Train the mask network on `(noisy, clean)` pairs by minimizing the MSE
/// between masked-noisy and clean STFT magnitudes. Parameters are frozen
/// in the returned enhancer.
pub fn train_mask_enhancer(
    pairs: &[(Waveform, Waveform)],
    config: &MaskNetConfig,
) -> Result<(Enhancer, MaskTrainReport)> {
    if pairs.is_empty() {
        return Err(invalid("mask enhancer needs a non-empty training set"));
    }
    let stft = enhancement_stft();
    let mut net = MaskNet::new(config.clone());

    let mut logmags = Vec::new();
    let mut noisy_mag = Vec::new();
    let mut clean_mag = Vec::new();
    let mut frames = 0;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (noisy, clean) in pairs {
        if noisy.len() != clean.len() {
            return Err(invalid("noisy/clean pair lengths differ"));
        }
        let ns = stft.analyze_padded(noisy.samples());
        let cs = stft.analyze_padded(clean.samples());
        logmags.extend(MaskNet::log_mags(&ns));
        noisy_mag.extend(ns.data.iter().map(|c| c.norm() as f32));
        clean_mag.extend(cs.data.iter().map(|c| c.norm() as f32));
        frames += ns.frames;
        per_pair.push(ns.frames);
    }

    // input normalization statistics
    let mut mean = vec![0.0f64; BINS];
    let mut var = vec![0.0f64; BINS];
    for row in logmags.chunks(BINS) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames as f64);
    for row in logmags.chunks(BINS) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (*v as f64 - m).powi(2);
        }
    }
    let mean_id = net.mean;
    let std_id = net.std;
    for (dst, m) in net.params.get_mut(mean_id).iter_mut().zip(&mean) {
        *dst = *m as f32;
    }
    for (dst, v) in net.params.get_mut(std_id).iter_mut().zip(&var) {
        *dst = ((v / frames as f64).sqrt().max(1e-3)) as f32;
    }

    // contexts are built per utterance so they never straddle two pairs
    let mut inputs = Vec::new();
    let mut offset = 0;
    for n in per_pair {
        inputs.extend(net.inputs(&logmags[offset * BINS..(offset + n) * BINS], n));
        offset += n;
    }
    let width = BINS * (2 * config.context + 1);
    let data = FramePairs {
        inputs,
        noisy_mag,
        clean_mag,
        frames,
        width,
    };

    let initial_mse = spectral_mse(&net, &data);
    let mut opt = Adam::new(&net.params, config.lr);
    let mut order: Vec<usize> = (0..frames).collect();
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    let bs = config.batch_frames.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(seed::derive(
            config.seed,
            "masknet-epoch",
            epoch as u64,
        )));
        for chunk in order.chunks(bs) {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * width);
            for &f in chunk {
                x.extend_from_slice(&data.inputs[f * width..(f + 1) * width]);
            }
            let fwd = net.forward(&x, n);
            let scale = 2.0 / (n * BINS) as f32;
            let mut dz = vec![0.0f32; n * BINS];
            for (i, &f) in chunk.iter().enumerate() {
                for k in 0..BINS {
                    let j = f * BINS + k;
                    let m = fwd.mask[i * BINS + k];
                    let nm = data.noisy_mag[j];
                    let d = scale * (m * nm - data.clean_mag[j]) * nm;
                    dz[i * BINS + k] = d * m * (1.0 - m);
                }
            }
            let mut grads = net.params.zero_grads();
            let mut d = dz;
            for (li, layer) in net.layers.iter().enumerate().rev() {
                let dx = layer.backward(&net.params, &mut grads, &fwd.acts[li], n, &d);
                d = if li > 0 {
                    relu_backward(&fwd.acts[li], &dx)
                } else {
                    dx
                };
            }
            if !grads.all_finite() {
                return Err(Error::TrainingFailure(format!(
                    "non-finite mask-network gradient in epoch {epoch}"
                )));
            }
            opt.step(&mut net.params, &grads);
        }
        let mse = spectral_mse(&net, &data);
        if !mse.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "mask-network loss diverged in epoch {epoch}"
            )));
        }
        debug!(epoch, mse, "mask enhancer epoch");
        epoch_mse.push(mse);
    }

    let enhancer = Enhancer::from_parts("mask_net", EnhancerKind::MaskNet(Box::new(net)));
    Ok((
        enhancer,
        MaskTrainReport {
            initial_mse,
            epoch_mse,
        },
    ))
}

/// Enhancers in channel order. Cheap to clone.
#[derive(Debug, Clone, Default)]
pub struct EnhancerRegistry {
    enhancers: Vec<Arc<Enhancer>>,
}

impl EnhancerRegistry {
    pub fn new(enhancers: Vec<Enhancer>) -> Self {
        Self {
            enhancers: enhancers.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.enhancers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enhancers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Enhancer> {
        self.enhancers.iter().map(|e| e.as_ref())
    }

    pub fn get(&self, name: &str) -> Option<&Enhancer> {
        self.iter().find(|e| e.name() == name)
    }

    /// Restrict to `names`, preserving registry order.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        for n in names {
            if self.get(n).is_none() {
                return Err(invalid(format!("no enhancer named `{n}` is registered")));
            }
        }
        Ok(Self {
            enhancers: self
                .enhancers
                .iter()
                .filter(|e| names.iter().any(|n| n == e.name()))
                .cloned()
                .collect(),
        })
    }

    pub fn hashes(&self) -> Vec<(String, String)> {
        self.iter()
            .map(|e| (e.name().to_string(), e.hash()))
            .collect()
    }

    pub fn enhance_all(&self, noisy: &Waveform) -> Result<Vec<Waveform>> {
        self.iter().map(|e| e.enhance(noisy)).collect()
    }
}
