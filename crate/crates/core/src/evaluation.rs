//! Trial scoring, equal error rate and per-condition evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::corpus::{Condition, NoiseBank, NoiseCondition, Pool, Utterance, Waveform};
use crate::encoder::{SpeakerEmbedding, SpeakerEncoder};
use crate::enhancement::EnhancerRegistry;
use crate::error::{invalid, Error, Result};
use crate::features::{stack_channels, FeatureExtractor, MelFeature};
use crate::fusion::Fusion;
use crate::nn::ParamStore;
use crate::seed;

pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    let na = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Equal error rate of `(score, is_target)` pairs.
///
/// A trial is accepted when its score is at least the threshold. Thresholds
/// run over every distinct score and then past the maximum. The first
/// threshold where the false-rejection rate reaches the false-acceptance
/// rate is located and the crossing is interpolated linearly from the
/// previous threshold.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<f64> {
    let nt = scores.iter().filter(|s| s.1).count();
    let nn = scores.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(invalid(
            "EER needs at least one target and one nontarget trial",
        ));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::DegenerateInput("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // counts of targets / nontargets strictly below the current threshold
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0;
    loop {
        let frr = below_t as f64 / nt as f64;
        let far = (nn - below_n) as f64 / nn as f64;
        if frr - far >= 0.0 {
            return Ok(match prev {
                None => frr,
                Some((pfrr, pfar)) => crossing(pfrr, pfar, frr, far),
            });
        }
        prev = Some((frr, far));
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
}

/// Linear interpolation of the FRR/FAR crossing between two operating points.
pub fn crossing(frr0: f64, far0: f64, frr1: f64, far1: f64) -> f64 {
    let d0 = frr0 - far0;
    let d1 = frr1 - far1;
    let lambda = -d0 / (d1 - d0);
    frr0 + lambda * (frr1 - frr0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub utt_a: String,
    pub utt_b: String,
}

/// All same-speaker pairs plus as many distinct random cross-speaker pairs.
pub fn make_trials(utts: &[Utterance], seed: u64) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            if utts[i].speaker_id == utts[j].speaker_id {
                trials.push(Trial {
                    target: true,
                    utt_a: utts[i].id.clone(),
                    utt_b: utts[j].id.clone(),
                });
            }
        }
    }
    let n_target = trials.len();
    let cross: usize = {
        let mut per = BTreeMap::new();
        utts.iter()
            .for_each(|u| *per.entry(u.speaker_id).or_insert(0usize) += 1);
        let n = utts.len();
        (n * n - per.values().map(|c| c * c).sum::<usize>()) / 2
    };
    if n_target == 0 || cross == 0 {
        return Err(invalid(
            "trial list needs repeated speakers and at least two speakers",
        ));
    }
    let want = n_target.min(cross);
    let mut rng = seed::rng(seed::derive(seed, "trials", 0));
    let mut seen = std::collections::HashSet::new();
    while seen.len() < want {
        let i = rng.gen_range(0..utts.len());
        let j = rng.gen_range(0..utts.len());
        let (i, j) = (i.min(j), i.max(j));
        if utts[i].speaker_id != utts[j].speaker_id && seen.insert((i, j)) {
            trials.push(Trial {
                target: false,
                utt_a: utts[i].id.clone(),
                utt_b: utts[j].id.clone(),
            });
        }
    }
    Ok(trials)
}

pub fn write_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        writeln!(s, "{} {} {}", u8::from(t.target), t.utt_a, t.utt_b).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (n, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || {
            invalid(format!(
                "trial line {}: expected `label utt_a utt_b`",
                n + 1
            ))
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let target = match parts[0] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        if parts[1] == parts[2] {
            return Err(invalid(format!(
                "trial line {}: utterance paired with itself",
                n + 1
            )));
        }
        out.push(Trial {
            target,
            utt_a: parts[1].to_string(),
            utt_b: parts[2].to_string(),
        });
    }
    Ok(out)
}

/// How the encoder input is formed from a noisy waveform.
#[derive(Debug, Clone)]
pub enum FrontEnd {
    /// log-mel of the noisy input itself
    Noisy,
    /// UNet fusion of the stacked noisy and enhanced log-mels
    Fusion {
        fusion: Fusion,
        use_noisy_channel: bool,
    },
    /// waveform mix `w · mean(enhanced) + (1 − w) · noisy`
    Linear(f64),
}

/// Full inference path: enhance, build features, fuse and embed.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub extractor: FeatureExtractor,
    pub enhancers: EnhancerRegistry,
    pub front: FrontEnd,
    pub encoder: SpeakerEncoder,
    pub params: ParamStore<f32>,
}

pub fn linear_interp_baseline(w: f64, noisy: &Waveform, enhanced: &Waveform) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&w) {
        return Err(invalid(format!("interpolation weight {w} outside [0, 1]")));
    }
    if noisy.len() != enhanced.len() || noisy.sample_rate() != enhanced.sample_rate() {
        return Err(invalid(
            "noisy and enhanced signals differ in length or rate",
        ));
    }
    let y = noisy
        .samples()
        .iter()
        .zip(enhanced.samples())
        .map(|(&n, &e)| w * e + (1.0 - w) * n)
        .collect();
    Waveform::new(y, noisy.sample_rate())
}

/// Sample-wise mean of equally long signals.
pub fn average_waveforms(ws: &[Waveform]) -> Result<Waveform> {
    let first = ws.first().ok_or_else(|| invalid("nothing to average"))?;
    if ws.iter().any(|w| w.len() != first.len()) {
        return Err(invalid("signals to average differ in length"));
    }
    let k = ws.len() as f64;
    let y = (0..first.len())
        .map(|i| ws.iter().map(|w| w.samples()[i]).sum::<f64>() / k)
        .collect();
    Waveform::new(y, first.sample_rate())
}

impl Pipeline {
    pub fn encoder_input(&self, noisy: &Waveform) -> Result<MelFeature> {
        match &self.front {
            FrontEnd::Noisy => self.extractor.extract(noisy),
            FrontEnd::Linear(w) => {
                let enhanced = average_waveforms(&self.enhancers.enhance_all(noisy)?)?;
                self.extractor
                    .extract(&linear_interp_baseline(*w, noisy, &enhanced)?)
            }
            FrontEnd::Fusion {
                fusion,
                use_noisy_channel,
            } => {
                let z = fusion_input(&self.extractor, &self.enhancers, *use_noisy_channel, noisy)?;
                fusion.fuse(&z)
            }
        }
    }

    pub fn embed(&self, noisy: &Waveform) -> Result<SpeakerEmbedding> {
        self.encoder
            .embed(&self.params, &self.encoder_input(noisy)?)
    }
}

/// Stacked fusion input for one noisy waveform.
pub fn fusion_input(
    extractor: &FeatureExtractor,
    enhancers: &EnhancerRegistry,
    use_noisy_channel: bool,
    noisy: &Waveform,
) -> Result<crate::features::MultiChannelFeature> {
    let enhanced: Vec<MelFeature> = enhancers
        .enhance_all(noisy)?
        .iter()
        .map(|w| extractor.extract(w))
        .collect::<Result<_>>()?;
    if use_noisy_channel {
        stack_channels(&extractor.extract(noisy)?, &enhanced)
    } else {
        let refs: Vec<&MelFeature> = enhanced.iter().collect();
        crate::features::MultiChannelFeature::from_channels(&refs)
    }
}

/// Seed of the corruption applied to `utt_id` under `condition`.
pub fn corruption_seed(base: u64, utt_id: &str, condition: &Condition) -> u64 {
    seed::derive(base, &format!("eval:{utt_id}:{condition}"), 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    pub eer: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EerTable {
    pub rows: Vec<ConditionResult>,
}

impl EerTable {
    /// Unweighted mean over all rows.
    pub fn average(&self) -> f64 {
        self.rows.iter().map(|r| r.eer).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn get(&self, condition: &Condition) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| &r.condition == condition)
            .map(|r| r.eer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,snr_db,eer,n_target,n_nontarget\n");
        for r in &self.rows {
            let snr = r
                .condition
                .snr_db
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{}",
                r.condition.kind_name(),
                snr,
                r.eer,
                r.n_target,
                r.n_nontarget
            )
            .unwrap();
        }
        let (nt, nn) = self
            .rows
            .first()
            .map_or((0, 0), |r| (r.n_target, r.n_nontarget));
        writeln!(s, "average,,{},{nt},{nn}", self.average()).unwrap();
        s
    }
}

/// Embeds every trial utterance once per condition and scores the trials.
pub struct Evaluator<'a> {
    utts: HashMap<&'a str, &'a Utterance>,
    bank: &'a NoiseBank,
    seed: u64,
}

impl<'a> Evaluator<'a> {
    pub fn new(utts: &'a [Utterance], bank: &'a NoiseBank, seed: u64) -> Result<Self> {
        if bank.pool() != Pool::Test {
            return Err(Error::PoolViolation(
                "evaluation must draw from the test noise pool".into(),
            ));
        }
        Ok(Self {
            utts: utts.iter().map(|u| (u.id.as_str(), u)).collect(),
            bank,
            seed,
        })
    }

    /// Corrupted version of one utterance; identical for every system.
    pub fn corrupted(&self, utt_id: &str, condition: &Condition) -> Result<Waveform> {
        let u = self
            .utts
            .get(utt_id)
            .ok_or_else(|| Error::MissingUtterance(utt_id.to_string()))?;
        let nc = NoiseCondition::new(*condition, Pool::Test)?;
        self.bank.corrupt(
            &u.waveform,
            &nc,
            corruption_seed(self.seed, utt_id, condition),
        )
    }

    pub fn embeddings(
        &self,
        pipeline: &Pipeline,
        trials: &[Trial],
        condition: &Condition,
    ) -> Result<BTreeMap<String, SpeakerEmbedding>> {
        let mut cache = BTreeMap::new();
        for t in trials {
            for id in [&t.utt_a, &t.utt_b] {
                if !cache.contains_key(id) {
                    let e = pipeline.embed(&self.corrupted(id, condition)?)?;
                    cache.insert(id.clone(), e);
                }
            }
        }
        Ok(cache)
    }

    pub fn condition_eer(
        &self,
        pipeline: &Pipeline,
        trials: &[Trial],
        condition: &Condition,
    ) -> Result<ConditionResult> {
        let emb = self.embeddings(pipeline, trials, condition)?;
        let scores = score_trials(&emb, trials)?;
        Ok(ConditionResult {
            condition: *condition,
            eer: compute_eer(&scores)?,
            n_target: trials.iter().filter(|t| t.target).count(),
            n_nontarget: trials.iter().filter(|t| !t.target).count(),
        })
    }

    pub fn evaluate(
        &self,
        pipeline: &Pipeline,
        trials: &[Trial],
        conditions: &[Condition],
    ) -> Result<EerTable> {
        let rows = conditions
            .iter()
            .map(|c| self.condition_eer(pipeline, trials, c))
            .collect::<Result<_>>()?;
        Ok(EerTable { rows })
    }
}

pub fn score_trials(
    emb: &BTreeMap<String, SpeakerEmbedding>,
    trials: &[Trial],
) -> Result<Vec<(f64, bool)>> {
    trials
        .iter()
        .map(|t| {
            let get = |id: &String| {
                emb.get(id)
                    .ok_or_else(|| Error::MissingUtterance(id.clone()))
            };
            Ok((cosine_score(get(&t.utt_a)?, get(&t.utt_b)?)?, t.target))
        })
        .collect()
}
