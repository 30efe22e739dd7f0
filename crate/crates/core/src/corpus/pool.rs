use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{crop, mix_at_snr, synth_noise, synth_utterance, truncate_segment};
use super::{ConditionKind, NoiseCondition, NoiseKind, Pool, SpeakerSpec, Waveform};
use crate::error::{invalid, Error, Result};
use crate::seed;

/// Speaker ids of unseen evaluation speakers start here.
const EVAL_SPEAKER_BASE: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub utt_duration_s: f64,
    pub segment_s: f64,
    pub n_eval_speakers: usize,
    pub eval_utts_per_speaker: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 50,
            utt_duration_s: 3.0,
            segment_s: 2.0,
            n_eval_speakers: 10,
            eval_utts_per_speaker: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// Class label for training speakers, external id for unseen ones.
    pub speaker_id: u32,
    pub waveform: Waveform,
}

pub fn training_speakers(spec: &CorpusSpec) -> Vec<SpeakerSpec> {
    let base = seed::derive(spec.seed, "train-speakers", 0);
    (0..spec.n_speakers as u32)
        .map(|i| SpeakerSpec::random(i, base))
        .collect()
}

pub fn eval_speakers(spec: &CorpusSpec) -> Vec<SpeakerSpec> {
    let base = seed::derive(spec.seed, "eval-speakers", 0);
    (0..spec.n_eval_speakers as u32)
        .map(|i| SpeakerSpec::random(EVAL_SPEAKER_BASE + i, base))
        .collect()
}

fn segment(spec: &CorpusSpec, speaker: &SpeakerSpec, tag: &str, idx: usize) -> Result<Waveform> {
    let key = (speaker.speaker_id as u64) << 20 | idx as u64;
    let utt = synth_utterance(
        speaker,
        spec.utt_duration_s,
        seed::derive(spec.seed, tag, key),
    )?;
    truncate_segment(&utt, spec.segment_s, seed::derive(spec.seed, "crop", key))
}

/// Clean training segments, speaker-major order.
pub fn build_training_set(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    if spec.n_speakers == 0 || spec.utts_per_speaker == 0 {
        return Err(invalid("training corpus needs speakers and utterances"));
    }
    let mut out = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for sp in training_speakers(spec) {
        for j in 0..spec.utts_per_speaker {
            out.push(Utterance {
                id: format!("spk{:03}-utt{:03}", sp.speaker_id, j),
                speaker_id: sp.speaker_id,
                waveform: segment(spec, &sp, "train-utt", j)?,
            });
        }
    }
    Ok(out)
}

/// Evaluation segments: unseen speakers, or held-out utterances of the
/// training speakers when `seen` is set.
pub fn build_eval_set(spec: &CorpusSpec, seen: bool) -> Result<Vec<Utterance>> {
    let (speakers, tag, prefix) = if seen {
        (training_speakers(spec), "heldout-utt", "seen")
    } else {
        (eval_speakers(spec), "eval-utt", "eval")
    };
    let mut out = Vec::new();
    for sp in &speakers {
        for j in 0..spec.eval_utts_per_speaker {
            out.push(Utterance {
                id: format!("{prefix}-spk{:05}-utt{:03}", sp.speaker_id, j),
                speaker_id: sp.speaker_id,
                waveform: segment(spec, sp, tag, j)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NoiseEntry {
    pub kind: NoiseKind,
    pub seed: u64,
    pub waveform: Waveform,
}

/// Noise recordings belonging to one pool.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pool: Pool,
    entries: Vec<NoiseEntry>,
}

impl NoiseBank {
    pub fn build(pool: Pool, per_kind: usize, duration_s: f64, base_seed: u64) -> Result<Self> {
        if per_kind == 0 {
            return Err(invalid("noise bank needs at least one entry per kind"));
        }
        let range = pool.seed_range();
        let span = range.end - range.start;
        let mut entries = Vec::new();
        for kind in NoiseKind::ALL {
            for i in 0..per_kind {
                let seed = range.start + seed::derive(base_seed, kind.name(), i as u64) % span;
                entries.push(NoiseEntry {
                    kind,
                    seed,
                    waveform: synth_noise(kind, duration_s, seed)?,
                });
            }
        }
        Ok(Self { pool, entries })
    }

    pub fn pool(&self) -> Pool {
        self.pool
    }

    pub fn entries(&self) -> &[NoiseEntry] {
        &self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = (NoiseKind, u64)> + '_ {
        self.entries.iter().map(|e| (e.kind, e.seed))
    }

    /// Corrupt `clean` under `condition`. The noise instance and crop
    /// offset are drawn from `seed`.
    pub fn corrupt(
        &self,
        clean: &Waveform,
        condition: &NoiseCondition,
        seed: u64,
    ) -> Result<Waveform> {
        if condition.pool != self.pool {
            return Err(Error::PoolViolation(format!(
                "{:?} condition requested from the {:?} noise bank",
                condition.pool, self.pool
            )));
        }
        let kind = match condition.kind {
            ConditionKind::Clean => return Ok(clean.clone()),
            ConditionKind::Noisy(k) => k,
        };
        let snr = condition
            .snr_db
            .ok_or_else(|| invalid("noisy condition without SNR"))?;
        let candidates: Vec<&NoiseEntry> = self.entries.iter().filter(|e| e.kind == kind).collect();
        let mut rng = seed::rng(seed);
        let entry = candidates[rng.gen_range(0..candidates.len())];
        if entry.waveform.len() < clean.len() {
            return Err(invalid(format!(
                "noise recordings ({} samples) shorter than the utterance ({})",
                entry.waveform.len(),
                clean.len()
            )));
        }
        let offset = rng.gen_range(0..=entry.waveform.len() - clean.len());
        let noise = crop(&entry.waveform, offset, clean.len())?;
        mix_at_snr(clean, &noise, snr)
    }
}

/// Tracks which pool every `(kind, seed)` noise source belongs to.
#[derive(Debug, Default, Clone)]
pub struct PoolRegistry {
    owners: BTreeMap<(NoiseKind, u64), Pool>,
}

impl PoolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, kind: NoiseKind, seed: u64, pool: Pool) -> Result<()> {
        if !pool.contains(seed) {
            return Err(Error::PoolViolation(format!(
                "{kind} seed {seed} outside the {pool:?} seed range"
            )));
        }
        match self.owners.insert((kind, seed), pool) {
            Some(prev) if prev != pool => Err(Error::PoolViolation(format!(
                "{kind} seed {seed} used by both {prev:?} and {pool:?} pools"
            ))),
            _ => Ok(()),
        }
    }

    pub fn register_bank(&mut self, bank: &NoiseBank) -> Result<()> {
        bank.keys()
            .try_for_each(|(kind, seed)| self.register(kind, seed, bank.pool()))
    }

    pub fn pool_of(&self, kind: NoiseKind, seed: u64) -> Option<Pool> {
        self.owners.get(&(kind, seed)).copied()
    }

    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }
}
