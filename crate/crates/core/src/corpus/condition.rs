use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Noise,
    Music,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Noise, NoiseKind::Music, NoiseKind::Babble];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Noise => "noise",
            NoiseKind::Music => "music",
            NoiseKind::Babble => "babble",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(NoiseKind::Noise),
            "music" => Ok(NoiseKind::Music),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(invalid(format!("unknown noise kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditionKind {
    Clean,
    Noisy(NoiseKind),
}

/// A test or training condition: `clean` or `<kind>@<snr_db>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub kind: ConditionKind,
    pub snr_db: Option<f64>,
}

impl Condition {
    pub fn clean() -> Self {
        Self {
            kind: ConditionKind::Clean,
            snr_db: None,
        }
    }

    pub fn noisy(kind: NoiseKind, snr_db: f64) -> Self {
        Self {
            kind: ConditionKind::Noisy(kind),
            snr_db: Some(snr_db),
        }
    }

    pub fn noise_kind(&self) -> Option<NoiseKind> {
        match self.kind {
            ConditionKind::Clean => None,
            ConditionKind::Noisy(k) => Some(k),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        self.noise_kind().map_or("clean", NoiseKind::name)
    }

    /// Clean plus every noise kind at each of the given SNRs.
    pub fn grid(snrs: &[f64]) -> Vec<Condition> {
        let mut out = vec![Condition::clean()];
        for kind in NoiseKind::ALL {
            out.extend(snrs.iter().map(|&s| Condition::noisy(kind, s)));
        }
        out
    }

    pub fn parse_list(s: &str) -> Result<Vec<Condition>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.snr_db) {
            (ConditionKind::Noisy(k), Some(snr)) => write!(f, "{k}@{snr}"),
            _ => f.write_str("clean"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "clean" {
            return Ok(Condition::clean());
        }
        let (kind, snr) = s
            .split_once('@')
            .ok_or_else(|| invalid(format!("condition `{s}` must be `clean` or `<kind>@<snr>`")))?;
        let snr: f64 = snr
            .parse()
            .map_err(|_| invalid(format!("bad SNR in condition `{s}`")))?;
        if !snr.is_finite() {
            return Err(invalid(format!("bad SNR in condition `{s}`")));
        }
        Ok(Condition::noisy(kind.parse()?, snr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Train,
    Test,
}

impl Pool {
    /// Seeds available to the pool. The two ranges never overlap.
    pub fn seed_range(self) -> Range<u64> {
        match self {
            Pool::Train => 0..(1 << 31),
            Pool::Test => (1 << 31)..(1 << 32),
        }
    }

    pub fn contains(self, seed: u64) -> bool {
        self.seed_range().contains(&seed)
    }
}

/// A condition bound to the noise pool it draws from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCondition {
    pub kind: ConditionKind,
    pub snr_db: Option<f64>,
    pub pool: Pool,
}

impl NoiseCondition {
    pub fn new(condition: Condition, pool: Pool) -> Result<Self> {
        match (condition.kind, condition.snr_db) {
            (ConditionKind::Clean, None) | (ConditionKind::Noisy(_), Some(_)) => Ok(Self {
                kind: condition.kind,
                snr_db: condition.snr_db,
                pool,
            }),
            _ => Err(invalid("snr_db must be present iff the condition is noisy")),
        }
    }

    pub fn condition(&self) -> Condition {
        Condition {
            kind: self.kind,
            snr_db: self.snr_db,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_strings() {
        let c: Condition = "babble@-5".parse().unwrap();
        assert_eq!(c, Condition::noisy(NoiseKind::Babble, -5.0));
        assert_eq!(c.to_string(), "babble@-5");
        assert_eq!("clean".parse::<Condition>().unwrap(), Condition::clean());
        assert_eq!(
            Condition::noisy(NoiseKind::Music, 2.5).to_string(),
            "music@2.5"
        );
        assert!("static@3".parse::<Condition>().is_err());
        assert!("noise".parse::<Condition>().is_err());
        assert!(matches!(
            "hiss".parse::<NoiseKind>(),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pool_ranges_disjoint() {
        let (a, b) = (Pool::Train.seed_range(), Pool::Test.seed_range());
        assert!(a.end <= b.start);
    }

    #[test]
    fn snr_presence_tracks_kind() {
        let bad = Condition {
            kind: ConditionKind::Clean,
            snr_db: Some(3.0),
        };
        assert!(NoiseCondition::new(bad, Pool::Test).is_err());
        let bad = Condition {
            kind: ConditionKind::Noisy(NoiseKind::Noise),
            snr_db: None,
        };
        assert!(NoiseCondition::new(bad, Pool::Test).is_err());
    }

    #[test]
    fn grid_has_clean_plus_kinds() {
        let g = Condition::grid(&[-5.0, 0.0, 5.0, 10.0]);
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], Condition::clean());
    }
}
