//! Preference labelers: a perfect synthetic teacher, a mistake teacher that
//! flips labels, and the bridge that hands queries to human labelers.

mod bridge;

pub use bridge::{HumanBridge, PendingQuery, QueryPayload, SegmentView, SubmitError};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Segment};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleKind {
    Perfect,
    Mistake { epsilon: f64 },
    Human,
}

impl OracleKind {
    pub fn labeler_name(&self) -> &'static str {
        match self {
            OracleKind::Perfect => "perfect",
            OracleKind::Mistake { .. } => "mistake",
            OracleKind::Human => "human",
        }
    }
}

impl FromStr for OracleKind {
    type Err = Error;

    /// Parses `perfect`, `mistake:<epsilon>` or `human`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "perfect" => Ok(OracleKind::Perfect),
            None if s == "human" => Ok(OracleKind::Human),
            Some(("mistake", eps)) => {
                let epsilon: f64 = eps.parse().map_err(|_| Error::Config(format!("bad mistake rate {eps:?}")))?;
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err(Error::Config(format!("mistake rate {epsilon} outside [0, 1]")));
                }
                Ok(OracleKind::Mistake { epsilon })
            }
            _ => Err(Error::Config(format!("unknown oracle {s:?}; expected perfect, mistake:<eps> or human"))),
        }
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleKind::Perfect => write!(f, "perfect"),
            OracleKind::Mistake { epsilon } => write!(f, "mistake:{epsilon}"),
            OracleKind::Human => write!(f, "human"),
        }
    }
}

/// How mistake labels are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MistakeMode {
    /// Each query flips independently with probability epsilon.
    #[default]
    PerQuery,
    /// Exactly `round(epsilon * budget)` of the budgeted queries flip.
    FixedFraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub kind: OracleKind,
    /// Return gaps at or below this count as ties.
    pub equal_threshold: f64,
    pub seed: u64,
    #[serde(default)]
    pub mistake_mode: MistakeMode,
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.equal_threshold >= 0.0) {
            return Err(Error::Config(format!("equal threshold {} must be >= 0", self.equal_threshold)));
        }
        if let OracleKind::Mistake { epsilon } = self.kind {
            if !(0.0..=1.0).contains(&epsilon) {
                return Err(Error::Config(format!("mistake rate {epsilon} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Label from true segment returns.
pub fn perfect_label(return_a: f64, return_b: f64, equal_threshold: f64) -> Label {
    let d = return_a - return_b;
    if d.abs() <= equal_threshold {
        Label::EQUAL
    } else if d > 0.0 {
        Label::A
    } else {
        Label::B
    }
}

/// Seeded synthetic teacher (perfect or mistake).
#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    spec: OracleSpec,
    rng: ChaCha8Rng,
    asked: usize,
    flips: usize,
    fixed: Option<HashSet<usize>>,
}

impl SyntheticOracle {
    /// `budget` sizes the flip set in fixed-fraction mode.
    pub fn new(spec: OracleSpec, budget: usize) -> Result<Self> {
        spec.validate()?;
        if spec.kind == OracleKind::Human {
            return Err(Error::Config("the human oracle is not synthetic".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let fixed = match (spec.kind, spec.mistake_mode) {
            (OracleKind::Mistake { epsilon }, MistakeMode::FixedFraction) => {
                let k = ((epsilon * budget as f64).round() as usize).min(budget);
                Some(sample(&mut rng, budget, k).into_iter().collect())
            }
            _ => None,
        };
        Ok(SyntheticOracle { spec, rng, asked: 0, flips: 0, fixed })
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn flips(&self) -> usize {
        self.flips
    }

    pub fn asked(&self) -> usize {
        self.asked
    }

    pub fn label_returns(&mut self, return_a: f64, return_b: f64) -> Label {
        let truth = perfect_label(return_a, return_b, self.spec.equal_threshold);
        let ordinal = self.asked;
        self.asked += 1;
        let OracleKind::Mistake { epsilon } = self.spec.kind else {
            return truth;
        };
        let flip = match &self.fixed {
            Some(set) => set.contains(&ordinal),
            // Draw for every query so the stream does not depend on ties.
            None => self.rng.gen::<f64>() < epsilon,
        };
        if flip && truth != Label::EQUAL {
            self.flips += 1;
            truth.swapped()
        } else {
            truth
        }
    }

    pub fn label(&mut self, a: &Segment, b: &Segment) -> Result<Label> {
        if a.len() != b.len() {
            return Err(Error::Data(format!("segments differ in length: {} vs {}", a.len(), b.len())));
        }
        Ok(self.label_returns(a.target_return(), b.target_return()))
    }
}
