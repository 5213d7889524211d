use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::credit::{CreditKind, CreditStrategy};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::oracle::{MistakeMode, OracleKind, OracleSpec};
use crate::reward::RewardConfig;
use crate::worldmodel::WorldModelConfig;

/// Seeds of the five-seed suites.
pub const EVAL_SEEDS: [u64; 5] = [12345, 23456, 34567, 45678, 56789];

/// Training method: a credit-assignment kind, or the reference agent that
/// learns from the true reward without feedback.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Prior,
    Rvar,
    Nrp,
    Bisim,
    None,
    PriorOnly,
    Reference,
}

impl Method {
    pub fn credit(self) -> Option<CreditKind> {
        Some(match self {
            Method::Prior => CreditKind::Prior,
            Method::Rvar => CreditKind::Rvar,
            Method::Nrp => CreditKind::Nrp,
            Method::Bisim => CreditKind::Bisim,
            Method::None => CreditKind::None,
            Method::PriorOnly => CreditKind::PriorOnly,
            Method::Reference => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Reference => "reference",
            m => m.credit().unwrap().as_str(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "reference" {
            return Ok(Method::Reference);
        }
        Ok(match s.parse::<CreditKind>()? {
            CreditKind::Prior => Method::Prior,
            CreditKind::Rvar => Method::Rvar,
            CreditKind::Nrp => Method::Nrp,
            CreditKind::Bisim => Method::Bisim,
            CreditKind::None => Method::None,
            CreditKind::PriorOnly => Method::PriorOnly,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub method: Method,
    pub oracle: OracleKind,
    pub seed: u64,
    /// Segment length `l`.
    pub segment_len: usize,
    /// Queries per feedback session `M`.
    pub queries_per_session: usize,
    /// Steps between feedback sessions `K`.
    pub session_interval: usize,
    /// Steps between world-model updates `j`.
    pub wm_interval: usize,
    pub feedback_budget: usize,
    pub total_steps: usize,
    /// Overrides the task default when set.
    pub lambda: Option<f64>,
    pub random_steps: usize,
    pub intrinsic_steps: usize,
    pub replay_capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Candidate pairs per selected query.
    pub candidate_factor: usize,
    /// Overrides the task default tie threshold when set.
    pub equal_threshold: Option<f64>,
    pub mistake_mode: MistakeMode,
    /// Seconds a human-oracle session waits for labels before proceeding.
    pub human_wait_secs: f64,
    pub reward: RewardConfig,
    pub agent: AgentConfig,
    pub world_model: WorldModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::by_name("keydoor").expect("built-in env"),
            method: Method::Prior,
            oracle: OracleKind::Perfect,
            seed: EVAL_SEEDS[0],
            segment_len: 50,
            queries_per_session: 10,
            session_interval: 5000,
            wm_interval: 2000,
            feedback_budget: 200,
            total_steps: 200_000,
            lambda: None,
            random_steps: 1000,
            intrinsic_steps: 9000,
            replay_capacity: 100_000,
            eval_interval: 1000,
            eval_episodes: 10,
            candidate_factor: 10,
            equal_threshold: None,
            mistake_mode: MistakeMode::PerQuery,
            human_wait_secs: 0.0,
            reward: RewardConfig::default(),
            agent: AgentConfig::default(),
            world_model: WorldModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Steps of random plus intrinsically rewarded pretraining.
    pub fn pretrain_steps(&self) -> usize {
        self.random_steps + self.intrinsic_steps
    }

    pub fn credit_strategy(&self) -> Option<CreditStrategy> {
        let kind = self.method.credit()?;
        let sparse = matches!(self.env, EnvConfig::KeyDoor(_));
        let mut s = CreditStrategy::with_default_lambda(kind, sparse);
        if let (Some(l), false) = (self.lambda, kind == CreditKind::PriorOnly) {
            s.lambda = l;
        }
        Some(s)
    }

    pub fn oracle_spec(&self) -> OracleSpec {
        let default_threshold = match self.env {
            EnvConfig::KeyDoor(_) => 0.0,
            EnvConfig::PointMass(_) => 1e-6,
        };
        OracleSpec {
            kind: self.oracle,
            equal_threshold: self.equal_threshold.unwrap_or(default_threshold),
            seed: super::stream_seed(self.seed, super::Stream::Oracle),
            mistake_mode: self.mistake_mode,
        }
    }

    /// Number of feedback sessions the budget allows.
    pub fn session_count(&self) -> usize {
        if self.method == Method::Reference {
            return 0;
        }
        self.feedback_budget / self.queries_per_session
    }

    /// Whether a feedback session starts after `step` environment steps.
    pub fn is_session_step(&self, step: usize, sessions_done: usize) -> bool {
        sessions_done < self.session_count()
            && step >= self.pretrain_steps()
            && (step - self.pretrain_steps()) % self.session_interval == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.segment_len < 2 {
            return bad(format!("segment length {} must be >= 2", self.segment_len));
        }
        if self.queries_per_session == 0 {
            return bad("queries per session must be >= 1".into());
        }
        if self.session_interval < self.segment_len {
            return bad(format!("session interval {} shorter than segment length {}", self.session_interval, self.segment_len));
        }
        if self.feedback_budget < self.queries_per_session {
            return bad(format!("budget {} below queries per session {}", self.feedback_budget, self.queries_per_session));
        }
        if self.env.horizon() < self.segment_len {
            return bad(format!("horizon {} shorter than segment length {}", self.env.horizon(), self.segment_len));
        }
        if self.wm_interval == 0 || self.eval_interval == 0 || self.candidate_factor == 0 {
            return bad("intervals and candidate factor must be positive".into());
        }
        if self.replay_capacity < self.segment_len {
            return bad("replay capacity below segment length".into());
        }
        if let Some(s) = self.credit_strategy() {
            s.validate()?;
        }
        self.oracle_spec().validate()?;
        self.agent.validate()?;
        if self.reward.ensemble_size == 0 {
            return bad("ensemble size must be >= 1".into());
        }
        if let EnvConfig::PointMass(pm) = &self.env {
            if !pm.discrete_actions {
                return bad("end-to-end point-mass runs need discrete_actions = true".into());
            }
        }
        Ok(())
    }
}
