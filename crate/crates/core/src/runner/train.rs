use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::metrics::MetricRow;
use super::{stream_seed, Stream};
use crate::agent::{ActMode, DqnAgent, TdBatch, VisitCounts};
use crate::credit::{importance_from_attention, uniform_importance, CreditStrategy, RewardTrainer, SessionStats, TrainPair};
use crate::data::{relabel, sample_candidate_pairs, select_queries, Label, PreferenceDataset, PreferenceTriplet, ReplayBuffer, Segment, Transition};
use crate::envs::{Action, Environment};
use crate::error::{Error, Result};
use crate::oracle::{HumanBridge, OracleKind, PendingQuery, QueryPayload, SegmentView, SyntheticOracle};
use crate::reward::RewardEnsemble;
use crate::worldmodel::WorldModel;

/// Outcome of one feedback session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub index: usize,
    pub step: usize,
    /// Queries issued this session.
    pub queries: usize,
    /// Labels added to the dataset this session.
    pub labeled: usize,
    pub dataset_size: usize,
    pub ce: f64,
    pub aux: f64,
    pub member_losses: Vec<f64>,
    /// Cumulative label flips by a mistake oracle.
    pub flips: usize,
    /// Mean and standard deviation of the relabeled buffer rewards.
    pub label_mean: f64,
    pub label_std: f64,
}

/// Everything a run produces, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub metrics: Vec<MetricRow>,
    /// Seconds since the run started, one entry per metric row.
    pub wall_times: Vec<f64>,
    pub sessions: Vec<SessionRecord>,
    pub dataset_size: usize,
    /// Queries issued over the whole run.
    pub queries_issued: usize,
    /// Mean dynamics loss of each world-model update.
    pub dynamics_losses: Vec<f64>,
}

impl RunRecord {
    /// The record without wall-clock fields, for reproducibility checks.
    pub fn fingerprint(&self) -> String {
        let mut r = self.clone();
        r.wall_times.clear();
        serde_json::to_string(&r).expect("record serialises")
    }

    /// Aligned `(returns, successes)` of every evaluation episode.
    pub fn eval_series(&self) -> (Vec<f64>, Vec<f64>) {
        (self.metrics.iter().map(|m| m.eval_return).collect(), self.metrics.iter().map(|m| m.eval_success as f64).collect())
    }
}

/// Optional outputs of a run.
#[derive(Clone, Default)]
pub struct RunOptions {
    /// Run directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Label exchange with the query service (human oracle).
    pub bridge: Option<HumanBridge>,
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("attention"))?;
        fs::write(root.join("config.json"), serde_json::to_string_pretty(config)?)?;
        fs::write(root.join("preferences.jsonl"), "")?;
        let mut w = csv::Writer::from_path(root.join("metrics.csv"))?;
        w.write_record(["step", "episode", "eval_return", "eval_success", "method", "seed"])?;
        w.flush()?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    fn append_metrics(&self, rows: &[MetricRow]) -> Result<()> {
        let file = fs::OpenOptions::new().append(true).open(self.root.join("metrics.csv"))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut f = fs::File::create(self.root.join(rel))?;
        serde_json::to_writer(&mut f, value)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct AttentionDump<'a> {
    session: usize,
    step: usize,
    queries: Vec<AttentionEntry<'a>>,
}

#[derive(Serialize)]
struct AttentionEntry<'a> {
    query_id: u64,
    source_episodes: [u64; 2],
    start_indices: [usize; 2],
    alpha: [&'a [f64]; 2],
}

/// Runs pretraining and the interleaved feedback loop; see [`RunConfig`].
pub fn train(config: &RunConfig, options: RunOptions) -> Result<RunRecord> {
    config.validate()?;
    if config.oracle == OracleKind::Human && options.bridge.is_none() {
        return Err(Error::Config("the human oracle needs a query bridge".into()));
    }
    Trainer::new(config, options)?.run()
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    strategy: Option<CreditStrategy>,
    env: Box<dyn Environment>,
    eval_env: Box<dyn Environment>,
    env_rng: ChaCha8Rng,
    agent_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    reward_rng: ChaCha8Rng,
    query_rng: ChaCha8Rng,
    wm_rng: ChaCha8Rng,
    buffer: ReplayBuffer,
    ensemble: RewardEnsemble,
    reward_trainer: RewardTrainer,
    world_model: Option<WorldModel>,
    agent: DqnAgent,
    counts: VisitCounts,
    oracle: Option<SyntheticOracle>,
    bridge: Option<HumanBridge>,
    dataset: PreferenceDataset,
    /// Importance vectors of both segments of every triplet, refreshed per session.
    alphas: Vec<[Vec<f64>; 2]>,
    dir: Option<RunDir>,
    record: RunRecord,
    next_query: u64,
    episode: u64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, options: RunOptions) -> Result<Self> {
        let env = cfg.env.build()?;
        let eval_env = cfg.env.build()?;
        let spec = env.spec().clone();
        let Some(actions) = spec.action_space.num_discrete() else {
            return Err(Error::Config("the Q-learner needs a discrete action space".into()));
        };
        let act_dim = spec.action_space.encoding_dim();
        let mut init = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::Init));
        let ensemble = RewardEnsemble::new(&cfg.reward, spec.obs_dim, act_dim, &mut init)?;
        let agent = DqnAgent::new(cfg.agent.clone(), spec.obs_dim, actions, &mut init)?;
        let strategy = cfg.credit_strategy();
        let world_model = match strategy {
            Some(s) if s.kind.needs_attention() => {
                let mut wm_init = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::WorldModelInit));
                Some(WorldModel::new(cfg.world_model.clone(), spec.obs_dim, &spec.action_space, cfg.segment_len, &mut wm_init)?)
            }
            _ => None,
        };
        let oracle = match cfg.oracle {
            OracleKind::Human => None,
            _ => Some(SyntheticOracle::new(cfg.oracle_spec(), cfg.feedback_budget)?),
        };
        let dir = options.out_dir.as_deref().map(|d| RunDir::create(d, cfg)).transpose()?;
        let rng = |s: Stream| ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, s));
        Ok(Trainer {
            cfg,
            strategy,
            env,
            eval_env,
            env_rng: rng(Stream::Env),
            agent_rng: rng(Stream::Agent),
            eval_rng: rng(Stream::Eval),
            reward_rng: rng(Stream::Reward),
            query_rng: rng(Stream::Query),
            wm_rng: rng(Stream::WorldModel),
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            reward_trainer: RewardTrainer::new(cfg.reward.clone(), &ensemble),
            ensemble,
            world_model,
            agent,
            counts: VisitCounts::new(),
            oracle,
            bridge: options.bridge,
            dataset: PreferenceDataset::new(),
            alphas: Vec::new(),
            dir,
            record: RunRecord {
                config: cfg.clone(),
                metrics: Vec::new(),
                wall_times: Vec::new(),
                sessions: Vec::new(),
                dataset_size: 0,
                queries_issued: 0,
                dynamics_losses: Vec::new(),
            },
            next_query: 0,
            episode: 0,
            started: Instant::now(),
        })
    }

    fn run(mut self) -> Result<RunRecord> {
        let cfg = self.cfg;
        let space = self.env.spec().action_space.clone();
        let n_actions = space.num_discrete().unwrap_or(0);
        let mut state = self.env.reset(&mut self.env_rng);
        let mut step_in_episode = 0usize;
        self.counts.visit(self.env.state_key(&state.observation));
        for step in 1..=cfg.total_steps {
            let a = if step <= cfg.random_steps {
                self.agent_rng.gen_range(0..n_actions)
            } else {
                let eps = cfg.agent.epsilon_at(step);
                self.agent.act(&state.observation, ActMode::Explore, eps, &mut self.agent_rng)?
            };
            let action = Action::Discrete(a);
            let out = self.env.step(&action)?;
            let encoding = space.encode(&action);
            let reward_label = if self.record.sessions.is_empty() {
                0.0
            } else {
                self.ensemble.ensemble_reward(&state.observation, &encoding)?
            };
            self.counts.visit(self.env.state_key(&out.state.observation));
            self.buffer.push(Transition {
                obs: state.observation.clone(),
                action,
                action_encoding: encoding,
                target_reward: out.target_reward,
                reward_label,
                next_obs: out.state.observation.clone(),
                terminal: out.terminal,
                episode: self.episode,
                step: step_in_episode,
            });
            step_in_episode += 1;
            state = out.state;
            if state.done {
                self.episode += 1;
                step_in_episode = 0;
                state = self.env.reset(&mut self.env_rng);
                self.counts.visit(self.env.state_key(&state.observation));
            }

            if self.buffer.len() >= cfg.agent.batch_size {
                self.agent_update(step)?;
            }
            if step == cfg.pretrain_steps() {
                if let Some(wm) = self.world_model.as_mut() {
                    wm.train_observation(&self.buffer, cfg.world_model.obs_steps, &mut self.wm_rng)?;
                    wm.freeze_observation();
                }
            }
            // Attention is only read at sessions, so the world model stops once they are over.
            let sessions_left = self.record.sessions.len() < cfg.session_count();
            if sessions_left && step >= cfg.pretrain_steps() && step % cfg.wm_interval == 0 {
                self.world_model_update()?;
            }
            if cfg.is_session_step(step, self.record.sessions.len()) {
                self.session(step)?;
            }
            if step % cfg.eval_interval == 0 {
                self.evaluate(step)?;
            }
        }
        self.record.dataset_size = self.dataset.len();
        if let Some(dir) = &self.dir {
            dir.write_json("record.json", &self.record)?;
        }
        Ok(self.record)
    }

    fn agent_update(&mut self, step: usize) -> Result<()> {
        let idx = self.buffer.sample_indices(&mut self.agent_rng, self.cfg.agent.batch_size);
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i)).collect();
        let rewards: Vec<f32> = if step <= self.cfg.pretrain_steps() {
            batch.iter().map(|t| self.counts.bonus(self.env.state_key(&t.next_obs))).collect()
        } else if self.cfg.method == Method::Reference {
            batch.iter().map(|t| t.target_reward).collect()
        } else {
            batch.iter().map(|t| t.reward_label).collect()
        };
        let td = TdBatch::from_transitions(&batch, rewards)?;
        self.agent.update(&td)?;
        Ok(())
    }

    fn world_model_update(&mut self) -> Result<()> {
        let Some(wm) = self.world_model.as_mut() else {
            return Ok(());
        };
        match wm.train_dynamics(&self.buffer, self.cfg.world_model.dyn_steps, self.cfg.segment_len, &mut self.wm_rng) {
            Ok(loss) => self.record.dynamics_losses.push(loss as f64),
            Err(Error::Data(msg)) => log::warn!("skipping world-model update: {msg}"),
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn importance(&self, segs: &[&Segment]) -> Result<Vec<Vec<f64>>> {
        match &self.world_model {
            Some(wm) => wm.extract_attention(segs)?.iter().map(importance_from_attention).collect(),
            None => Ok(segs.iter().map(|s| uniform_importance(s.len())).collect()),
        }
    }

    fn make_payload(&self, id: u64, a: &Segment, b: &Segment, alpha: [Vec<f64>; 2]) -> Result<QueryPayload> {
        let view = |s: &Segment| -> Result<SegmentView> {
            Ok(SegmentView {
                frames: s.states.iter().map(|o| self.env.frame_from_observation(o)).collect::<Result<_>>()?,
                actions: s.actions.clone(),
            })
        };
        Ok(QueryPayload {
            query_id: id,
            segments: [view(a)?, view(b)?],
            attention: alpha.map(|v| v.into_iter().map(|x| x as f32).collect()),
        })
    }

    fn session(&mut self, step: usize) -> Result<()> {
        let cfg = self.cfg;
        let index = self.record.sessions.len();
        let remaining = cfg.feedback_budget - self.record.queries_issued;
        let m = cfg.queries_per_session.min(remaining);
        let mut new_triplets = Vec::new();
        let mut issued = 0;

        if let Some(bridge) = self.bridge.clone().filter(|_| cfg.oracle == OracleKind::Human) {
            new_triplets.extend(self.collect_human(&bridge));
            let expired = bridge.expire_pending();
            if expired > 0 {
                log::info!("session {index}: {expired} unlabeled queries expired");
            }
        }

        let seed = self.query_rng.gen();
        let candidates = match sample_candidate_pairs(&self.buffer, cfg.candidate_factor * m, cfg.segment_len, seed) {
            Ok(c) => c,
            Err(Error::Data(msg)) => {
                log::warn!("session {index} at step {step}: {msg}");
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        if m > 0 && !candidates.is_empty() {
            let picks = select_queries(&candidates, &self.ensemble, m, &mut self.query_rng)?;
            issued = picks.len();
            let chosen: Vec<&(Segment, Segment)> = picks.iter().map(|&i| &candidates[i]).collect();
            match self.oracle.as_mut() {
                Some(oracle) => {
                    let labeler = oracle.spec().kind.labeler_name().to_string();
                    for (a, b) in chosen {
                        let label = oracle.label(a, b)?;
                        new_triplets.push(PreferenceTriplet {
                            query_id: self.next_query,
                            seg_a: a.clone(),
                            seg_b: b.clone(),
                            label,
                            labeler: labeler.clone(),
                            timestamp: now(),
                        });
                        self.next_query += 1;
                    }
                }
                None => {
                    let bridge = self.bridge.clone().expect("checked at start");
                    let mut queries = Vec::new();
                    for (a, b) in chosen {
                        let alpha = self.importance(&[a, b])?;
                        let payload = self.make_payload(self.next_query, a, b, [alpha[0].clone(), alpha[1].clone()])?;
                        queries.push(PendingQuery { payload, seg_a: a.clone(), seg_b: b.clone() });
                        self.next_query += 1;
                    }
                    bridge.publish(queries);
                    let deadline = Instant::now() + Duration::from_secs_f64(cfg.human_wait_secs.max(0.0));
                    while bridge.pending_count() > 0 && Instant::now() < deadline {
                        std::thread::sleep(Duration::from_millis(20));
                    }
                    new_triplets.extend(self.collect_human(&bridge));
                }
            }
        }
        self.record.queries_issued += issued;

        let labeled = new_triplets.len();
        for t in &new_triplets {
            self.dataset.push(t.clone())?;
        }
        if let Some(dir) = &self.dir {
            PreferenceDataset::append_jsonl(&dir.root.join("preferences.jsonl"), &new_triplets)?;
        }

        // Importance of every stored segment under the current world model.
        let needs_alpha = self.strategy.is_some_and(|s| s.kind.needs_attention());
        if needs_alpha {
            let segs: Vec<&Segment> = self.dataset.triplets().iter().flat_map(|t| [&t.seg_a, &t.seg_b]).collect();
            let alpha = self.importance(&segs)?;
            self.alphas = alpha.chunks(2).map(|c| [c[0].clone(), c[1].clone()]).collect();
        }

        let stats = match self.strategy {
            Some(strategy) if !self.dataset.is_empty() => {
                let pairs: Vec<TrainPair<'_>> = self
                    .dataset
                    .triplets()
                    .iter()
                    .enumerate()
                    .map(|(i, t)| TrainPair {
                        seg_a: &t.seg_a,
                        seg_b: &t.seg_b,
                        label: t.label,
                        alpha_a: self.alphas.get(i).map(|a| a[0].as_slice()),
                        alpha_b: self.alphas.get(i).map(|a| a[1].as_slice()),
                    })
                    .collect();
                let stats = self.reward_trainer.train_session(&mut self.ensemble, &pairs, &strategy, &mut self.reward_rng)?;
                relabel(&mut self.buffer, &self.ensemble)?;
                stats
            }
            _ => SessionStats::default(),
        };

        if let Some(dir) = &self.dir {
            dir.write_json(&format!("checkpoints/reward_session_{index:03}.json"), &self.ensemble)?;
            let start = self.dataset.len() - labeled;
            let entries: Vec<AttentionEntry<'_>> = self.dataset.triplets()[start..]
                .iter()
                .enumerate()
                .filter_map(|(k, t)| {
                    let a = self.alphas.get(start + k)?;
                    Some(AttentionEntry {
                        query_id: t.query_id,
                        source_episodes: [t.seg_a.source_episode, t.seg_b.source_episode],
                        start_indices: [t.seg_a.start_index, t.seg_b.start_index],
                        alpha: [&a[0], &a[1]],
                    })
                })
                .collect();
            dir.write_json(&format!("attention/session_{index:03}.json"), &AttentionDump { session: index, step, queries: entries })?;
        }

        let n = self.buffer.len().max(1) as f64;
        let label_mean = self.buffer.iter().map(|t| t.reward_label as f64).sum::<f64>() / n;
        let label_std = (self.buffer.iter().map(|t| (t.reward_label as f64 - label_mean).powi(2)).sum::<f64>() / n).sqrt();
        log::info!(
            "session {index} step {step}: {issued} queries, {labeled} labels, |D| = {}, ce {:.4}, aux {:.4}, reward {label_mean:.3} +- {label_std:.3}",
            self.dataset.len(),
            stats.ce,
            stats.aux
        );
        self.record.sessions.push(SessionRecord {
            index,
            step,
            queries: issued,
            labeled,
            dataset_size: self.dataset.len(),
            ce: stats.ce,
            aux: stats.aux,
            member_losses: stats.member_losses,
            flips: self.oracle.as_ref().map_or(0, |o| o.flips()),
            label_mean,
            label_std,
        });
        Ok(())
    }

    fn collect_human(&self, bridge: &HumanBridge) -> Vec<PreferenceTriplet> {
        bridge
            .drain()
            .into_iter()
            .map(|(q, label): (PendingQuery, Label)| PreferenceTriplet {
                query_id: q.payload.query_id,
                seg_a: q.seg_a,
                seg_b: q.seg_b,
                label,
                labeler: "human".into(),
                timestamp: now(),
            })
            .collect()
    }

    fn evaluate(&mut self, step: usize) -> Result<()> {
        let mut rows = Vec::with_capacity(self.cfg.eval_episodes);
        for episode in 0..self.cfg.eval_episodes {
            let mut s = self.eval_env.reset(&mut self.eval_rng);
            let mut ret = 0.0f64;
            while !s.done {
                let a = self.agent.act(&s.observation, ActMode::Greedy, 0.0, &mut self.eval_rng)?;
                let out = self.eval_env.step(&Action::Discrete(a))?;
                ret += out.target_reward as f64;
                s = out.state;
            }
            rows.push(MetricRow {
                step,
                episode,
                eval_return: ret,
                eval_success: self.eval_env.success() as u8,
                method: self.cfg.method.to_string(),
                seed: self.cfg.seed,
            });
        }
        let wall = self.started.elapsed().as_secs_f64();
        if let Some(dir) = &self.dir {
            dir.append_metrics(&rows)?;
        }
        self.record.wall_times.extend(std::iter::repeat(wall).take(rows.len()));
        self.record.metrics.extend(rows);
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
