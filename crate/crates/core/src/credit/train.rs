use rand::seq::SliceRandom;
use rand::Rng;

use super::{combined_forward, CreditStrategy, TrainPair};
use crate::diffcore::{forward_backward, AdamConfig, AdamState, Module};
use crate::error::Result;
use crate::reward::{RewardConfig, RewardEnsemble};

/// Losses of one feedback session's reward training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionStats {
    /// Mean total loss over each member's final epoch.
    pub member_losses: Vec<f64>,
    /// Mean cross-entropy over the final epoch, averaged over members.
    pub ce: f64,
    /// Mean auxiliary loss over the final epoch, averaged over members.
    pub aux: f64,
}

/// Optimiser state for every ensemble member, kept across sessions.
#[derive(Clone, Debug)]
pub struct RewardTrainer {
    pub config: RewardConfig,
    opts: Vec<AdamState<f32>>,
}

impl RewardTrainer {
    pub fn new(config: RewardConfig, ensemble: &RewardEnsemble) -> Self {
        let opts = ensemble.members.iter().map(|m| AdamState::new(m.params(), AdamConfig::with_lr(config.lr))).collect();
        RewardTrainer { config, opts }
    }

    /// Trains every member for `epochs` passes over `pairs` on the combined
    /// objective, shuffling independently per member.
    pub fn train_session<R: Rng>(
        &mut self,
        ensemble: &mut RewardEnsemble,
        pairs: &[TrainPair<'_>],
        strategy: &CreditStrategy,
        rng: &mut R,
    ) -> Result<SessionStats> {
        let mut stats = SessionStats::default();
        if pairs.is_empty() {
            return Ok(stats);
        }
        let bs = self.config.batch_size.max(1);
        let epochs = self.config.epochs.max(1);
        for (member, opt) in ensemble.members.iter_mut().zip(self.opts.iter_mut()) {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            let (mut total, mut ce, mut aux, mut batches) = (0.0, 0.0, 0.0, 0usize);
            for epoch in 0..epochs {
                order.shuffle(rng);
                let last = epoch + 1 == epochs;
                for chunk in order.chunks(bs) {
                    let batch: Vec<TrainPair<'_>> = chunk.iter().map(|&i| pairs[i]).collect();
                    let seed = rng.gen();
                    let m = &*member;
                    let mut parts = None;
                    let (loss, grads) = forward_backward(m, |g, p| {
                        let (loss, lp) = combined_forward(g, p, m, &batch, strategy, self.config.discount, seed)?;
                        parts = Some(lp);
                        Ok(loss)
                    })?;
                    opt.step(member.params_mut(), &grads)?;
                    if last {
                        let lp = parts.unwrap_or_default();
                        total += loss as f64;
                        ce += lp.ce;
                        aux += lp.aux;
                        batches += 1;
                    }
                }
            }
            let b = batches.max(1) as f64;
            stats.member_losses.push(total / b);
            stats.ce += ce / b;
            stats.aux += aux / b;
        }
        let e = ensemble.len() as f64;
        stats.ce /= e;
        stats.aux /= e;
        Ok(stats)
    }
}
