use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ReplayBuffer, Segment};
use crate::error::{Error, Result};
use crate::reward::RewardEnsemble;

/// Draws `count` pairs of distinct length-`l` segments uniformly from the
/// buffer's valid windows.
pub fn sample_candidate_pairs(buffer: &ReplayBuffer, count: usize, l: usize, seed: u64) -> Result<Vec<(Segment, Segment)>> {
    let starts = buffer.segment_starts(l);
    if count > 0 && starts.len() < 2 {
        return Err(Error::Data(format!(
            "need two distinct segments of length {l}, buffer of {} transitions has {}",
            buffer.len(),
            starts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let pick = sample(&mut rng, starts.len(), 2);
            Ok((buffer.segment(starts[pick.index(0)], l)?, buffer.segment(starts[pick.index(1)], l)?))
        })
        .collect()
}

/// Population variance of `P[a > b]` across ensemble members, per pair.
pub fn disagreement(ensemble: &RewardEnsemble, pairs: &[(Segment, Segment)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(a, b)| {
            let ps = ensemble.member_probabilities(a, b)?;
            let mean = ps.iter().sum::<f64>() / ps.len() as f64;
            Ok(ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / ps.len() as f64)
        })
        .collect()
}

/// Indices of the `m` most contested pairs, most contested first; ties keep
/// candidate order. Ensembles with fewer than two members select uniformly
/// at random.
pub fn select_queries<R: Rng>(
    pairs: &[(Segment, Segment)],
    ensemble: &RewardEnsemble,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m > pairs.len() {
        return Err(Error::Data(format!("cannot select {m} queries from {} candidates", pairs.len())));
    }
    if ensemble.len() < 2 {
        log::info!("ensemble of {} member(s): selecting queries uniformly at random", ensemble.len());
        return Ok(sample(rng, pairs.len(), m).into_vec());
    }
    let var = disagreement(ensemble, pairs)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| var[j].total_cmp(&var[i]).then(i.cmp(&j)));
    order.truncate(m);
    Ok(order)
}

/// Rewrites every stored reward label with the mean ensemble reward.
pub fn relabel(buffer: &mut ReplayBuffer, ensemble: &RewardEnsemble) -> Result<()> {
    if buffer.is_empty() {
        return Ok(());
    }
    let mut inputs = Vec::new();
    for t in buffer.iter() {
        inputs.extend_from_slice(&t.obs);
        inputs.extend_from_slice(&t.action_encoding);
    }
    let r = ensemble.mean_rewards(&inputs)?;
    for (t, r) in buffer.iter_mut().zip(r) {
        t.reward_label = r;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::buffer::toy_episode;
    use crate::diffcore::Module;
    use crate::reward::{RewardConfig, RewardMember};

    fn constant_ensemble(outputs: &[f32]) -> RewardEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let members = outputs
            .iter()
            .map(|&o| {
                let mut m = RewardMember::<f32>::new(2, 2, &[3], &mut rng);
                let last = m.mlp.layers.last().unwrap().clone();
                last.zero(m.params_mut());
                m.params_mut().get_mut(last.bias).data_mut()[0] = o.atanh();
                m
            })
            .collect();
        RewardEnsemble { members }
    }

    #[test]
    fn single_segment_buffer_is_insufficient() {
        let mut b = ReplayBuffer::new(100);
        toy_episode(&mut b, 0, 5, None);
        assert!(matches!(sample_candidate_pairs(&b, 1, 5, 0), Err(Error::Data(_))));
        assert!(sample_candidate_pairs(&b, 0, 5, 0).unwrap().is_empty());
    }

    #[test]
    fn candidates_come_from_valid_offsets_and_are_seeded() {
        let mut b = ReplayBuffer::new(100);
        toy_episode(&mut b, 0, 8, None);
        let pairs = sample_candidate_pairs(&b, 200, 4, 7).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (a, c) in &pairs {
            assert_ne!(a.start_index, c.start_index);
            seen.insert(a.start_index);
            seen.insert(c.start_index);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(pairs, sample_candidate_pairs(&b, 200, 4, 7).unwrap());
    }

    #[test]
    fn identical_members_select_by_index() {
        let mut b = ReplayBuffer::new(100);
        toy_episode(&mut b, 0, 10, None);
        let pairs = sample_candidate_pairs(&b, 6, 3, 1).unwrap();
        let ens = constant_ensemble(&[0.3, 0.3, 0.3]);
        let pick = select_queries(&pairs, &ens, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pick, vec![0, 1, 2, 3]);
    }

    #[test]
    fn relabel_is_mean_and_idempotent() {
        let mut b = ReplayBuffer::new(100);
        toy_episode(&mut b, 0, 6, None);
        relabel(&mut b, &constant_ensemble(&[0.0])).unwrap();
        assert!(b.iter().all(|t| t.reward_label == 0.0));
        let ens = RewardEnsemble::new(&RewardConfig { hidden: vec![4], ..Default::default() }, 2, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        relabel(&mut b, &ens).unwrap();
        let once: Vec<_> = b.iter().cloned().collect();
        relabel(&mut b, &ens).unwrap();
        assert_eq!(once, b.iter().cloned().collect::<Vec<_>>());
        let t = b.get(2);
        let expect = ens.ensemble_reward(&t.obs, &t.action_encoding).unwrap();
        assert!((t.reward_label - expect).abs() < 1e-6);
    }
}
