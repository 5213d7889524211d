use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hindsight_prior::credit::{importance_from_attention, nrp_weights, reward_targets, CreditKind};
use hindsight_prior::data::{relabel, select_queries, ReplayBuffer, Segment, Transition};
use hindsight_prior::envs::Action;
use hindsight_prior::reward::{bradley_terry, RewardConfig, RewardEnsemble};
use hindsight_prior::worldmodel::AttentionMap;

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn segment(seed: u64, l: usize) -> Segment {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Segment {
        states: (0..l).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        actions: (0..l).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect(),
        target_rewards: vec![0.0; l],
        source_episode: seed,
        start_index: 0,
    }
}

fn ensemble(seed: u64, members: usize) -> RewardEnsemble {
    let cfg = RewardConfig { ensemble_size: members, hidden: vec![6], ..Default::default() };
    RewardEnsemble::new(&cfg, 3, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #[test]
    fn redistribution_conserves_the_predicted_return(
        raw in prop::collection::vec(0.01f64..10.0, 1..80),
        g_hat in -100.0f64..100.0,
    ) {
        let alpha = simplex(raw);
        let t = alpha.len();
        for kind in [CreditKind::Prior, CreditKind::Rvar, CreditKind::Nrp] {
            let targets = reward_targets(kind, &alpha, g_hat, t).unwrap();
            prop_assert_eq!(targets.len(), t);
            prop_assert!((targets.iter().sum::<f64>() - g_hat).abs() <= 1e-9 * (1.0 + g_hat.abs()));
        }
        let w = nrp_weights(&alpha);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn importance_is_a_distribution(layers in 1usize..5, t in 1usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = AttentionMap { layers: (0..layers).map(|_| simplex((0..2 * t).map(|_| rng.gen_range(0.0..1.0) + 1e-6).collect())).collect() };
        let alpha = importance_from_attention(&map).unwrap();
        prop_assert_eq!(alpha.len(), t);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        assert_abs_diff_eq!(alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bradley_terry_is_antisymmetric(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        let p = bradley_terry(a, b);
        prop_assert!((0.0..=1.0).contains(&p));
        assert_abs_diff_eq!(p + bradley_terry(b, a), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn query_selection_is_stable_under_shuffling(seed in any::<u64>(), n in 2usize..12, m_frac in 0.0f64..1.0) {
        use rand::seq::SliceRandom;
        let ens = ensemble(seed, 3);
        let pairs: Vec<(Segment, Segment)> = (0..n as u64).map(|i| (segment(seed ^ (2 * i), 5), segment(seed ^ (2 * i + 1), 5))).collect();
        let m = ((n as f64 * m_frac) as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen = select_queries(&pairs, &ens, m, &mut rng).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<(Segment, Segment)> = order.iter().map(|&i| pairs[i].clone()).collect();
        let again: Vec<usize> = select_queries(&shuffled, &ens, m, &mut rng).unwrap().into_iter().map(|i| order[i]).collect();
        // Distinct random pairs have distinct disagreements, so no tie groups.
        prop_assert_eq!(chosen, again);
    }

    #[test]
    fn relabel_is_idempotent(seed in any::<u64>(), n in 1usize..30) {
        let ens = ensemble(seed, 2);
        let mut buffer = ReplayBuffer::new(64);
        for (i, s) in (0..n).map(|i| (i, segment(seed.wrapping_add(i as u64), 1))) {
            buffer.push(Transition {
                obs: s.states[0].clone(),
                action: Action::Continuous(s.actions[0].clone()),
                action_encoding: s.actions[0].clone(),
                target_reward: 0.0,
                reward_label: f32::NAN,
                next_obs: s.states[0].clone(),
                terminal: false,
                episode: 0,
                step: i,
            });
        }
        relabel(&mut buffer, &ens).unwrap();
        let once: Vec<u32> = buffer.iter().map(|t| t.reward_label.to_bits()).collect();
        relabel(&mut buffer, &ens).unwrap();
        let twice: Vec<u32> = buffer.iter().map(|t| t.reward_label.to_bits()).collect();
        prop_assert_eq!(buffer.len(), n);
        prop_assert!(once.iter().all(|&b| f32::from_bits(b).abs() <= 1.0));
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn identical_members_fall_back_to_candidate_order() {
    let one = ensemble(5, 1);
    let same = RewardEnsemble { members: vec![one.members[0].clone(); 3] };
    let pairs: Vec<(Segment, Segment)> = (0..6).map(|i| (segment(i, 4), segment(100 + i, 4))).collect();
    let chosen = select_queries(&pairs, &same, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(chosen, vec![0, 1, 2, 3]);
}
