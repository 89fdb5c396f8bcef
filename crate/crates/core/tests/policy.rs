use std::sync::Arc;

use alphaforge::centering::AverageTracker;
use alphaforge::env::FactorEnv;
use alphaforge::error::PolicyError;
use alphaforge::expr::{Grammar, TokenSequence};
use alphaforge::par::Exec;
use alphaforge::policy::{act, masked_softmax, sample_action, PolicyConfig, PolicyModel};
use alphaforge::ppo::{
    compute_advantages, grad_check, loss_and_grad, ppo_update, random_batch, rollout, Adam, Batch,
    PpoConfig, Step, Trajectory,
};
use alphaforge::shaping::Shaper;
use alphaforge::vocab::Vocabulary;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(dropout: f64) -> PolicyConfig {
    PolicyConfig {
        embed_dim: 6,
        hidden: 10,
        layers: 2,
        head_hidden: 8,
        dropout,
    }
}

#[test]
fn uniform_logits_sample_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = [0.0; 6];
    let mask = [true, false, true, true, false, true];
    let mut counts = [0usize; 6];
    for _ in 0..100_000 {
        counts[sample_action(&logits, &mask, &mut rng).unwrap().0] += 1;
    }
    for (a, &c) in counts.iter().enumerate() {
        let freq = c as f64 / 100_000.0;
        if mask[a] {
            assert!((freq - 0.25).abs() < 0.01, "action {a}: {freq}");
        } else {
            assert_eq!(c, 0);
        }
    }
}

#[test]
fn masked_actions_are_never_sampled() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = [50.0, 0.0, -3.0];
    let mask = [false, true, true];
    for _ in 0..1_000_000 {
        assert_ne!(sample_action(&logits, &mask, &mut rng).unwrap().0, 0);
    }
}

#[test]
fn act_on_a_forced_choice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = PolicyModel::new(small(0.1), 5, &mut rng);
    let mut state = model.initial_state();
    let mask = [false, false, false, true, false];
    let (a, lp, v) = act(&model, &mut state, model.begin_input(), &mask, &mut rng).unwrap();
    assert_eq!((a, lp), (3, 0.0));
    assert!(v.is_finite());
    let mut state = model.initial_state();
    assert_eq!(
        act(
            &model,
            &mut state,
            model.begin_input(),
            &[false; 5],
            &mut rng
        ),
        Err(PolicyError::AllMasked)
    );
}

proptest! {
    #[test]
    fn masked_softmax_is_a_distribution(
        logits in prop::collection::vec(-30.0f64..30.0, 1..40),
        bits in any::<u64>(),
    ) {
        let mut mask: Vec<bool> = (0..logits.len()).map(|i| bits >> (i % 64) & 1 == 1).collect();
        mask[0] = true;
        let p = masked_softmax(&logits, &mask).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (pi, m) in p.iter().zip(&mask) {
            if !m {
                prop_assert_eq!(*pi, 0.0);
            } else {
                prop_assert!(*pi > 0.0 || logits.iter().cloned().fold(f64::MIN, f64::max) > 0.0);
            }
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = PolicyModel::new(
        PolicyConfig {
            dropout: 0.0,
            ..PolicyConfig::default()
        },
        53,
        &mut rng,
    );
    let batch = random_batch(&model, 3, 8, &mut rng);
    let err = grad_check(&model, &batch, &PpoConfig::default(), 1e-5, 200, &mut rng).unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn gradient_is_thread_count_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = PolicyModel::new(small(0.0), 9, &mut rng);
    let batch = random_batch(&model, 21, 10, &mut rng);
    let cfg = PpoConfig::default();
    let (a, ga) = loss_and_grad(&model, &batch, &cfg, Exec::Sequential).unwrap();
    let (b, gb) = loss_and_grad(&model, &batch, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn inactive_clip_equals_plain_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = PolicyModel::new(small(0.0), 7, &mut rng);
    let mut batch = random_batch(&model, 5, 6, &mut rng);
    // behavior probabilities equal to the current ones: every ratio is 1
    for e in &mut batch.episodes {
        let fwd = model.forward_episode::<ChaCha8Rng>(&e.inputs(&model), None);
        for (t, s) in e.steps.iter_mut().enumerate() {
            s.logp = masked_softmax(&fwd.logits[t], &s.mask).unwrap()[s.action].ln();
        }
    }
    let clipped = PpoConfig::default();
    let unclipped = PpoConfig {
        clip: 1e9,
        ..PpoConfig::default()
    };
    let (la, ga) = loss_and_grad(&model, &batch, &clipped, Exec::Sequential).unwrap();
    let (lb, gb) = loss_and_grad(&model, &batch, &unclipped, Exec::Sequential).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}

fn bandit_batch(model: &PolicyModel, episodes: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mask = vec![true, true];
    let mut out = Vec::new();
    for _ in 0..episodes {
        let mut state = model.initial_state();
        let (action, logp, value) =
            act(model, &mut state, model.begin_input(), &mask, rng).unwrap();
        let reward = if action == 0 { 1.0 } else { 0.0 };
        let mut traj = Trajectory {
            steps: vec![Step {
                action,
                mask: mask.clone(),
                logp,
                value,
                base_reward: reward,
                shaped_reward: reward,
                r_bar: 0.0,
                advantage: 0.0,
                ret: 0.0,
            }],
        };
        compute_advantages(&mut traj, 1.0, 0.95);
        assert_eq!(traj.steps[0].advantage, reward - value);
        out.push(traj);
    }
    Batch { episodes: out }
}

#[test]
fn bandit_learns_the_better_arm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = PolicyModel::new(small(0.0), 2, &mut rng);
    let cfg = PpoConfig {
        lr: 3e-3,
        epochs: 1,
        minibatch_steps: 64,
        ..PpoConfig::default()
    };
    let mut adam = Adam::new(model.n_params(), cfg.lr);
    for _ in 0..200 {
        let batch = bandit_batch(&model, 64, &mut rng);
        ppo_update(
            &mut model,
            &mut adam,
            &batch,
            &cfg,
            Exec::Sequential,
            &mut rng,
        )
        .unwrap();
    }
    let (logits, _) = model.step(&mut model.initial_state(), model.begin_input());
    let p = masked_softmax(&logits, &[true, true]).unwrap();
    assert!(p[0] > 0.99, "{p:?}");
}

#[test]
fn zero_advantages_leave_the_policy_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = PolicyModel::new(small(0.0), 6, &mut rng);
    let mut batch = random_batch(&model, 4, 5, &mut rng);
    for e in &mut batch.episodes {
        for s in &mut e.steps {
            s.advantage = 0.0;
        }
    }
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        value_coef: 0.0,
        ..PpoConfig::default()
    };
    let (_, g) = loss_and_grad(&model, &batch, &cfg, Exec::Sequential).unwrap();
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn non_finite_update_keeps_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = PolicyModel::new(small(0.0), 6, &mut rng);
    let mut batch = random_batch(&model, 4, 5, &mut rng);
    batch.episodes[1].steps[0].ret = f64::NAN;
    let before = model.clone();
    let mut adam = Adam::new(model.n_params(), 1e-3);
    let adam_before = adam.clone();
    let err = ppo_update(
        &mut model,
        &mut adam,
        &batch,
        &PpoConfig::default(),
        Exec::Sequential,
        &mut rng,
    );
    assert_eq!(err, Err(PolicyError::NonFiniteGradient));
    assert_eq!(model, before);
    assert_eq!(adam, adam_before);
}

fn fingerprint(seed: u64) -> (usize, f64, f64, Vec<Vec<usize>>) {
    let vocab = Arc::new(Vocabulary::default());
    let grammar = Arc::new(Grammar::new(vocab.clone(), 12));
    let mut env = FactorEnv::new(grammar, |s: &TokenSequence| s.len() as f64 / 12.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PolicyModel::new(small(0.1), vocab.len(), &mut rng);
    let mut tracker = AverageTracker::default();
    let batch = rollout(
        &model,
        &mut env,
        &Shaper::None,
        Some(&mut tracker),
        300,
        &PpoConfig::default(),
        &mut rng,
    )
    .unwrap();
    let actions = batch
        .episodes
        .iter()
        .map(|e| e.steps.iter().map(|s| s.action).collect())
        .collect();
    (
        batch.episodes.len(),
        batch.mean_length(),
        tracker.mean,
        actions,
    )
}

#[test]
fn rollouts_are_reproducible() {
    let a = fingerprint(10);
    assert_eq!(a, fingerprint(10));
    assert_ne!(a.3, fingerprint(11).3);
    assert!(a.1 >= 1.0 && a.1 <= 12.0);
    let total: usize = a.3.iter().map(|e| e.len()).sum();
    assert!(total >= 300);
    // the tracker only ever sees values in the reward range
    assert!(a.2 > 0.0 && a.2 <= 1.0);
}

#[test]
fn dropout_changes_updates_but_not_rollouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = PolicyModel::new(small(0.5), 6, &mut rng);
    let inputs = [6, 1, 2];
    let a = model.forward_episode::<ChaCha8Rng>(&inputs, None);
    let b = model.forward_episode::<ChaCha8Rng>(&inputs, None);
    assert_eq!(a.logits, b.logits);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let c = model.forward_episode(&inputs, Some(&mut r));
    assert_ne!(a.logits, c.logits);
    let _ = rng.gen::<u8>();
}
