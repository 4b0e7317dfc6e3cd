mod common;

use common::*;
use expo_core::objectives::{
    dpo_loss_and_grad, group_advantages, grpo_loss_and_grad, kl_penalty, optimizer_step, sample_preference_pairs,
    sft_loss_and_grad, DpoItem, GroupRollout, GrpoConfig, OptimizerConfig, OptimizerState, RatioMode, SftBatch,
};
use expo_core::policy::{sample_response, sequence_log_prob, token_log_probs, Gradient, PolicyParams, Snapshot, TokenLayout};
use expo_core::rng;
use expo_core::task::{parse_response, render_target, Attack, TaskKind, TaskVocab};
use expo_core::{Error, Params};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn zero_params(tv: &TaskVocab) -> Params {
    PolicyParams::zeros(Default::default(), TokenLayout::of(tv.vocab())).unwrap()
}

#[test]
fn uniform_policy_sft_loss_is_length_times_log_v() {
    let tv = TaskVocab::standard();
    let snap = Snapshot::new(zero_params(&tv));
    let v = tv.vocab().len() as f64;
    for (x, y) in sft_batch(&tv).items {
        let (loss, _) = sft_loss_and_grad(&snap, &SftBatch::new(vec![(x, y.clone())])).unwrap();
        assert!((loss - y.len() as f64 * v.ln()).abs() < 1e-9);
    }
}

#[test]
fn duplicating_an_example_keeps_the_mean_loss() {
    let tv = TaskVocab::standard();
    let snap = Snapshot::new(standard_params(&tv, 0.3, 1));
    let b = sft_batch(&tv);
    let (l1, _) = sft_loss_and_grad(&snap, &SftBatch::new(vec![b.items[0].clone()])).unwrap();
    let (l2, _) = sft_loss_and_grad(&snap, &SftBatch::new(vec![b.items[0].clone(), b.items[0].clone()])).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
}

#[test]
fn dpo_loss_at_reference_is_ln2() {
    let tv = TaskVocab::standard();
    for seed in 0..5 {
        let reference = Snapshot::new(standard_params(&tv, 0.3, seed));
        let pairs = dpo_pairs(&tv, &reference);
        let (loss, _) = dpo_loss_and_grad(&reference, &pairs, &dpo_cfg()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "{loss}");
    }
}

#[test]
fn dpo_loss_falls_as_chosen_likelihood_rises() {
    let tv = TaskVocab::standard();
    let reference = Snapshot::new(standard_params(&tv, 0.3, 3));
    let mut pairs = dpo_pairs(&tv, &reference);
    pairs.truncate(1);
    let cfg = dpo_cfg();
    let (base, _) = dpo_loss_and_grad(&reference, &pairs, &cfg).unwrap();
    // lowering the cached reference log-prob of y+ is the same as raising log π(y+)
    let mut shifted = pairs.clone();
    shifted[0].ref_chosen -= 0.5;
    let (lower, _) = dpo_loss_and_grad(&reference, &shifted, &cfg).unwrap();
    assert!(lower < base);
}

#[test]
fn grpo_loss_vanishes_when_all_snapshots_coincide() {
    let tv = TaskVocab::standard();
    for mode in [RatioMode::PerToken, RatioMode::PerSequence] {
        let snap = Snapshot::new(standard_params(&tv, 0.3, 4));
        let cfg = GrpoConfig { ratio_mode: mode, ..GrpoConfig::default() };
        let groups = grpo_groups(&tv, &snap, &cfg);
        let (loss, _) = grpo_loss_and_grad(&snap, &snap, &snap, &groups, &cfg).unwrap();
        assert!(loss.abs() < 1e-9, "{mode:?}: {loss}");
    }
}

#[test]
fn grpo_rejects_stale_rollouts() {
    let tv = TaskVocab::standard();
    let old = Snapshot::new(standard_params(&tv, 0.3, 4));
    let other = Snapshot::new(standard_params(&tv, 0.3, 5));
    let cfg = GrpoConfig::default();
    let groups = grpo_groups(&tv, &old, &cfg);
    let err = grpo_loss_and_grad(&old, &other, &old, &groups, &cfg).unwrap_err();
    assert!(matches!(err, Error::Staleness { .. }));
}

#[test]
fn grpo_is_invariant_to_response_order() {
    let tv = TaskVocab::standard();
    let old = Snapshot::new(standard_params(&tv, 0.3, 6));
    let theta = Snapshot::new(perturbed(old.params(), 0.01, 6));
    let reference = Snapshot::new(perturbed(old.params(), 0.01, 7));
    let cfg = GrpoConfig::default();
    let groups = grpo_groups(&tv, &old, &cfg);
    let mut rev = groups.clone();
    for g in &mut rev {
        g.responses.reverse();
        g.rewards.reverse();
        g.advantages.reverse();
    }
    let (a, ga) = grpo_loss_and_grad(&theta, &old, &reference, &groups, &cfg).unwrap();
    let (b, gb) = grpo_loss_and_grad(&theta, &old, &reference, &rev, &cfg).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(ga.data.iter().zip(&gb.data).all(|(x, y)| (x - y).abs() < 1e-12));
}

/// A hidden unit pinned at tanh = 1 turns its output row into a bias; lowering
/// that bias for the response tokens in θ_old pushes every per-token ratio far
/// above 1 + ε.
#[test]
fn saturated_positive_response_contributes_nothing_per_token() {
    let tv = TaskVocab::standard();
    let mut theta = standard_params(&tv, 0.1, 8);
    theta.b1_mut()[0] = 50.0;
    let y1 = render_target(&[], &[tv.attack_label(Attack::Slurs)], TaskKind::Attack, &tv).unwrap();
    let y2 = render_target(&[], &[tv.benign], TaskKind::Attack, &tv).unwrap();
    let mut old = theta.clone();
    for t in &y1 {
        old.w2_mut()[t.idx()] -= 3.0;
    }
    let (theta, old) = (Snapshot::new(theta), Snapshot::new(old));
    let x = plain_prompt(&tv, TaskKind::Attack, &[tv.attack_cue(Attack::Slurs)]);
    let cfg = GrpoConfig { kl_beta: 0.0, ..GrpoConfig::default() };
    let lp = token_log_probs(&theta, &x, &y1).unwrap();
    let lo = token_log_probs(&old, &x, &y1).unwrap();
    assert!(lp.iter().zip(&lo).all(|(a, b)| (a - b).exp() > 1.0 + cfg.clip_eps));
    let group = |a1: f64| GroupRollout {
        x: x.clone(),
        responses: vec![y1.clone(), y2.clone()],
        rewards: vec![0.0, 0.0],
        advantages: vec![a1, -1.0],
        snapshot: old.id(),
    };
    let (_, with) = grpo_loss_and_grad(&theta, &old, &theta, &[group(1.0)], &cfg).unwrap();
    let (_, without) = grpo_loss_and_grad(&theta, &old, &theta, &[group(0.0)], &cfg).unwrap();
    assert!(!with.is_zero());
    assert!(with.data.iter().zip(&without.data).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn kl_is_exactly_zero_at_reference_and_non_negative_elsewhere() {
    let tv = TaskVocab::standard();
    let snap = Snapshot::new(standard_params(&tv, 0.3, 2));
    for (x, y) in sft_batch(&tv).items {
        let (v, g) = kl_penalty(&snap, &snap, &x, &y).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.is_zero());
    }
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let tiny_x = ids(&[1, 2]);
    for trial in 0..1000u64 {
        let a = Snapshot::new(tiny_params(trial, 0.8));
        let b = Snapshot::new(tiny_params(trial + 10_000, 0.8));
        let y = sample_response(&a, &tiny_x, 1.0, 3, &mut r).unwrap();
        let (v, _) = kl_penalty(&a, &b, &tiny_x, &y).unwrap();
        assert!(v >= 0.0, "trial {trial}: {v}");
    }
}

/// Sum over tokens of the k3 estimate, averaged over sampled sequences, against
/// `Σ_y π(y) ln(π(y) / π_ref(y))` by enumeration.
#[test]
fn kl_estimate_matches_enumerated_sequence_kl() {
    let theta = Snapshot::new(tiny_params(31, 0.5));
    let reference = Snapshot::new(tiny_params(32, 0.5));
    let x = ids(&[1, 2]);
    let to_y = |e: &Vec<expo_core::vocab::TokenId>| {
        let mut y = e.clone();
        if y.len() < 3 {
            y.push(TINY_CLOSE);
        }
        y
    };
    let mut exact = 0.0;
    let mut expected_k3 = 0.0;
    for (e, p) in tiny_explanations(theta.params(), &x, 3) {
        let y = to_y(&e);
        exact += p * (sequence_log_prob(&theta, &x, &y).unwrap() - sequence_log_prob(&reference, &x, &y).unwrap());
        expected_k3 += p * kl_penalty(&theta, &reference, &x, &y).unwrap().0 * y.len() as f64;
    }
    // the summed k3 estimate is unbiased for the sequence KL
    assert!((expected_k3 - exact).abs() < 1e-12);
    let mut r = rng::stream(5, "kl-mc", &[]);
    let n = 20_000;
    let mut total = 0.0;
    for _ in 0..n {
        let y = sample_response(&theta, &x, 1.0, 3, &mut r).unwrap();
        let (v, _) = kl_penalty(&theta, &reference, &x, &y).unwrap();
        total += v * y.len() as f64;
    }
    let mc = total / n as f64;
    assert!(exact > 0.1, "policies too close for a meaningful check: {exact}");
    assert!((mc - exact).abs() < 0.01, "mc {mc} vs exact {exact}");
}

#[test]
fn advantages_examples() {
    let cfg = GrpoConfig::default();
    assert_eq!(group_advantages(&[1.0, 1.0, 1.0, 1.0], &cfg).unwrap(), vec![0.0; 4]);
    assert_eq!(group_advantages(&[0.0, 2.0], &cfg).unwrap(), vec![-1.0, 1.0]);
    assert!(group_advantages(&[1.0], &cfg).is_err());
}

proptest! {
    #[test]
    fn advantages_are_standardised(rewards in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let a = group_advantages(&rewards, &GrpoConfig::default()).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-9 {
            let std = (a.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
            prop_assert!((std - 1.0).abs() < 1e-6);
        } else {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tied_groups_have_zero_advantages(r in -10.0f64..10.0, g in 2usize..12) {
        prop_assert!(group_advantages(&vec![r; g], &GrpoConfig::default()).unwrap().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let tv = TaskVocab::standard();
    let mut p = zero_params(&tv);
    p.as_mut_slice()[0] = 1.0;
    let mut g = Gradient::zeros_like(&p);
    g.data[0] = 2.0; // d/dw w² at w = 1
    let mut state = OptimizerState::new(OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() }, &p).unwrap();
    optimizer_step(&mut p, &g, &mut state).unwrap();
    assert!((p.as_slice()[0] - 0.9).abs() < 1e-6);
    assert!(p.as_slice()[1..].iter().all(|&v| v == 0.0));
}

#[test]
fn optimizer_fixed_point_and_determinism() {
    let tv = TaskVocab::standard();
    let p0 = standard_params(&tv, 0.08, 1);
    let mut p = p0.clone();
    let mut state = OptimizerState::new(OptimizerConfig::default(), &p).unwrap();
    optimizer_step(&mut p, &Gradient::zeros_like(&p0), &mut state).unwrap();
    assert_eq!(p, p0);

    let (_, g) = sft_loss_and_grad(&Snapshot::new(p0.clone()), &sft_batch(&tv)).unwrap();
    let run = || {
        let mut q = p0.clone();
        let mut s = OptimizerState::new(OptimizerConfig::default(), &q).unwrap();
        optimizer_step(&mut q, &g, &mut s).unwrap();
        q
    };
    assert_eq!(run(), run());

    let mut bad = g.clone();
    bad.data[3] = f64::NAN;
    let mut q = p0.clone();
    let mut s = OptimizerState::new(OptimizerConfig::default(), &q).unwrap();
    assert!(optimizer_step(&mut q, &bad, &mut s).is_err());
}

/// Briefly fits one prompt so that sampled decisions are a mix of right and wrong.
fn mixed_reference(tv: &TaskVocab, x: &[expo_core::vocab::TokenId], y: &[expo_core::vocab::TokenId]) -> Snapshot<f64> {
    let mut p = standard_params(tv, 0.08, 3);
    let mut s = OptimizerState::new(OptimizerConfig { lr: 1e-2, ..OptimizerConfig::default() }, &p).unwrap();
    let batch = SftBatch::new(vec![(x.to_vec(), y.to_vec())]);
    for _ in 0..12 {
        let (_, g) = sft_loss_and_grad(&Snapshot::new(p.clone()), &batch).unwrap();
        optimizer_step(&mut p, &g, &mut s).unwrap();
    }
    Snapshot::new(p)
}

#[test]
fn preference_pairs_follow_the_pool_composition() {
    let tv = TaskVocab::standard();
    let gold = vec![tv.attack_label(Attack::Mocking)];
    let x = plain_prompt(&tv, TaskKind::Attack, &[tv.attack_cue(Attack::Mocking)]);
    let y = render_target(&[], &gold, TaskKind::Attack, &tv).unwrap();
    let reference = mixed_reference(&tv, &x, &y);
    let cfg = dpo_cfg();
    let items: Vec<DpoItem> =
        (0..60).map(|id| DpoItem { id, x: x.clone(), task: TaskKind::Attack, gold: gold.clone() }).collect();
    let (pairs, stats) = sample_preference_pairs(&reference, &items, &cfg, &tv, &mut rng::stream(1, "t", &[])).unwrap();

    // replay the per-item streams to count chosen and rejected samples
    let base: u64 = rng::stream(1, "t", &[]).random();
    let mut expected = 0;
    let mut skipped = 0;
    let mut seen_one_of_four = false;
    for item in &items {
        let mut r = rng::stream(base, "dpo-pairs", &[item.id]);
        let mut good = 0;
        for _ in 0..2 * cfg.pairs_per_example {
            let y = sample_response(&reference, &x, cfg.temperature, cfg.max_response_len, &mut r).unwrap();
            if matches!(parse_response(&y, TaskKind::Attack, &tv), Ok(p) if p.labels == gold) {
                good += 1;
            }
        }
        let bad = 2 * cfg.pairs_per_example - good;
        let n = good.min(bad).min(cfg.pairs_per_example);
        if good == 1 && bad == 3 {
            seen_one_of_four = true;
            assert_eq!(n, 1);
        }
        expected += n;
        skipped += usize::from(n == 0);
    }
    assert!(seen_one_of_four, "no item drew exactly one correct response");
    assert_eq!(pairs.len(), expected);
    assert_eq!(stats.pairs, expected);
    assert_eq!(stats.skipped, skipped);
    for p in &pairs {
        assert_eq!(parse_response(&p.chosen, TaskKind::Attack, &tv).unwrap().labels, gold);
        assert!(!matches!(parse_response(&p.rejected, TaskKind::Attack, &tv), Ok(q) if q.labels == gold));
        assert!((p.ref_chosen - sequence_log_prob(&reference, &p.x, &p.chosen).unwrap()).abs() < 1e-12);
    }

    let (again, _) = sample_preference_pairs(&reference, &items, &cfg, &tv, &mut rng::stream(1, "t", &[])).unwrap();
    assert_eq!(again, pairs);
}

#[test]
fn untrained_reference_yields_no_pairs() {
    let tv = TaskVocab::standard();
    let reference = Snapshot::new(zero_params(&tv));
    let gold = vec![tv.yes];
    let items: Vec<DpoItem> = (0..5)
        .map(|id| DpoItem { id, x: plain_prompt(&tv, TaskKind::Binary, &[]), task: TaskKind::Binary, gold: gold.clone() })
        .collect();
    let (pairs, stats) = sample_preference_pairs(&reference, &items, &dpo_cfg(), &tv, &mut rng::stream(2, "t", &[])).unwrap();
    assert!(pairs.is_empty());
    assert_eq!(stats.skipped, 5);
}
