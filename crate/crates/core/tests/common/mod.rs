//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use expo_core::objectives::{group_advantages, DpoConfig, GroupRollout, GrpoConfig, PreferencePair, SftBatch};
use expo_core::policy::{sequence_log_prob, PolicyConfig, PolicyParams, Snapshot, TokenLayout};
use expo_core::rng;
use expo_core::task::{gold_explanation, render_target, Attack, LatentMeme, Target, TaskKind, TaskVocab};
use expo_core::vocab::TokenId;
use expo_core::Params;
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn ids(v: &[u16]) -> Vec<TokenId> {
    v.iter().map(|&i| TokenId(i)).collect()
}

/// Standard-vocabulary policy with a wider init so gradients are not tiny.
pub fn standard_params(tv: &TaskVocab, init_scale: f64, seed: u64) -> Params {
    let cfg = PolicyConfig { init_scale, seed, ..PolicyConfig::default() };
    PolicyParams::for_vocab(cfg, tv.vocab()).unwrap()
}

/// `p + scale·u` with `u` uniform in [-1, 1], from its own stream.
pub fn perturbed(p: &Params, scale: f64, seed: u64) -> Params {
    let mut q = p.clone();
    let mut r = rng::stream(seed, "test-perturb", &[]);
    for v in q.as_mut_slice() {
        *v += scale * r.random_range(-1.0..=1.0);
    }
    q
}

// ---------------------------------------------------------------------------
// brute-force forward pass, written directly from the architecture description

/// Next-token log-probabilities after `context`, computed without the
/// projection table or any shared helper.
pub fn brute_log_probs(p: &Params, context: &[TokenId]) -> Vec<f64> {
    let l = *p.layout();
    let pad = p.tokens().pad;
    let emb = p.embedding();
    let w1 = p.w1();
    let b1 = p.b1();
    let w2 = p.w2();
    let mut window = vec![pad; l.c];
    let n = context.len();
    for j in 0..l.c {
        let back = l.c - j;
        if n >= back {
            window[j] = context[n - back];
        }
    }
    let mut concat = Vec::with_capacity(l.c * l.d);
    for w in &window {
        concat.extend_from_slice(&emb[w.idx() * l.d..(w.idx() + 1) * l.d]);
    }
    let hidden: Vec<f64> = (0..l.h)
        .map(|h| {
            let row = &w1[h * l.c * l.d..(h + 1) * l.c * l.d];
            (b1[h] + row.iter().zip(&concat).map(|(a, b)| a * b).sum::<f64>()).tanh()
        })
        .collect();
    let logits: Vec<f64> = (0..l.vocab).map(|t| (0..l.h).map(|h| hidden[h] * w2[h * l.vocab + t]).sum()).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|v| v - z).collect()
}

pub fn brute_entropy(lp: &[f64]) -> f64 {
    -lp.iter().map(|&l| if l.is_finite() { l.exp() * l } else { 0.0 }).sum::<f64>()
}

/// Sorted-truncate-renormalise entropy of the next-token distribution.
pub fn brute_top_k_entropy(p: &Params, context: &[TokenId], k: usize) -> f64 {
    let mut probs: Vec<f64> = brute_log_probs(p, context).iter().map(|l| l.exp()).collect();
    probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    probs.truncate(k);
    let z: f64 = probs.iter().sum();
    -probs.iter().map(|q| q / z).filter(|&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// finite differences

pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: usize,
    /// Largest |fd| among coordinates whose analytic gradient is exactly zero.
    pub max_zero_fd: f64,
}

/// Central differences with step `h` on `n` coordinates drawn at random from
/// those whose analytic gradient exceeds `floor` in magnitude, plus a handful
/// of exactly-zero coordinates.
pub fn fd_check<F: Fn(&Params) -> f64>(p: &Params, grad: &[f64], f: F, n: usize, h: f64, floor: f64, seed: u64) -> FdReport {
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > floor).collect();
    let dead: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] == 0.0).collect();
    assert!(live.len() >= n, "only {} coordinates above the floor", live.len());
    let mut r = rng::stream(seed, "test-fd", &[]);
    let picked: Vec<usize> = live.choose_multiple(&mut r, n).copied().collect();
    let zeros: Vec<usize> = dead.choose_multiple(&mut r, 20.min(dead.len())).copied().collect();
    let diff = |i: usize| {
        let mut q = p.clone();
        q.as_mut_slice()[i] += h;
        let up = f(&q);
        q.as_mut_slice()[i] -= 2.0 * h;
        let down = f(&q);
        (up - down) / (2.0 * h)
    };
    let mut max_rel = 0.0;
    let mut worst = 0;
    for &i in &picked {
        let fd = diff(i);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    let max_zero_fd = zeros.iter().map(|&i| diff(i).abs()).fold(0.0, f64::max);
    FdReport { checked: picked.len(), max_rel, worst, max_zero_fd }
}

// ---------------------------------------------------------------------------
// small batches over the standard vocabulary

pub fn plain_prompt(tv: &TaskVocab, task: TaskKind, cues: &[TokenId]) -> Vec<TokenId> {
    let mut x = vec![tv.question(task), tv.img];
    x.extend_from_slice(cues);
    x.push(tv.txt);
    x.extend(tv.fillers.iter().take(3));
    x.extend(tv.fallback(task));
    x
}

pub fn sft_batch(tv: &TaskVocab) -> SftBatch {
    let race = tv.target_cue(Target::Race);
    let deh = tv.attack_cue(Attack::Dehumanizing);
    let latent = LatentMeme::hateful(Target::Race, vec![Attack::Dehumanizing], 0).unwrap();
    let e = gold_explanation(&latent, tv);
    let items = vec![
        (
            plain_prompt(tv, TaskKind::Attack, &[race, deh]),
            render_target(&e, &[tv.attack_label(Attack::Dehumanizing)], TaskKind::Attack, tv).unwrap(),
        ),
        (
            plain_prompt(tv, TaskKind::Target, &[race]),
            render_target(&[], &[tv.target_label(Target::Race)], TaskKind::Target, tv).unwrap(),
        ),
        (plain_prompt(tv, TaskKind::Binary, &[]), render_target(&[], &[tv.no], TaskKind::Binary, tv).unwrap()),
    ];
    SftBatch::new(items)
}

pub fn dpo_pairs(tv: &TaskVocab, reference: &Snapshot<f64>) -> Vec<PreferencePair> {
    let mocking = tv.attack_cue(Attack::Mocking);
    let pairs = [
        (
            plain_prompt(tv, TaskKind::Attack, &[mocking]),
            render_target(&[mocking], &[tv.attack_label(Attack::Mocking)], TaskKind::Attack, tv).unwrap(),
            render_target(&[], &[tv.benign], TaskKind::Attack, tv).unwrap(),
        ),
        (
            plain_prompt(tv, TaskKind::Binary, &[]),
            render_target(&[], &[tv.no], TaskKind::Binary, tv).unwrap(),
            render_target(&[tv.fillers[0]], &[tv.yes], TaskKind::Binary, tv).unwrap(),
        ),
    ];
    pairs
        .into_iter()
        .map(|(x, c, r)| PreferencePair {
            ref_chosen: sequence_log_prob(reference, &x, &c).unwrap(),
            ref_rejected: sequence_log_prob(reference, &x, &r).unwrap(),
            x,
            chosen: c,
            rejected: r,
        })
        .collect()
}

pub fn dpo_cfg() -> DpoConfig {
    DpoConfig { beta_pref: 0.5, ..DpoConfig::default() }
}

/// Two groups of four fixed responses, rewards chosen so advantages are non-trivial.
pub fn grpo_groups(tv: &TaskVocab, old: &Snapshot<f64>, cfg: &GrpoConfig) -> Vec<GroupRollout> {
    let slurs = tv.attack_cue(Attack::Slurs);
    let a = |l: Attack| tv.attack_label(l);
    let x1 = plain_prompt(tv, TaskKind::Attack, &[slurs]);
    let r1 = vec![
        render_target(&[slurs], &[a(Attack::Slurs)], TaskKind::Attack, tv).unwrap(),
        render_target(&[], &[a(Attack::Slurs), a(Attack::Mocking)], TaskKind::Attack, tv).unwrap(),
        render_target(&[], &[tv.benign], TaskKind::Attack, tv).unwrap(),
        vec![tv.fillers[1], tv.fillers[2], tv.vocab().specials().eos],
    ];
    let x2 = plain_prompt(tv, TaskKind::Binary, &[]);
    let r2 = vec![
        render_target(&[], &[tv.no], TaskKind::Binary, tv).unwrap(),
        render_target(&[tv.fillers[3]], &[tv.yes], TaskKind::Binary, tv).unwrap(),
        render_target(&[], &[tv.yes], TaskKind::Binary, tv).unwrap(),
        render_target(&[tv.fillers[4], tv.fillers[5]], &[tv.no], TaskKind::Binary, tv).unwrap(),
    ];
    let groups = [(x1, r1, vec![2.2, 1.5, 1.0, 0.0]), (x2, r2, vec![2.0, 0.95, 1.0, 2.1])];
    groups
        .into_iter()
        .map(|(x, responses, rewards)| GroupRollout {
            advantages: group_advantages(&rewards, cfg).unwrap(),
            x,
            responses,
            rewards,
            snapshot: old.id(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// a four-token policy small enough to enumerate

pub const TINY_V: usize = 4;
pub const TINY_CLOSE: TokenId = TokenId(3);

pub fn tiny_params(seed: u64, init_scale: f64) -> Params {
    let cfg = PolicyConfig { d_emb: 8, hidden: 12, context: 4, init_scale, seed, max_seq_len: 64 };
    let layout = TokenLayout { vocab_size: TINY_V, pad: TokenId(0), eos: TINY_CLOSE };
    PolicyParams::init(cfg, layout).unwrap()
}

/// Every explanation of length ≤ `max_len` with its probability, where the
/// explanation ends at the close token or is cut at `max_len`. Probabilities
/// are products of brute-force next-token probabilities.
pub fn tiny_explanations(p: &Params, x: &[TokenId], max_len: usize) -> Vec<(Vec<TokenId>, f64)> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((e, pe)) = stack.pop() {
        let mut ctx = x.to_vec();
        ctx.extend_from_slice(&e);
        let lp = brute_log_probs(p, &ctx);
        for t in 0..TINY_V {
            let t = TokenId(t as u16);
            let q = pe * lp[t.idx()].exp();
            if t == TINY_CLOSE {
                out.push((e.clone(), q));
            } else {
                let mut f = e.clone();
                f.push(t);
                if f.len() == max_len {
                    out.push((f, q));
                } else {
                    stack.push((f, q));
                }
            }
        }
    }
    out
}

/// Context at which the decision is read: `x ++ e ++ close`.
pub fn tiny_decision_context(x: &[TokenId], e: &[TokenId]) -> Vec<TokenId> {
    let mut c = x.to_vec();
    c.extend_from_slice(e);
    c.push(TINY_CLOSE);
    c
}

/// `(H(e|x), H(d|e,x), H((e,d)|x))` by explicit enumeration of pairs.
pub fn tiny_entropies(p: &Params, x: &[TokenId], max_len: usize) -> (f64, f64, f64) {
    let mut he = 0.0;
    let mut hd = 0.0;
    let mut hj = 0.0;
    for (e, pe) in tiny_explanations(p, x, max_len) {
        he -= pe * pe.ln();
        let lp = brute_log_probs(p, &tiny_decision_context(x, &e));
        hd += pe * brute_entropy(&lp);
        for l in lp {
            let q = pe * l.exp();
            hj -= q * q.ln();
        }
    }
    (he, hd, hj)
}

pub fn seeds_of(label: &str, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive_seed(7, label, &[i])).collect()
}

// ---------------------------------------------------------------------------
// finite-difference drivers shared by the gradient tests and the acceptance run

pub const FD_STEP: f64 = 1e-5;
pub const FD_COORDS: usize = 200;
pub const FD_FLOOR: f64 = 1e-5;

pub fn sft_fd(seed: u64) -> FdReport {
    use expo_core::objectives::sft_loss_and_grad;
    let tv = TaskVocab::standard();
    let p = standard_params(&tv, 0.3, seed);
    let batch = sft_batch(&tv);
    let (_, g) = sft_loss_and_grad(&Snapshot::new(p.clone()), &batch).unwrap();
    fd_check(&p, &g.data, |q| sft_loss_and_grad(&Snapshot::new(q.clone()), &batch).unwrap().0, FD_COORDS, FD_STEP, FD_FLOOR, seed)
}

pub fn dpo_fd(seed: u64) -> FdReport {
    use expo_core::objectives::dpo_loss_and_grad;
    let tv = TaskVocab::standard();
    let reference = Snapshot::new(standard_params(&tv, 0.3, seed));
    let p = perturbed(reference.params(), 0.05, seed);
    let pairs = dpo_pairs(&tv, &reference);
    let cfg = dpo_cfg();
    let (_, g) = dpo_loss_and_grad(&Snapshot::new(p.clone()), &pairs, &cfg).unwrap();
    fd_check(&p, &g.data, |q| dpo_loss_and_grad(&Snapshot::new(q.clone()), &pairs, &cfg).unwrap().0, FD_COORDS, FD_STEP, FD_FLOOR, seed)
}

/// GRPO at θ ≠ θ_old ≠ θ_ref. The perturbation is small enough that every
/// ratio stays inside the clip band, away from the kinks of the surrogate.
pub fn grpo_fd(seed: u64, mode: expo_core::objectives::RatioMode) -> FdReport {
    use expo_core::objectives::grpo_loss_and_grad;
    let tv = TaskVocab::standard();
    let old = Snapshot::new(standard_params(&tv, 0.3, seed));
    let reference = Snapshot::new(perturbed(old.params(), 0.02, seed ^ 1));
    let p = perturbed(old.params(), 0.002, seed ^ 2);
    let cfg = GrpoConfig { kl_beta: 0.1, ratio_mode: mode, ..GrpoConfig::default() };
    let groups = grpo_groups(&tv, &old, &cfg);
    let loss = |q: &Params| grpo_loss_and_grad(&Snapshot::new(q.clone()), &old, &reference, &groups, &cfg).unwrap();
    let (_, g) = loss(&p);
    fd_check(&p, &g.data, |q| loss(q).0, FD_COORDS, FD_STEP, FD_FLOOR, seed)
}

// ---------------------------------------------------------------------------
// estimator fixtures

pub fn tiny_probe(max_len: usize) -> expo_core::cde::DecisionProbe {
    expo_core::cde::DecisionProbe { open: None, close: TINY_CLOSE, answer_prefix: Vec::new(), max_explanation_len: max_len }
}

/// Hand-wired four-token policy. Hidden unit 0 is pinned at 1 and makes
/// token 2 (near) certain everywhere; hidden unit 1 fires only right after the
/// close token and replaces that with an exact `q / 1 − q` split over tokens
/// 0 and 1. Explanations are therefore always `[2, 2, 2]`.
pub fn forced_policy(q: f64) -> Params {
    let mut p = tiny_params(0, 0.5);
    p.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    let l = *p.layout();
    p.embedding_mut()[TINY_CLOSE.idx() * l.d] = 1.0;
    p.w1_mut()[l.c * l.d + (l.c - 1) * l.d] = 100.0;
    p.b1_mut()[0] = 50.0;
    let w2 = p.w2_mut();
    w2[2] = 1000.0;
    w2[l.vocab + 2] = -2000.0;
    w2[l.vocab] = q.ln();
    w2[l.vocab + 1] = (1.0 - q).ln();
    w2[l.vocab + 3] = -2000.0;
    p
}

pub fn binary_entropy(q: f64) -> f64 {
    -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())
}

pub struct EstimatorAgreement {
    pub enumerated: f64,
    pub library_enumerated: f64,
    pub mc: f64,
    pub chain_identity_err: f64,
    pub library_identity_err: f64,
}

/// Enumeration oracle against the K = 1024 Monte-Carlo estimate on the
/// four-token policy with explanations of length ≤ 3.
pub fn estimator_agreement(seed: u64) -> EstimatorAgreement {
    use expo_core::cde::{dataset_cde, enumerate_cde, CdeItem, EstimatorConfig};
    let p = tiny_params(seed, 1.0);
    let snap = Snapshot::new(p.clone());
    let x = ids(&[1, 2]);
    let probe = tiny_probe(3);
    let (he, hd, hj) = tiny_entropies(&p, &x, 3);
    let lib = enumerate_cde(&snap, &x, &probe, TINY_V, 1_000).unwrap();
    let cfg = EstimatorConfig { k: 1024, top_k: TINY_V, ..EstimatorConfig::default() };
    let items = [CdeItem { id: 0, x: x.clone() }];
    let mc = dataset_cde(&snap, &items, &probe, &cfg, &mut rng::stream(seed, "test-mc", &[])).unwrap().mean;
    EstimatorAgreement {
        enumerated: hd,
        library_enumerated: lib.decision,
        mc,
        chain_identity_err: (he + hd - hj).abs(),
        library_identity_err: (lib.explanation + lib.decision - lib.joint).abs(),
    }
}

/// Mean plug-in entropy over `reps` repetitions of `k` draws from a black-box
/// sampler over the forced 0.7 / 0.3 policy.
pub fn logit_free_mean(k: usize, reps: usize, seed: u64) -> f64 {
    use expo_core::cde::logit_free_cde;
    use expo_core::policy::{next_token_log_probs, sample_token};
    let snap = Snapshot::new(forced_policy(0.7));
    let ctx = tiny_decision_context(&ids(&[1, 2]), &ids(&[2, 2, 2]));
    let lp = next_token_log_probs(&snap, &ctx);
    let mut total = 0.0;
    for rep in 0..reps {
        let mut r = rng::stream(seed, "test-logit-free", &[k as u64, rep as u64]);
        let est = logit_free_cde(|r: &mut rng::StreamRng| Ok(vec![sample_token(&lp, 1.0, r)]), k, &mut r).unwrap();
        total += est.entropy;
    }
    total / reps as f64
}

// ---------------------------------------------------------------------------
// small training fixtures

pub fn small_corpus(tv: &TaskVocab, seed: u64) -> Vec<expo_core::task::Example> {
    let cfg = expo_core::task::DatasetConfig { n_train: 80, n_val: 12, n_test: 12, seed, ..Default::default() };
    expo_core::task::generate_dataset(&cfg, tv).unwrap()
}

/// A few GRPO steps with small batches; warmup off unless changed.
pub fn fast_train_cfg(steps: usize) -> expo_core::curriculum::TrainRunConfig {
    use expo_core::curriculum::{CurriculumConfig, TrainRunConfig, WarmupMode};
    let mut cfg = TrainRunConfig {
        warmup_mode: WarmupMode::None,
        warmup_epochs: 2,
        grpo_batch_prompts: 4,
        curriculum: CurriculumConfig { total_steps: steps, ..Default::default() },
        ..Default::default()
    };
    cfg.grpo.group_size = 4;
    cfg
}
