mod common;

use std::collections::HashSet;

use expo_core::task::{
    build_prompt, generate_dataset, gold_explanation, parse_response, read_corpus, render_target, write_corpus, Attack,
    BinaryClass, DatasetConfig, FormatError, LatentMeme, PolicyManual, PromptMode, Split, TaskKind, TaskVocab, Target,
};
use expo_core::vocab::TokenId;
use proptest::prelude::*;

fn small(seed: u64) -> DatasetConfig {
    DatasetConfig { n_train: 60, n_val: 20, n_test: 20, seed, ..Default::default() }
}

#[test]
fn hateful_fraction_is_near_p() {
    let tv = TaskVocab::standard();
    let cfg = DatasetConfig { n_train: 10_000, n_val: 1, n_test: 1, ..Default::default() };
    let data = generate_dataset(&cfg, &tv).unwrap();
    let train: Vec<_> = data.iter().filter(|e| e.split == Split::Train && e.task == TaskKind::Binary).collect();
    assert_eq!(train.len(), 10_000);
    let frac = train.iter().filter(|e| e.is_hateful()).count() as f64 / train.len() as f64;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

#[test]
fn generation_is_a_pure_function_of_config() {
    let tv = TaskVocab::standard();
    assert_eq!(generate_dataset(&small(3), &tv).unwrap(), generate_dataset(&small(3), &tv).unwrap());
    assert_ne!(generate_dataset(&small(3), &tv).unwrap(), generate_dataset(&small(4), &tv).unwrap());
}

#[test]
fn splits_are_disjoint_and_sized() {
    let tv = TaskVocab::standard();
    let data = generate_dataset(&small(1), &tv).unwrap();
    assert_eq!(data.len(), 3 * 100);
    let ids: HashSet<u64> = data.iter().map(|e| e.id).collect();
    assert_eq!(ids.len(), data.len());
    for (split, n) in [(Split::Train, 60), (Split::Validation, 20), (Split::Test, 20)] {
        assert_eq!(data.iter().filter(|e| e.split == split).count(), 3 * n);
    }
    // a latent meme never crosses splits: all three tasks share id / 3
    let mut owner = std::collections::HashMap::new();
    for e in &data {
        assert_eq!(*owner.entry(e.id / 3).or_insert(e.split), e.split);
    }
}

#[test]
fn labels_agree_with_the_binary_class() {
    let tv = TaskVocab::standard();
    for e in generate_dataset(&small(2), &tv).unwrap() {
        let benign_label = match e.task {
            TaskKind::Binary => tv.no,
            _ => tv.benign,
        };
        assert_eq!(e.gold_binary == BinaryClass::Hateful, e.gold_labels != [benign_label]);
        if e.task == TaskKind::Target {
            assert_eq!(e.gold_labels.len(), 1);
        }
        assert_eq!(*e.input.last().unwrap(), tv.fallback(e.task)[1]);
    }
}

#[test]
fn plain_and_manual_prompts() {
    let tv = TaskVocab::standard();
    let data = generate_dataset(&small(5), &tv).unwrap();
    for e in &data {
        let manual = PolicyManual::standard(e.task, &tv);
        let plain = build_prompt(e, PromptMode::Plain, &manual, &tv).unwrap();
        let pm = build_prompt(e, PromptMode::PolicyManual, &manual, &tv).unwrap();
        assert_eq!(plain, e.input);
        assert!(pm.len() > plain.len());
        assert!(pm.ends_with(&tv.fallback(e.task)) && plain.ends_with(&tv.fallback(e.task)));
        let desc: HashSet<TokenId> = manual.items.iter().flat_map(|(_, d)| d.iter().copied()).collect();
        assert!(plain.iter().all(|t| !desc.contains(t) || e.surface.contains(t)));
        if e.task == TaskKind::Attack {
            for l in tv.attack_labels {
                assert!(plain.contains(&l));
            }
            // each label followed by a colon and its description, in inventory order
            let mut at = 1;
            for (label, d) in &manual.items {
                assert_eq!(pm[at], *label);
                assert_eq!(pm[at + 1], tv.colon);
                assert_eq!(&pm[at + 2..at + 2 + d.len()], d.as_slice());
                at += 2 + d.len();
            }
        }
    }
    let e = &data[0];
    let wrong = PolicyManual::standard(TaskKind::Target, &tv);
    assert_eq!(e.task, TaskKind::Binary);
    assert!(build_prompt(e, PromptMode::Plain, &wrong, &tv).is_err());
    let mut broken = PolicyManual::standard(e.task, &tv);
    broken.items.pop();
    assert!(build_prompt(e, PromptMode::PolicyManual, &broken, &tv).is_err());
}

#[test]
fn malformed_responses_are_classified() {
    let tv = TaskVocab::standard();
    let sp = *tv.vocab().specials();
    let m = tv.attack_label(Attack::Mocking);
    let y = render_target(&[tv.fillers[1]], &[m], TaskKind::Attack, &tv).unwrap();
    assert!(parse_response(&y, TaskKind::Attack, &tv).is_ok());

    let mut two = y.clone();
    two.insert(4, sp.answer_open);
    assert_eq!(parse_response(&two, TaskKind::Attack, &tv), Err(FormatError::DuplicatedTag("<answer>")));
    let foreign = vec![sp.think_open, sp.think_close, sp.answer_open, tv.fillers[0], sp.answer_close];
    assert_eq!(parse_response(&foreign, TaskKind::Attack, &tv), Err(FormatError::NonLabelToken(tv.fillers[0])));
    let empty = vec![sp.think_open, sp.think_close, sp.answer_open, sp.answer_close];
    assert_eq!(parse_response(&empty, TaskKind::Attack, &tv), Err(FormatError::EmptyAnswer));
    let mut trailing = y[..y.len() - 1].to_vec();
    trailing.push(tv.fillers[0]);
    assert_eq!(parse_response(&trailing, TaskKind::Attack, &tv), Err(FormatError::TrailingTokens(1)));
    assert!(matches!(parse_response(&y[1..], TaskKind::Attack, &tv), Err(FormatError::MissingTag(_))));
    let mixed = vec![sp.think_open, sp.think_close, sp.answer_open, tv.benign, sp.sep, m, sp.answer_close];
    assert_eq!(parse_response(&mixed, TaskKind::Attack, &tv), Err(FormatError::BenignNotAlone));
    // an attack label is not a target answer
    assert!(parse_response(&y, TaskKind::Target, &tv).is_err());
    assert!(render_target(&[], &[tv.fillers[0]], TaskKind::Attack, &tv).is_err());
}

#[test]
fn gold_explanations_differ_only_in_target() {
    let tv = TaskVocab::standard();
    let a = LatentMeme::hateful(Target::Race, vec![Attack::Dehumanizing], 1).unwrap();
    let b = LatentMeme::hateful(Target::Sex, vec![Attack::Dehumanizing], 1).unwrap();
    let (ea, eb) = (gold_explanation(&a, &tv), gold_explanation(&b, &tv));
    assert_eq!(ea.len(), eb.len());
    let diff: Vec<usize> = (0..ea.len()).filter(|&i| ea[i] != eb[i]).collect();
    assert_eq!(diff.len(), 1);
    assert_eq!((ea[diff[0]], eb[diff[0]]), (tv.target_cue(Target::Race), tv.target_cue(Target::Sex)));
    for cue in [tv.target_cue(Target::Race), tv.attack_cue(Attack::Dehumanizing)] {
        assert_eq!(ea.iter().filter(|&&t| t == cue).count(), 1);
    }
    assert_eq!(gold_explanation(&LatentMeme::benign(0), &tv), vec![tv.word_no, tv.word_violation]);
}

#[test]
fn corpus_jsonl_round_trip() {
    let tv = TaskVocab::standard();
    let data = generate_dataset(&small(8), &tv).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_corpus(&data, &tv, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), data.len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "task", "input_tokens", "gold_binary", "gold_labels", "gold_explanation", "split"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(read_corpus(&path, &tv).unwrap(), data);
    std::fs::write(&path, "{\"id\":1}\n").unwrap();
    assert!(read_corpus(&path, &tv).is_err());
}

fn label_subset(task: TaskKind, tv: &TaskVocab) -> impl Strategy<Value = Vec<TokenId>> {
    let inv = tv.inventory(task);
    let benign = match task {
        TaskKind::Binary => None,
        _ => Some(tv.benign),
    };
    let n = inv.len();
    (any::<bool>(), 1usize..(1 << n)).prop_map(move |(use_benign, mask)| match (benign, use_benign) {
        (Some(b), true) => vec![b],
        _ if task != TaskKind::Attack => vec![inv[mask.trailing_zeros() as usize]],
        _ => (0..n).filter(|i| mask >> i & 1 == 1).map(|i| inv[i]).collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn render_parse_round_trip(
        (task, labels) in (0usize..3).prop_flat_map(|i| {
            let task = TaskKind::ALL[i];
            (Just(task), label_subset(task, &TaskVocab::standard()))
        }),
        e in proptest::collection::vec(0usize..16, 0..6),
        shift in 0usize..4,
    ) {
        let tv = TaskVocab::standard();
        let explanation: Vec<TokenId> = e.iter().map(|&i| tv.fillers[i % tv.fillers.len()]).collect();
        let mut shuffled = labels.clone();
        let n = shuffled.len();
        shuffled.rotate_left(shift % n);
        let y = render_target(&explanation, &shuffled, task, &tv).unwrap();
        let p = parse_response(&y, task, &tv).unwrap();
        prop_assert_eq!(p.explanation, explanation);
        prop_assert_eq!(p.labels, labels);
    }
}
