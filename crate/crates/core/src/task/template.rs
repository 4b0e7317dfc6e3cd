use thiserror::Error;

use super::{LatentMeme, TaskKind, TaskVocab};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("missing {0} tag")]
    MissingTag(&'static str),
    #[error("duplicated {0} tag")]
    DuplicatedTag(&'static str),
    #[error("tags out of order")]
    OutOfOrder,
    #[error("{0} trailing tokens after </answer>")]
    TrailingTokens(usize),
    #[error("non-label token {0} inside answer")]
    NonLabelToken(TokenId),
    #[error("empty answer")]
    EmptyAnswer,
    #[error("Benign combined with other labels")]
    BenignNotAlone,
    #[error("binary answer must be a single label")]
    TooManyLabels,
}

/// Segments of a well-formed response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub explanation: Vec<TokenId>,
    /// Canonical order, deduplicated.
    pub labels: Vec<TokenId>,
}

/// `<think> e </think> <answer> d₁ <sep> d₂ … </answer> <eos>` with labels in
/// canonical inventory order.
pub fn render_target(explanation: &[TokenId], labels: &[TokenId], task: TaskKind, tv: &TaskVocab) -> Result<Vec<TokenId>> {
    let sp = tv.vocab().specials();
    let mut ranked = Vec::with_capacity(labels.len());
    for &l in labels {
        match tv.rank(task, l) {
            Some(r) => ranked.push((r, l)),
            None => {
                return Err(Error::invalid(format!(
                    "{} is not a {} label",
                    tv.vocab().token(l),
                    task.name()
                )))
            }
        }
    }
    if ranked.is_empty() {
        return Err(Error::invalid("no labels to render"));
    }
    ranked.sort();
    ranked.dedup();
    let mut out = Vec::with_capacity(explanation.len() + 2 * ranked.len() + 5);
    out.push(sp.think_open);
    out.extend_from_slice(explanation);
    out.push(sp.think_close);
    out.push(sp.answer_open);
    for (i, (_, l)) in ranked.iter().enumerate() {
        if i > 0 {
            out.push(sp.sep);
        }
        out.push(*l);
    }
    out.push(sp.answer_close);
    out.push(sp.eos);
    Ok(out)
}

/// Splits a response into explanation and label set. One trailing end-of-sequence
/// token is ignored.
pub fn parse_response(tokens: &[TokenId], task: TaskKind, tv: &TaskVocab) -> Result<Parsed, FormatError> {
    let sp = tv.vocab().specials();
    let body = match tokens.last() {
        Some(&t) if t == sp.eos => &tokens[..tokens.len() - 1],
        _ => tokens,
    };
    let tags = [
        (sp.think_open, "<think>"),
        (sp.think_close, "</think>"),
        (sp.answer_open, "<answer>"),
        (sp.answer_close, "</answer>"),
    ];
    let mut pos = [0usize; 4];
    for (k, &(tag, name)) in tags.iter().enumerate() {
        let mut found = body.iter().enumerate().filter(|(_, &t)| t == tag).map(|(i, _)| i);
        pos[k] = found.next().ok_or(FormatError::MissingTag(name))?;
        if found.next().is_some() {
            return Err(FormatError::DuplicatedTag(name));
        }
    }
    if pos[0] != 0 || !(pos[0] < pos[1] && pos[1] + 1 == pos[2] && pos[2] < pos[3]) {
        return Err(FormatError::OutOfOrder);
    }
    if pos[3] + 1 != body.len() {
        return Err(FormatError::TrailingTokens(body.len() - pos[3] - 1));
    }
    let answer = &body[pos[2] + 1..pos[3]];
    if answer.is_empty() {
        return Err(FormatError::EmptyAnswer);
    }
    let mut ranked = Vec::new();
    for (i, &t) in answer.iter().enumerate() {
        let at_label = i % 2 == 0;
        if !at_label {
            if t != sp.sep {
                return Err(FormatError::NonLabelToken(t));
            }
            continue;
        }
        match tv.rank(task, t) {
            Some(r) => ranked.push((r, t)),
            None => return Err(FormatError::NonLabelToken(t)),
        }
    }
    if answer.len() % 2 == 0 {
        // ends on a separator
        return Err(FormatError::NonLabelToken(sp.sep));
    }
    ranked.sort();
    ranked.dedup();
    if ranked.len() > 1 {
        if task == TaskKind::Binary {
            return Err(FormatError::TooManyLabels);
        }
        if ranked.iter().any(|&(_, t)| t == tv.benign) {
            return Err(FormatError::BenignNotAlone);
        }
    }
    Ok(Parsed {
        explanation: body[1..pos[1]].to_vec(),
        labels: ranked.into_iter().map(|(_, t)| t).collect(),
    })
}

/// `targets <target cue> via <attack cues…>` for hateful memes, `no violation` otherwise.
pub fn gold_explanation(latent: &LatentMeme, tv: &TaskVocab) -> Vec<TokenId> {
    match latent.target {
        None => vec![tv.word_no, tv.word_violation],
        Some(t) => {
            let mut v = vec![tv.word_targets, tv.target_cue(t), tv.word_via];
            v.extend(latent.attacks.iter().map(|&a| tv.attack_cue(a)));
            v
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Attack, Target};

    fn tv() -> TaskVocab {
        TaskVocab::standard()
    }

    #[test]
    fn render_canonicalises_and_round_trips() {
        let tv = tv();
        let e = vec![tv.word_targets, tv.fillers[0]];
        let labels = [tv.attack_label(Attack::Mocking), tv.attack_label(Attack::Dehumanizing)];
        let y = render_target(&e, &labels, TaskKind::Attack, &tv).unwrap();
        let p = parse_response(&y, TaskKind::Attack, &tv).unwrap();
        assert_eq!(p.explanation, e);
        assert_eq!(p.labels, vec![labels[1], labels[0]]);
    }

    #[test]
    fn empty_explanation_renders_adjacent_tags() {
        let tv = tv();
        let sp = *tv.vocab().specials();
        let y = render_target(&[], &[tv.benign], TaskKind::Target, &tv).unwrap();
        assert_eq!(&y[..3], &[sp.think_open, sp.think_close, sp.answer_open]);
        assert_eq!(parse_response(&y, TaskKind::Target, &tv).unwrap().explanation, vec![]);
    }

    #[test]
    fn unknown_label_rejected() {
        let tv = tv();
        assert!(render_target(&[], &[tv.yes], TaskKind::Attack, &tv).is_err());
        assert!(render_target(&[], &[tv.benign], TaskKind::Binary, &tv).is_err());
    }

    #[test]
    fn malformed_responses() {
        let tv = tv();
        let sp = *tv.vocab().specials();
        let mock = tv.attack_label(Attack::Mocking);
        let ok = vec![sp.think_open, sp.think_close, sp.answer_open, mock, sp.answer_close];
        assert!(parse_response(&ok, TaskKind::Attack, &tv).is_ok());

        let mut two = ok.clone();
        two.extend([sp.answer_open, mock, sp.answer_close]);
        assert_eq!(parse_response(&two, TaskKind::Attack, &tv), Err(FormatError::DuplicatedTag("<answer>")));

        let bad = vec![sp.think_open, sp.think_close, sp.answer_open, tv.fillers[1], sp.answer_close];
        assert_eq!(parse_response(&bad, TaskKind::Attack, &tv), Err(FormatError::NonLabelToken(tv.fillers[1])));

        let no_close = vec![sp.think_open, sp.answer_open, mock, sp.answer_close];
        assert_eq!(parse_response(&no_close, TaskKind::Attack, &tv), Err(FormatError::MissingTag("</think>")));

        let mut trailing = ok.clone();
        trailing.push(tv.fillers[0]);
        assert_eq!(parse_response(&trailing, TaskKind::Attack, &tv), Err(FormatError::TrailingTokens(1)));

        let empty = vec![sp.think_open, sp.think_close, sp.answer_open, sp.answer_close];
        assert_eq!(parse_response(&empty, TaskKind::Attack, &tv), Err(FormatError::EmptyAnswer));

        let mixed = vec![sp.think_open, sp.think_close, sp.answer_open, mock, sp.sep, tv.benign, sp.answer_close];
        assert_eq!(parse_response(&mixed, TaskKind::Attack, &tv), Err(FormatError::BenignNotAlone));

        let yn = vec![sp.think_open, sp.think_close, sp.answer_open, tv.yes, sp.sep, tv.no, sp.answer_close];
        assert_eq!(parse_response(&yn, TaskKind::Binary, &tv), Err(FormatError::TooManyLabels));
    }

    #[test]
    fn gold_explanations() {
        let tv = tv();
        assert_eq!(gold_explanation(&LatentMeme::benign(0), &tv), vec![tv.word_no, tv.word_violation]);
        let l = LatentMeme::hateful(Target::Race, vec![Attack::Dehumanizing], 0).unwrap();
        let e = gold_explanation(&l, &tv);
        let cues: Vec<TokenId> = e.iter().copied().filter(|&t| tv.is_cue(t)).collect();
        assert_eq!(cues, vec![tv.target_cue(Target::Race), tv.attack_cue(Attack::Dehumanizing)]);
    }
}
