//! Reference captions derived from scene annotations, plus the alignment
//! checker that keeps them honest.

use super::*;
use crate::decoder::Tokenizer;
use std::fmt;

/// Renders the canonical caption for a record and tokenizes it.
///
/// Sentence order: entity inventory, one sentence per (triple, action) in
/// record order, then a threat or normal summary. Records without triples get
/// an explicit no-interaction sentence.
pub fn align_caption(pair: &HoiPairRecord) -> Result<CaptionRecord> {
    let violations = validate_record(pair, ENTITY_CLASSES.len(), ACTIONS.len());
    if let Some(first) = violations.first() {
        return Err(Error::invariant(format!(
            "cannot caption invalid record {}: {first}",
            pair.image_id
        )));
    }
    let mut sentences = Vec::new();

    let mut counts = [0usize; 6];
    for e in &pair.entities {
        counts[e.class_id] += 1;
    }
    let items: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(c, &n)| format!("{} {}", count_word(n), ENTITY_CLASSES[c]))
        .collect();
    sentences.push(format!("The scene contains {}.", join_list(&items)));

    if pair.triples.is_empty() {
        sentences.push("No interaction is observed.".to_string());
    }
    for t in &pair.triples {
        let h = ENTITY_CLASSES[pair.entities[t.human_idx].class_id];
        let o = ENTITY_CLASSES[pair.entities[t.object_idx].class_id];
        for &a in &t.action_ids {
            sentences.push(format!("The {h} {} the {o}.", ACTIONS[a]));
        }
    }

    let kind = if pair.is_threat { "threatening" } else { "normal" };
    sentences.push(format!("This is a {kind} scene."));

    let text = sentences.join(" ");
    let tokenizer = Tokenizer::closed();
    let token_ids = tokenizer.tokenize(&text);
    if token_ids.contains(&crate::decoder::UNK) {
        return Err(Error::invariant(format!(
            "caption for {} fell outside the closed grammar: {text:?}",
            pair.image_id
        )));
    }
    Ok(CaptionRecord { image_id: pair.image_id.clone(), text, token_ids })
}

/// English count word; everything past nine collapses to "many".
pub fn count_word(n: usize) -> &'static str {
    const WORDS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
    if (1..=9).contains(&n) {
        WORDS[n - 1]
    } else {
        "many"
    }
}

fn join_list(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        _ => format!("{} and {}", items[..items.len() - 1].join(", "), items[items.len() - 1]),
    }
}

/// A way in which a caption fails to reflect its record.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentViolation {
    MissingEntityMention { class: String },
    WrongEntityCount { class: String, expected: String },
    MissingRelationMention { human: String, action: String, object: String },
    MissingThreatSummary { expected: String },
    TokenMismatch,
}

impl fmt::Display for AlignmentViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentViolation::MissingEntityMention { class } => {
                write!(f, "caption never mentions entity class {class:?}")
            }
            AlignmentViolation::WrongEntityCount { class, expected } => {
                write!(f, "caption does not state {expected:?} for class {class:?}")
            }
            AlignmentViolation::MissingRelationMention { human, action, object } => {
                write!(f, "caption lacks a sentence for ({human}, {action}, {object})")
            }
            AlignmentViolation::MissingThreatSummary { expected } => {
                write!(f, "caption lacks the {expected:?} summary sentence")
            }
            AlignmentViolation::TokenMismatch => {
                write!(f, "token ids do not retokenize from the caption text")
            }
        }
    }
}

/// Checks that a caption mentions every entity class, realizes every
/// (human, action, object) relation, states the right threat summary, and
/// carries token ids consistent with its text.
pub fn validate_alignment(pair: &HoiPairRecord, caption: &CaptionRecord) -> Vec<AlignmentViolation> {
    let mut out = Vec::new();
    let tokenizer = Tokenizer::closed();
    let words: std::collections::BTreeSet<&str> = caption.text.split(['.', ',']).flat_map(|s| s.split_whitespace()).collect();
    let mut counts = [0usize; 6];
    for e in &pair.entities {
        counts[e.class_id] += 1;
    }
    let preamble = caption.text.split('.').next().unwrap_or("");
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let class = ENTITY_CLASSES[c];
        if !words.contains(class) {
            out.push(AlignmentViolation::MissingEntityMention { class: class.to_string() });
        } else {
            let expected = format!("{} {}", count_word(n), class);
            if !preamble.contains(&expected) {
                out.push(AlignmentViolation::WrongEntityCount { class: class.to_string(), expected });
            }
        }
    }
    for t in &pair.triples {
        let h = ENTITY_CLASSES[pair.entities[t.human_idx].class_id];
        let o = ENTITY_CLASSES[pair.entities[t.object_idx].class_id];
        for &a in &t.action_ids {
            let action = ACTIONS[a];
            let sentence = format!("The {h} {action} the {o}.");
            if !caption.text.contains(&sentence) {
                out.push(AlignmentViolation::MissingRelationMention {
                    human: h.to_string(),
                    action: action.to_string(),
                    object: o.to_string(),
                });
            }
        }
    }
    let kind = if pair.is_threat { "threatening" } else { "normal" };
    let summary = format!("This is a {kind} scene.");
    if !caption.text.contains(&summary) {
        out.push(AlignmentViolation::MissingThreatSummary { expected: summary });
    }
    if tokenizer.tokenize(&caption.text) != caption.token_ids {
        out.push(AlignmentViolation::TokenMismatch);
    }
    out
}
