//! Tag-set metrics and deterministic rubric proxies for generated text.
//!
//! A tag is the canonical string `"<h_class>|<action>|<o_class>"`. Metrics
//! are macro-averaged over samples; a sample with no predictions and no
//! truth counts as perfect rather than undefined.

mod judge;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use crate::data::HoiPairRecord;
use crate::encoder::DecodedTriple;
use crate::error::{Error, Result};

pub use judge::{judge_scores, JudgeConfig, JudgeScore, RUBRIC_PROMPT};
pub use report::{build_report, parse_report_csv, Cell, Report, ReportRow};

/// The K values reported for Top-K accuracy.
pub const TOP_K_VALUES: [usize; 3] = [1, 3, 5];

/// Macro-averaged multi-label tag metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TagMetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub jaccard: f64,
    /// Top-K accuracy for K in [`TOP_K_VALUES`].
    pub top_k: BTreeMap<usize, f64>,
    pub n_samples: usize,
}

/// Deterministic offline stand-ins for the three judged dimensions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RubricScore {
    pub coi_proxy: f64,
    pub bma_proxy: f64,
    pub tdo_proxy: f64,
}

/// Canonical tag string for one (human, action, object) triple.
pub fn canonical_tag(h_class: &str, action: &str, o_class: &str) -> String {
    format!("{h_class}|{action}|{o_class}")
}

/// Canonical tags for decoded triples, in the order given (callers pass
/// confidence-ranked lists).
pub fn decoded_tags(triples: &[DecodedTriple]) -> Vec<String> {
    triples
        .iter()
        .map(|t| {
            let [h, a, o] = crate::decoder::triple_words(t);
            canonical_tag(h, a, o)
        })
        .collect()
}

/// Ground-truth tag set of a record, one tag per (pair, action),
/// deduplicated and sorted.
pub fn record_tags(record: &HoiPairRecord, entities: &[String], actions: &[String]) -> Vec<String> {
    let mut out = BTreeSet::new();
    for t in &record.triples {
        let h = name_of(entities, record.entities[t.human_idx].class_id);
        let o = name_of(entities, record.entities[t.object_idx].class_id);
        for &a in &t.action_ids {
            out.insert(canonical_tag(h, name_of(actions, a), o));
        }
    }
    out.into_iter().collect()
}

/// Converts the serialized `"person shoot gun"` form back to a canonical tag.
pub fn space_tag_to_canonical(tag: &str) -> Result<String> {
    let parts: Vec<&str> = tag.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::config(format!(
            "tag {tag:?} does not have exactly three words"
        )));
    }
    Ok(canonical_tag(parts[0], parts[1], parts[2]))
}

fn name_of(vocab: &[String], id: usize) -> &str {
    vocab.get(id).map(String::as_str).unwrap_or("[UNK]")
}

/// Macro-averaged precision, recall, F1, Jaccard and Top-K accuracy over
/// parallel per-sample tag lists. `predicted[i]` is ranked by descending
/// confidence; duplicates count once, keeping their best rank.
pub fn tag_metrics(predicted: &[Vec<String>], truth: &[Vec<String>]) -> Result<TagMetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::config(format!(
            "got {} predicted samples but {} truth samples",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::config("tag metrics need at least one sample"));
    }
    let n = predicted.len() as f64;

    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut sum_j = 0.0;
    let mut hits: BTreeMap<usize, usize> = TOP_K_VALUES.iter().map(|&k| (k, 0)).collect();

    for (pred_ranked, truth_list) in predicted.iter().zip(truth) {
        let ranked = dedup_ranked(pred_ranked);
        let pred_set: BTreeSet<&str> = ranked.iter().copied().collect();
        let truth_set: BTreeSet<&str> = truth_list.iter().map(String::as_str).collect();

        let tp = pred_set.intersection(&truth_set).count() as f64;
        let fp = pred_set.len() as f64 - tp;
        let fn_ = truth_set.len() as f64 - tp;

        sum_p += ratio_or(tp, tp + fp, truth_set.is_empty());
        sum_r += ratio_or(tp, tp + fn_, pred_set.is_empty());
        sum_j += ratio_or(tp, tp + fp + fn_, true);

        for (&k, hit_count) in hits.iter_mut() {
            let hit = if pred_set.is_empty() && truth_set.is_empty() {
                true
            } else {
                ranked.iter().take(k).any(|t| truth_set.contains(t))
            };
            if hit {
                *hit_count += 1;
            }
        }
    }

    let precision = sum_p / n;
    let recall = sum_r / n;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(TagMetricsReport {
        precision,
        recall,
        f1,
        jaccard: sum_j / n,
        top_k: hits.into_iter().map(|(k, m)| (k, m as f64 / n)).collect(),
        n_samples: predicted.len(),
    })
}

/// `num / den`, or `if_undefined` mapped to 1/0 when the denominator is zero.
fn ratio_or(num: f64, den: f64, perfect_when_undefined: bool) -> f64 {
    if den == 0.0 {
        if perfect_when_undefined {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

fn dedup_ranked(ranked: &[String]) -> Vec<&str> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in ranked {
        if seen.insert(t.as_str()) {
            out.push(t.as_str());
        }
    }
    out
}

/// Scores a generated caption against its ground-truth record without any
/// external judge.
///
/// `coi_proxy` is the F1 between entity-class names mentioned in the text
/// and the classes present in the record. `bma_proxy` is the F1 between
/// (h, action, o) triples extractable from the text through the caption
/// grammar and the record's triples. `tdo_proxy` is the fraction of threat
/// triples whose action and both entity names all appear in the text.
pub fn rubric_scores(
    caption: &str,
    record: &HoiPairRecord,
    entities: &[String],
    actions: &[String],
    threat_action_ids: &[usize],
) -> RubricScore {
    let words = caption_words(caption);
    let word_set: BTreeSet<&str> = words.iter().map(String::as_str).collect();

    let mentioned: BTreeSet<&str> = entities
        .iter()
        .map(String::as_str)
        .filter(|e| word_set.contains(e))
        .collect();
    let present: BTreeSet<&str> = record
        .entities
        .iter()
        .map(|e| name_of(entities, e.class_id))
        .collect();
    let coi_proxy = set_f1(&mentioned, &present);

    let extracted = extract_triples(&words, entities, actions);
    let mut truth_triples = BTreeSet::new();
    let mut threat_triples = BTreeSet::new();
    for t in &record.triples {
        let h = name_of(entities, record.entities[t.human_idx].class_id);
        let o = name_of(entities, record.entities[t.object_idx].class_id);
        for &a in &t.action_ids {
            let triple = (h, name_of(actions, a), o);
            truth_triples.insert(triple);
            if threat_action_ids.contains(&a) {
                threat_triples.insert(triple);
            }
        }
    }
    let bma_proxy = set_f1(&extracted_refs(&extracted), &truth_triples);

    let tdo_proxy = if threat_triples.is_empty() {
        1.0
    } else {
        let mentioned_fully = threat_triples
            .iter()
            .filter(|(h, a, o)| {
                word_set.contains(h) && word_set.contains(a) && word_set.contains(o)
            })
            .count();
        mentioned_fully as f64 / threat_triples.len() as f64
    };

    RubricScore { coi_proxy, bma_proxy, tdo_proxy }
}

/// F1 between two sets with the empty/empty case counting as 1.
fn set_f1<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    2.0 * inter / (a.len() + b.len()) as f64
}

fn extracted_refs<'a>(
    triples: &'a BTreeSet<(String, String, String)>,
) -> BTreeSet<(&'a str, &'a str, &'a str)> {
    triples
        .iter()
        .map(|(h, a, o)| (h.as_str(), a.as_str(), o.as_str()))
        .collect()
}

/// Lowercased words with sentence punctuation trimmed; underscores survive
/// so multi-part action names stay single words.
fn caption_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '_')
                .to_ascii_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Recovers (h, action, o) triples from relation sentences shaped
/// `The <h> <action> the <o>.` by scanning word windows.
fn extract_triples(
    words: &[String],
    entities: &[String],
    actions: &[String],
) -> BTreeSet<(String, String, String)> {
    let is_entity = |w: &str| entities.iter().any(|e| e == w);
    let is_action = |w: &str| actions.iter().any(|a| a == w);
    let mut out = BTreeSet::new();
    for win in words.windows(4) {
        if is_entity(&win[0]) && is_action(&win[1]) && win[2] == "the" && is_entity(&win[3]) {
            out.insert((win[0].clone(), win[1].clone(), win[3].clone()));
        }
    }
    out
}
