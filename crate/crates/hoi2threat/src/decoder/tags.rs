//! HOI tag serialization: canonical ordering and the wire token form fed to
//! the fusion stage and reported in inference output.

use super::tokenizer::{Tokenizer, HOI, SEP, UNK};
use crate::data::{ACTIONS, ENTITY_CLASSES};
use crate::encoder::DecodedTriple;

/// Indices of `triples` sorted by descending confidence, ties broken by
/// ascending (h_class, o_class, action_id).
pub fn order_triples(triples: &[DecodedTriple]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..triples.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ta, tb) = (&triples[a], &triples[b]);
        tb.confidence
            .total_cmp(&ta.confidence)
            .then(ta.h_class.cmp(&tb.h_class))
            .then(ta.o_class.cmp(&tb.o_class))
            .then(ta.action_id.cmp(&tb.action_id))
    });
    idx
}

/// The three words naming a triple: human class, action, object class.
pub fn triple_words(t: &DecodedTriple) -> [&'static str; 3] {
    let name = |table: &[&'static str], id: usize| table.get(id).copied().unwrap_or("[UNK]");
    [name(&ENTITY_CLASSES, t.h_class), name(&ACTIONS, t.action_id), name(&ENTITY_CLASSES, t.o_class)]
}

/// Human-readable tag string, e.g. "person shoot gun".
pub fn tag_string(t: &DecodedTriple) -> String {
    triple_words(t).join(" ")
}

/// Serializes decoded triples to "[HOI] h a o [SEP] h a o [SEP] ..." token
/// ids, ordered by descending confidence then lexicographically. Empty input
/// yields the single [HOI] token; out-of-vocabulary words become [UNK] with
/// a warning.
pub fn serialize_hoi_tags(triples: &[DecodedTriple], tok: &Tokenizer) -> Vec<usize> {
    let mut out = vec![HOI];
    for &i in &order_triples(triples) {
        for word in triple_words(&triples[i]) {
            out.push(tok.id(word).unwrap_or_else(|| {
                log::warn!("tag word {word:?} not in vocabulary, using [UNK]");
                UNK
            }));
        }
        out.push(SEP);
    }
    out
}
