//! Closed-vocabulary whitespace tokenizer with punctuation splitting.

use crate::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const HOI: usize = 3;
pub const SEP: usize = 4;
pub const UNK: usize = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[HOI]", "[SEP]", "[UNK]"];

/// Caption grammar words beyond entity and action names.
const GRAMMAR_WORDS: [&str; 25] = [
    "The",
    "scene",
    "contains",
    "and",
    "This",
    "is",
    "a",
    "threatening",
    "normal",
    "No",
    "interaction",
    "observed",
    "the",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "many",
    ",",
    ".",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// The canonical tokenizer over the closed caption grammar.
    pub fn closed() -> Tokenizer {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(GRAMMAR_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(crate::data::ENTITY_CLASSES.iter().map(|s| s.to_string()));
        tokens.extend(crate::data::ACTIONS.iter().map(|s| s.to_string()));
        Tokenizer::from_tokens(tokens).expect("canonical vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Tokenizer> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::config("vocabulary is missing the special tokens"));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::config(format!(
                    "vocabulary slot {i} holds {:?}, expected special token {s:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("vocabulary token {i} {t:?} is not a single word")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("vocabulary token {t:?} appears twice")));
            }
        }
        Ok(Tokenizer { tokens, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace, detaching trailing `.` and `,` into their own
    /// tokens. Words outside the vocabulary map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            let mut word = chunk;
            let mut puncts = Vec::new();
            while word.len() > 1 && (word.ends_with('.') || word.ends_with(',')) {
                puncts.push(&word[word.len() - 1..]);
                word = &word[..word.len() - 1];
            }
            ids.push(self.id(word).unwrap_or(UNK));
            for p in puncts.iter().rev() {
                ids.push(self.id(p).unwrap_or(UNK));
            }
        }
        ids
    }

    /// Inverse of [`Tokenizer::tokenize`] on grammar output: punctuation
    /// attaches to the preceding word, everything else is space separated.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            if tok == "." || tok == "," {
                out.push_str(tok);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Tokenizer::from_tokens(tokens)
    }
}
