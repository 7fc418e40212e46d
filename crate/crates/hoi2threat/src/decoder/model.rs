//! The caption decoder model: causal transformer over the caption prefix
//! with cross-attention into fused context, the language-modeling loss, and
//! greedy/beam generation.

use super::tokenizer::{BOS, EOS, PAD};
use crate::autodiff::Var;
use crate::nn::{self, ParamStore, Session};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_f: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> DecoderConfig {
        DecoderConfig { d_f: 128, layers: 2, heads: 4, max_len: 64, vocab_size: 43 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_f % self.heads != 0 || self.heads == 0 {
            return Err(Error::config(format!(
                "d_f {} not divisible into {} heads",
                self.d_f, self.heads
            )));
        }
        if self.d_f % 2 != 0 {
            return Err(Error::config("d_f must be even for sinusoidal positions"));
        }
        if self.layers == 0 || self.max_len < 2 || self.vocab_size <= PAD.max(BOS).max(EOS) {
            return Err(Error::config("decoder needs layers >= 1, max_len >= 2, full vocab"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub mode: GenerationMode,
    pub beam_width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> GenerationConfig {
        GenerationConfig { mode: GenerationMode::Greedy, beam_width: 1, max_len: 64, length_penalty: 0.6 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam width must be >= 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("generation max_len must be >= 1"));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(Error::config(format!("bad length penalty {}", self.length_penalty)));
        }
        Ok(())
    }
}

pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, seed: u64) {
    nn::init_embedding(store, "dec.tok_emb", cfg.vocab_size, cfg.d_f, seed);
    for l in 0..cfg.layers {
        let p = format!("dec.l{l}");
        nn::init_mha(store, &format!("{p}.self"), cfg.d_f, seed);
        nn::init_mha(store, &format!("{p}.cross"), cfg.d_f, seed);
        for ln in ["ln1", "ln2", "ln3", "lnkv"] {
            nn::init_layer_norm(store, &format!("{p}.{ln}"), cfg.d_f);
        }
        nn::init_linear(store, &format!("{p}.ffn.l1"), cfg.d_f, 2 * cfg.d_f, seed);
        nn::init_linear(store, &format!("{p}.ffn.l2"), 2 * cfg.d_f, cfg.d_f, seed);
    }
    nn::init_layer_norm(store, "dec.lnf", cfg.d_f);
    nn::init_linear(store, "dec.out", cfg.d_f, cfg.vocab_size, seed);
}

/// The subset left trainable during caption fine-tuning: cross-attention
/// sublayers (with their norms) and the output head.
pub fn caption_trainable_params(cfg: &DecoderConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            names.push(format!("dec.l{l}.cross.{proj}.w"));
            names.push(format!("dec.l{l}.cross.{proj}.b"));
        }
        for ln in ["ln2", "lnkv"] {
            names.push(format!("dec.l{l}.{ln}.g"));
            names.push(format!("dec.l{l}.{ln}.b"));
        }
    }
    names.push("dec.out.w".into());
    names.push("dec.out.b".into());
    names
}

/// One teacher-forced pass: logits [len, vocab] where row i predicts
/// prefix[i + 1]. The prefix must start with [BOS]; `context` may have zero
/// rows, in which case cross-attention is skipped.
pub fn teacher_forced_step<'t>(
    s: &Session<'t, '_>,
    cfg: &DecoderConfig,
    context: Option<Var<'t>>,
    prefix: &[usize],
) -> Result<Var<'t>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::invariant("caption prefix must start with [BOS]"));
    }
    if prefix.len() > cfg.max_len {
        return Err(Error::invariant(format!(
            "prefix length {} exceeds max_len {}",
            prefix.len(),
            cfg.max_len
        )));
    }
    for &id in prefix {
        if id >= cfg.vocab_size {
            return Err(Error::invariant(format!("token id {id} outside vocabulary")));
        }
    }
    let t = prefix.len();
    let emb = s.p("dec.tok_emb").gather_rows(prefix);
    let pos = s.tape().constant(nn::sinusoid_1d(t, cfg.d_f));
    let mut x = emb.add(&pos);
    let mask = nn::causal_mask(t);
    let context = context.filter(|c| c.shape()[0] > 0);
    for l in 0..cfg.layers {
        let p = format!("dec.l{l}");
        let xn = nn::layer_norm(s, &format!("{p}.ln1"), x);
        let (sa, _) = nn::mha(s, &format!("{p}.self"), xn, xn, cfg.heads, Some(&mask));
        x = x.add(&sa);
        if let Some(ctx) = context {
            let q = nn::layer_norm(s, &format!("{p}.ln2"), x);
            let kv = nn::layer_norm(s, &format!("{p}.lnkv"), ctx);
            let (ca, _) = nn::mha(s, &format!("{p}.cross"), q, kv, cfg.heads, None);
            x = x.add(&ca);
        }
        let f = nn::layer_norm(s, &format!("{p}.ln3"), x);
        x = x.add(&nn::mlp2(s, &format!("{p}.ffn"), f));
    }
    Ok(nn::linear(s, "dec.out", nn::layer_norm(s, "dec.lnf", x)))
}

/// Mean over non-PAD positions of -log softmax(logits)[target].
pub fn lm_loss<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    if logits.shape()[0] != targets.len() {
        return Err(Error::invariant(format!(
            "{} logit rows vs {} targets",
            logits.shape()[0],
            targets.len()
        )));
    }
    let keep: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != PAD).collect();
    if keep.is_empty() {
        return Err(Error::invariant("all-PAD target sequence"));
    }
    let picked: Vec<usize> = keep.iter().map(|&i| targets[i]).collect();
    let n = keep.len() as f64;
    Ok(logits.gather_rows(&keep).log_softmax_rows().pick_per_row(&picked).sum().scale(-1.0 / n))
}

fn argmax_ties_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn last_row_log_probs(logits: &Var<'_>) -> Vec<f64> {
    let v = logits.value();
    let (rows, cols) = (v.rows(), v.cols());
    let row: Vec<f64> = (0..cols).map(|c| v.at2(rows - 1, c)).collect();
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|x| x - lse).collect()
}

/// Autoregressive generation from [BOS]. Returns the content token ids:
/// [BOS] excluded, generation stops at [EOS] (dropped) or after max_len
/// content tokens. Deterministic; argmax ties resolve to the lowest id.
pub fn generate<'t>(
    s: &Session<'t, '_>,
    cfg: &DecoderConfig,
    context: Option<Var<'t>>,
    gen: &GenerationConfig,
) -> Result<Vec<usize>> {
    gen.validate()?;
    let limit = gen.max_len.min(cfg.max_len - 1);
    match gen.mode {
        GenerationMode::Greedy if gen.beam_width == 1 => greedy(s, cfg, context, limit),
        GenerationMode::Greedy => {
            Err(Error::config("greedy mode requires beam_width 1"))
        }
        GenerationMode::Beam => beam(s, cfg, context, limit, gen),
    }
}

fn greedy<'t>(
    s: &Session<'t, '_>,
    cfg: &DecoderConfig,
    context: Option<Var<'t>>,
    limit: usize,
) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    while out.len() < limit {
        let logits = teacher_forced_step(s, cfg, context, &prefix)?;
        let lp = last_row_log_probs(&logits);
        let next = argmax_ties_low(&lp);
        if next == EOS {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}

#[derive(Clone)]
struct Beam {
    ids: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Beam {
    fn score(&self, penalty: f64) -> f64 {
        let len = (self.ids.len() - 1).max(1) as f64;
        self.log_prob / len.powf(penalty)
    }
}

fn beam<'t>(
    s: &Session<'t, '_>,
    cfg: &DecoderConfig,
    context: Option<Var<'t>>,
    limit: usize,
    gen: &GenerationConfig,
) -> Result<Vec<usize>> {
    let width = gen.beam_width;
    let mut beams = vec![Beam { ids: vec![BOS], log_prob: 0.0, finished: false }];
    while beams.iter().any(|b| !b.finished) {
        let mut next: Vec<Beam> = Vec::new();
        for b in &beams {
            if b.finished {
                next.push(b.clone());
                continue;
            }
            let logits = teacher_forced_step(s, cfg, context, &b.ids)?;
            let lp = last_row_log_probs(&logits);
            let mut ranked: Vec<usize> = (0..lp.len()).collect();
            ranked.sort_by(|&a, &c| lp[c].total_cmp(&lp[a]).then(a.cmp(&c)));
            for &tok in ranked.iter().take(width) {
                let mut ids = b.ids.clone();
                let finished = if tok == EOS {
                    true
                } else {
                    ids.push(tok);
                    ids.len() - 1 >= limit
                };
                next.push(Beam { ids, log_prob: b.log_prob + lp[tok], finished });
            }
        }
        next.sort_by(|a, b| {
            b.score(gen.length_penalty)
                .total_cmp(&a.score(gen.length_penalty))
                .then(a.ids.cmp(&b.ids))
        });
        next.truncate(width);
        beams = next;
    }
    beams.sort_by(|a, b| {
        b.score(gen.length_penalty)
            .total_cmp(&a.score(gen.length_penalty))
            .then(a.ids.cmp(&b.ids))
    });
    Ok(beams[0].ids[1..].to_vec())
}
