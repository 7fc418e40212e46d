//! Image-HOI fusion: projects visual features and tag embeddings into a
//! shared space, adds position information, and refines the tag side with
//! cross-attention over the visual tokens.

use crate::autodiff::{concat_rows, Tensor, Var};
use crate::decoder::{order_triples, triple_words, Tokenizer, UNK};
use crate::encoder::DecodedTriple;
use crate::nn::{self, param_rng, ParamStore, Session};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_visual: usize,
    pub d_f: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_tags: usize,
    pub without_pos: bool,
}

impl Default for FusionConfig {
    fn default() -> FusionConfig {
        FusionConfig { d_visual: 64, d_f: 128, layers: 2, heads: 4, max_tags: 8, without_pos: false }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_f % 4 != 0 {
            return Err(Error::config(format!("d_f {} must be divisible by 4", self.d_f)));
        }
        if self.d_f % self.heads != 0 || self.heads == 0 {
            return Err(Error::config(format!(
                "d_f {} not divisible into {} heads",
                self.d_f, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("fusion needs at least one layer"));
        }
        if self.d_visual == 0 || self.max_tags == 0 {
            return Err(Error::config("d_visual and max_tags must be positive"));
        }
        Ok(())
    }
}

/// Fusion output: visual tokens followed by refined tag tokens, plus the
/// per-layer cross-attention maps [T, G^2].
pub struct FusedFeatures<'t> {
    pub tokens: Var<'t>,
    pub visual_len: usize,
    pub tag_len: usize,
    pub attention: Vec<Tensor>,
}

pub fn init_fusion(store: &mut ParamStore, cfg: &FusionConfig, seed: u64) {
    nn::init_linear(store, "fus.vproj.l1", cfg.d_visual, cfg.d_f, seed);
    nn::init_linear(store, "fus.vproj.l2", cfg.d_f, cfg.d_f, seed);
    nn::init_linear(store, "fus.tproj.l1", cfg.d_f, cfg.d_f, seed);
    nn::init_linear(store, "fus.tproj.l2", cfg.d_f, cfg.d_f, seed);
    let mut rng = param_rng(seed, "fus.tag_type");
    let data: Vec<f64> = (0..cfg.d_f).map(|_| rng.gen_range(-0.05..0.05)).collect();
    store.insert("fus.tag_type", Tensor::new(&[cfg.d_f], data));
    for l in 0..cfg.layers {
        let p = format!("fus.x{l}");
        nn::init_mha(store, &format!("{p}.attn"), cfg.d_f, seed);
        nn::init_layer_norm(store, &format!("{p}.ln_q"), cfg.d_f);
        nn::init_layer_norm(store, &format!("{p}.ln_kv"), cfg.d_f);
        nn::init_layer_norm(store, &format!("{p}.ln2"), cfg.d_f);
        nn::init_linear(store, &format!("{p}.ffn.l1"), cfg.d_f, 2 * cfg.d_f, seed);
        nn::init_linear(store, &format!("{p}.ffn.l2"), 2 * cfg.d_f, cfg.d_f, seed);
    }
    nn::init_layer_norm(store, "fus.lnf", cfg.d_f);
}

/// Names of every fusion parameter (the non-frozen set during fine-tuning).
pub fn fusion_param_names(cfg: &FusionConfig) -> Vec<String> {
    let mut names = vec![
        "fus.vproj.l1.w".into(),
        "fus.vproj.l1.b".into(),
        "fus.vproj.l2.w".into(),
        "fus.vproj.l2.b".into(),
        "fus.tproj.l1.w".into(),
        "fus.tproj.l1.b".into(),
        "fus.tproj.l2.w".into(),
        "fus.tproj.l2.b".into(),
        "fus.tag_type".into(),
    ];
    for l in 0..cfg.layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            names.push(format!("fus.x{l}.attn.{proj}.w"));
            names.push(format!("fus.x{l}.attn.{proj}.b"));
        }
        for ln in ["ln_q", "ln_kv", "ln2"] {
            names.push(format!("fus.x{l}.{ln}.g"));
            names.push(format!("fus.x{l}.{ln}.b"));
        }
        for lin in ["ffn.l1", "ffn.l2"] {
            names.push(format!("fus.x{l}.{lin}.w"));
            names.push(format!("fus.x{l}.{lin}.b"));
        }
    }
    names.push("fus.lnf.g".into());
    names.push("fus.lnf.b".into());
    names
}

/// Two-layer projection W2 relu(W1 x + b1) + b2 into the shared space,
/// checking the input dimension against the registered weights.
pub fn project<'t>(s: &Session<'t, '_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let expect = s.p(&format!("{prefix}.l1.w")).shape()[0];
    let got = x.shape()[1];
    if got != expect {
        return Err(Error::config(format!("{prefix}: input dim {got}, expected {expect}")));
    }
    Ok(nn::mlp2(s, prefix, x))
}

/// Adds fixed 2-D sinusoids to the visual tokens and the learned type
/// embedding to the tag tokens; identity when without_pos is set.
pub fn embed_positions<'t>(
    s: &Session<'t, '_>,
    cfg: &FusionConfig,
    visual: Var<'t>,
    tags: Option<Var<'t>>,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    if cfg.without_pos {
        return Ok((visual, tags));
    }
    let n = visual.shape()[0];
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::config(format!("visual token count {n} is not a square grid")));
    }
    let pos = s.tape().constant(nn::sinusoid_2d(g, cfg.d_f));
    let visual = visual.add(&pos);
    let tags = tags.map(|t| t.add_bias(&s.p("fus.tag_type")));
    Ok((visual, tags))
}

/// Mean-pooled embedding per decoded triple from the caption decoder's token
/// table, ordered by descending confidence, truncated to max_tags. Returns
/// None when no triples survive.
pub fn embed_tags<'t>(
    table: Var<'t>,
    triples: &[DecodedTriple],
    tok: &Tokenizer,
    max_tags: usize,
) -> Option<Var<'t>> {
    let order = order_triples(triples);
    let kept = &order[..order.len().min(max_tags)];
    if kept.is_empty() {
        return None;
    }
    let pooled: Vec<Var<'t>> = kept
        .iter()
        .map(|&i| {
            let ids: Vec<usize> = triple_words(&triples[i])
                .iter()
                .map(|w| tok.id(w).unwrap_or(UNK))
                .collect();
            table.gather_rows(&ids).mean0()
        })
        .collect();
    Some(concat_rows(&pooled))
}

/// One stack of cross-attention blocks: tag queries over visual keys/values,
/// pre-norm residual form. Returns the refined tags and per-layer attention.
pub fn cross_attend<'t>(
    s: &Session<'t, '_>,
    cfg: &FusionConfig,
    tags: Var<'t>,
    visual: Var<'t>,
    key_mask: Option<&[bool]>,
) -> Result<(Var<'t>, Vec<Tensor>)> {
    let n_keys = visual.shape()[0];
    if n_keys == 0 {
        return Err(Error::config("cross-attention needs at least one visual token"));
    }
    let mask = key_mask.map(|keep| {
        assert_eq!(keep.len(), n_keys);
        let mut m = Tensor::zeros(&[tags.shape()[0], n_keys]);
        for (c, &k) in keep.iter().enumerate() {
            if !k {
                for r in 0..tags.shape()[0] {
                    m.set2(r, c, -1e30);
                }
            }
        }
        m
    });
    let mut q = tags;
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("fus.x{l}");
        let qn = nn::layer_norm(s, &format!("{p}.ln_q"), q);
        let kvn = nn::layer_norm(s, &format!("{p}.ln_kv"), visual);
        let (ctx, attn) = nn::mha(s, &format!("{p}.attn"), qn, kvn, cfg.heads, mask.as_ref());
        q = q.add(&ctx);
        let ffn_in = nn::layer_norm(s, &format!("{p}.ln2"), q);
        q = q.add(&nn::mlp2(s, &format!("{p}.ffn"), ffn_in));
        attention.push(attn);
    }
    Ok((nn::layer_norm(s, "fus.lnf", q), attention))
}

/// Full fusion pass: project both sides, add positions, cross-attend, and
/// concatenate visual tokens with refined tag tokens. With no triples the
/// output is the visual tokens alone.
pub fn fuse<'t>(
    s: &Session<'t, '_>,
    cfg: &FusionConfig,
    visual_features: Var<'t>,
    tag_table: Var<'t>,
    triples: &[DecodedTriple],
    tok: &Tokenizer,
) -> Result<FusedFeatures<'t>> {
    cfg.validate()?;
    let visual = project(s, "fus.vproj", visual_features)?;
    let tags = match embed_tags(tag_table, triples, tok, cfg.max_tags) {
        Some(e) => Some(project(s, "fus.tproj", e)?),
        None => None,
    };
    let (visual, tags) = embed_positions(s, cfg, visual, tags)?;
    let visual_len = visual.shape()[0];
    match tags {
        Some(t) => {
            let (refined, attention) = cross_attend(s, cfg, t, visual, None)?;
            let tag_len = refined.shape()[0];
            Ok(FusedFeatures {
                tokens: concat_rows(&[visual, refined]),
                visual_len,
                tag_len,
                attention,
            })
        }
        None => Ok(FusedFeatures { tokens: visual, visual_len, tag_len: 0, attention: vec![] }),
    }
}
