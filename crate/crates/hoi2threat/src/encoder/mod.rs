//! Set-prediction HOI encoder: shared CNN backbone, parallel entity and
//! behavior decoders, cosine HOI pointers, and prediction heads.

mod loss;

pub use loss::{
    bce_rows, entity_match, loss_act, loss_box_pairs, loss_hungarian, loss_loc, loss_loc_graph,
    LossBreakdown, LossGraph, BCE_EPS,
};

use crate::autodiff::{Tensor, Var};
use crate::data::SceneImage;
use crate::nn::{self, ParamStore, Session};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub d: usize,
    /// M entity query slots.
    pub entity_queries: usize,
    /// K interaction query slots.
    pub interaction_queries: usize,
    /// C entity classes (a no-entity class is added internally).
    pub num_classes: usize,
    /// Gamma action classes.
    pub num_actions: usize,
    pub layers: usize,
    pub heads: usize,
    /// Total spatial downsampling of the backbone; must be a power of two.
    pub stride: usize,
    /// Contrastive temperature for the localization loss.
    pub tau: f64,
    /// Weight of the box loss term.
    pub lambda_box: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            resolution: 64,
            d: 64,
            entity_queries: 8,
            interaction_queries: 8,
            num_classes: 6,
            num_actions: 6,
            layers: 2,
            heads: 4,
            stride: 8,
            tau: 0.1,
            lambda_box: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.resolution / self.stride
    }

    fn conv_widths(&self) -> Vec<usize> {
        let n = self.stride.trailing_zeros() as usize;
        (1..=n).map(|i| (self.d >> (n - i)).max(8)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return Err(Error::config(format!("stride {} must be a power of two >= 2", self.stride)));
        }
        if self.resolution % self.stride != 0 || self.grid() == 0 {
            return Err(Error::config(format!(
                "resolution {} is not divisible into a grid by stride {}",
                self.resolution, self.stride
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(format!("d {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.d % 4 != 0 {
            return Err(Error::config(format!("d {} must be a multiple of 4 for 2D positions", self.d)));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::config(format!("tau {} must be positive", self.tau)));
        }
        if self.entity_queries == 0 || self.interaction_queries == 0 {
            return Err(Error::config("query counts must be positive"));
        }
        Ok(())
    }
}

/// Entity decoder outputs, concrete form.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRepresentation {
    /// [M, d] slot vectors.
    pub mu: Tensor,
    /// [M, C+1] logits, last column is no-entity.
    pub class_logits: Tensor,
    /// [M, 4] corner boxes in [0, 1].
    pub boxes: Tensor,
}

/// Behavior decoder outputs, concrete form.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorRepresentation {
    /// [K, d] slot vectors.
    pub z: Tensor,
}

/// Pointer head outputs, concrete form.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiPointerOutput {
    pub v_h: Tensor,
    pub v_o: Tensor,
    /// [K, M] cosine similarities in [-1, 1].
    pub sim_h: Tensor,
    pub sim_o: Tensor,
    /// Argmax entity slot per interaction slot, ties to the lowest index.
    pub c_hat_h: Vec<usize>,
    pub c_hat_o: Vec<usize>,
}

/// Per-slot triple predictions resolved through the pointers.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiPrediction {
    pub b_h: Tensor,
    pub b_o: Tensor,
    pub h_class: Vec<usize>,
    pub o_class: Vec<usize>,
    pub h_conf: Vec<f64>,
    pub o_conf: Vec<f64>,
    /// [K, gamma] action probabilities.
    pub a_probs: Tensor,
}

/// One thresholded, deduplicated triple.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTriple {
    pub h_class: usize,
    pub o_class: usize,
    pub action_id: usize,
    pub confidence: f64,
}

/// Live autodiff handles for one forward pass.
pub struct EncoderGraph<'t> {
    pub features: Var<'t>,
    pub mu: Var<'t>,
    pub class_logits: Var<'t>,
    pub boxes: Var<'t>,
    pub z: Var<'t>,
    pub v_h: Var<'t>,
    pub v_o: Var<'t>,
    pub sim_h: Var<'t>,
    pub sim_o: Var<'t>,
    pub a_probs: Var<'t>,
}

impl EncoderGraph<'_> {
    pub fn entity_representation(&self) -> EntityRepresentation {
        EntityRepresentation {
            mu: self.mu.value(),
            class_logits: self.class_logits.value(),
            boxes: self.boxes.value(),
        }
    }

    pub fn behavior_representation(&self) -> BehaviorRepresentation {
        BehaviorRepresentation { z: self.z.value() }
    }

    pub fn pointer_output(&self) -> HoiPointerOutput {
        pointer_output(self.v_h.value(), self.v_o.value(), self.sim_h.value(), self.sim_o.value())
    }

    pub fn prediction(&self) -> HoiPrediction {
        predict_triples(&self.pointer_output(), &self.entity_representation(), &self.a_probs.value())
    }
}

/// Registers every encoder parameter under the `enc.` prefix.
pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let d = cfg.d;
    let mut c_in = 3;
    for (i, width) in cfg.conv_widths().into_iter().enumerate() {
        nn::init_conv(store, &format!("enc.backbone.conv{i}"), c_in, width, 3, seed);
        c_in = width;
    }
    nn::init_embedding(store, "enc.entity_q", cfg.entity_queries, d, seed);
    nn::init_embedding(store, "enc.behavior_q", cfg.interaction_queries, d, seed);
    init_decoder_stack(store, "enc.ent_dec", d, cfg.layers, seed);
    init_decoder_stack(store, "enc.beh_dec", d, cfg.layers, seed);
    nn::init_linear(store, "enc.entity_class", d, cfg.num_classes + 1, seed);
    nn::init_linear(store, "enc.entity_box", d, 4, seed);
    init_mlp2(store, "enc.ffn_h", d, d, d, seed);
    init_mlp2(store, "enc.ffn_o", d, d, d, seed);
    init_mlp2(store, "enc.ffn_act", d, d, cfg.num_actions, seed);
}

fn init_mlp2(store: &mut ParamStore, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, seed: u64) {
    nn::init_linear(store, &format!("{prefix}.l1"), d_in, d_hidden, seed);
    nn::init_linear(store, &format!("{prefix}.l2"), d_hidden, d_out, seed);
}

fn init_decoder_stack(store: &mut ParamStore, prefix: &str, d: usize, layers: usize, seed: u64) {
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        nn::init_mha(store, &format!("{p}.self"), d, seed);
        nn::init_mha(store, &format!("{p}.cross"), d, seed);
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_layer_norm(store, &format!("{p}.ln3"), d);
        nn::init_layer_norm(store, &format!("{p}.lnkv"), d);
        init_mlp2(store, &format!("{p}.ffn"), d, 2 * d, d, seed);
    }
    nn::init_layer_norm(store, &format!("{prefix}.lnf"), d);
}

/// Pre-LN transformer decoder over learned queries attending to `kv`.
fn decoder_stack<'t>(
    s: &Session<'t, '_>,
    prefix: &str,
    queries: Var<'t>,
    kv: Var<'t>,
    layers: usize,
    heads: usize,
) -> Var<'t> {
    let mut q = queries;
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        let qn = nn::layer_norm(s, &format!("{p}.ln1"), q);
        let (sa, _) = nn::mha(s, &format!("{p}.self"), qn, qn, heads, None);
        q = q.add(&sa);
        let qn = nn::layer_norm(s, &format!("{p}.ln2"), q);
        let kvn = nn::layer_norm(s, &format!("{p}.lnkv"), kv);
        let (ca, _) = nn::mha(s, &format!("{p}.cross"), qn, kvn, heads, None);
        q = q.add(&ca);
        let ff = nn::mlp2(s, &format!("{p}.ffn"), nn::layer_norm(s, &format!("{p}.ln3"), q));
        q = q.add(&ff);
    }
    nn::layer_norm(s, &format!("{prefix}.lnf"), q)
}

/// CNN backbone: stride-2 convolutions down to a [G*G, d] token grid
/// (row-major spatial order).
pub fn encode_backbone<'t>(
    s: &Session<'t, '_>,
    cfg: &EncoderConfig,
    image: &SceneImage,
) -> Result<Var<'t>> {
    cfg.validate()?;
    if image.resolution != cfg.resolution {
        return Err(Error::config(format!(
            "image resolution {} does not match configured resolution {}",
            image.resolution, cfg.resolution
        )));
    }
    let mut x = s.tape().constant(image.to_tensor());
    for i in 0..cfg.conv_widths().len() {
        let p = format!("enc.backbone.conv{i}");
        x = x.conv2d(&s.p(&format!("{p}.w")), &s.p(&format!("{p}.b")), 3, 2, 1).relu();
    }
    let g = cfg.grid();
    Ok(x.reshape(&[cfg.d, g * g]).t())
}

/// Fixed 2D sinusoidal embeddings for the backbone grid, [G*G, d].
pub fn grid_positions(cfg: &EncoderConfig) -> Tensor {
    nn::sinusoid_2d(cfg.grid(), cfg.d)
}

/// Entity decoder plus class and box heads over `kv` (features with
/// positions already added).
pub fn decode_entities<'t>(
    s: &Session<'t, '_>,
    cfg: &EncoderConfig,
    kv: Var<'t>,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let mu = decoder_stack(s, "enc.ent_dec", s.p("enc.entity_q"), kv, cfg.layers, cfg.heads);
    let class_logits = nn::linear(s, "enc.entity_class", mu);
    let boxes = loss::raw_to_corner_boxes(nn::linear(s, "enc.entity_box", mu));
    (mu, class_logits, boxes)
}

/// Behavior decoder over the same `kv`.
pub fn decode_behaviors<'t>(s: &Session<'t, '_>, cfg: &EncoderConfig, kv: Var<'t>) -> Var<'t> {
    decoder_stack(s, "enc.beh_dec", s.p("enc.behavior_q"), kv, cfg.layers, cfg.heads)
}

/// Row-wise cosine similarity, zero-norm rows giving 0 everywhere.
pub(crate) fn cosine_rows<'t>(v: &Var<'t>, mu: &Var<'t>) -> Var<'t> {
    v.normalize_rows(1e-12).matmul(&mu.normalize_rows(1e-12).t()).clamp(-1.0, 1.0)
}

/// Pointer FFNs and cosine similarity matrices: (v_h, v_o, sim_h, sim_o).
pub fn compute_pointers<'t>(
    s: &Session<'t, '_>,
    z: Var<'t>,
    mu: Var<'t>,
) -> (Var<'t>, Var<'t>, Var<'t>, Var<'t>) {
    let v_h = nn::mlp2(s, "enc.ffn_h", z);
    let v_o = nn::mlp2(s, "enc.ffn_o", z);
    let sim_h = cosine_rows(&v_h, &mu);
    let sim_o = cosine_rows(&v_o, &mu);
    (v_h, v_o, sim_h, sim_o)
}

/// Full encoder forward pass for one image.
pub fn encoder_forward<'t>(
    s: &Session<'t, '_>,
    cfg: &EncoderConfig,
    image: &SceneImage,
) -> Result<EncoderGraph<'t>> {
    let features = encode_backbone(s, cfg, image)?;
    let kv = features.add(&s.tape().constant(grid_positions(cfg)));
    let (mu, class_logits, boxes) = decode_entities(s, cfg, kv);
    let z = decode_behaviors(s, cfg, kv);
    let (v_h, v_o, sim_h, sim_o) = compute_pointers(s, z, mu);
    let a_probs = nn::mlp2(s, "enc.ffn_act", z).sigmoid();
    Ok(EncoderGraph { features, mu, class_logits, boxes, z, v_h, v_o, sim_h, sim_o, a_probs })
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

/// Assembles the pointer output struct, computing the argmax indices.
pub fn pointer_output(v_h: Tensor, v_o: Tensor, sim_h: Tensor, sim_o: Tensor) -> HoiPointerOutput {
    let k = sim_h.rows();
    let m = sim_h.cols();
    let pick = |sim: &Tensor| -> Vec<usize> {
        (0..k).map(|i| argmax_ties_low(&sim.data()[i * m..(i + 1) * m])).collect()
    };
    let c_hat_h = pick(&sim_h);
    let c_hat_o = pick(&sim_o);
    HoiPointerOutput { v_h, v_o, sim_h, sim_o, c_hat_h, c_hat_o }
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Resolves each interaction slot through its pointers: boxes and classes
/// come from the pointed entity slots, action probabilities from FFN_act.
pub fn predict_triples(
    pointers: &HoiPointerOutput,
    entities: &EntityRepresentation,
    a_probs: &Tensor,
) -> HoiPrediction {
    let k = pointers.c_hat_h.len();
    let num_classes = entities.class_logits.cols() - 1;
    let mut b_h = Tensor::zeros(&[k, 4]);
    let mut b_o = Tensor::zeros(&[k, 4]);
    let mut h_class = Vec::with_capacity(k);
    let mut o_class = Vec::with_capacity(k);
    let mut h_conf = Vec::with_capacity(k);
    let mut o_conf = Vec::with_capacity(k);
    let resolve = |slot: usize, b: &mut Tensor, i: usize| -> (usize, f64) {
        for c in 0..4 {
            b.set2(i, c, entities.boxes.at2(slot, c));
        }
        let logits: Vec<f64> = (0..num_classes + 1).map(|c| entities.class_logits.at2(slot, c)).collect();
        let probs = softmax_slice(&logits);
        let class = argmax_ties_low(&probs[..num_classes]);
        (class, probs[class])
    };
    for i in 0..k {
        let (c, p) = resolve(pointers.c_hat_h[i], &mut b_h, i);
        h_class.push(c);
        h_conf.push(p);
        let (c, p) = resolve(pointers.c_hat_o[i], &mut b_o, i);
        o_class.push(c);
        o_conf.push(p);
    }
    HoiPrediction { b_h, b_o, h_class, o_class, h_conf, o_conf, a_probs: a_probs.clone() }
}

/// Thresholds and deduplicates slot predictions into discrete triples,
/// sorted by descending confidence then ascending (h, o, a).
pub fn decode_predictions(
    pred: &HoiPrediction,
    act_threshold: f64,
    entity_conf_threshold: f64,
) -> Result<Vec<DecodedTriple>> {
    for (name, t) in [("act_threshold", act_threshold), ("entity_conf_threshold", entity_conf_threshold)] {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config(format!("{name} {t} must lie strictly inside (0, 1)")));
        }
    }
    let k = pred.h_class.len();
    let gamma = pred.a_probs.cols();
    let mut best: std::collections::BTreeMap<(usize, usize, usize), f64> = std::collections::BTreeMap::new();
    for i in 0..k {
        if pred.h_conf[i] < entity_conf_threshold || pred.o_conf[i] < entity_conf_threshold {
            continue;
        }
        for a in 0..gamma {
            let ap = pred.a_probs.at2(i, a);
            if ap < act_threshold {
                continue;
            }
            let conf = ap * pred.h_conf[i].min(pred.o_conf[i]);
            let key = (pred.h_class[i], pred.o_class[i], a);
            let slot = best.entry(key).or_insert(f64::NEG_INFINITY);
            if conf > *slot {
                *slot = conf;
            }
        }
    }
    let mut out: Vec<DecodedTriple> = best
        .into_iter()
        .map(|((h, o, a), confidence)| DecodedTriple { h_class: h, o_class: o, action_id: a, confidence })
        .collect();
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.h_class.cmp(&b.h_class))
            .then(a.o_class.cmp(&b.o_class))
            .then(a.action_id.cmp(&b.action_id))
    });
    Ok(out)
}
