//! Two-stage training: supervised HOI-encoder optimization, then caption
//! fine-tuning with a frozen encoder, plus checkpointing and deterministic
//! inference over a manifest.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, CKPT_VERSION};

use crate::data::{DatasetManifest, DatasetRecord, HoiPairRecord, THREAT_ACTION_IDS};
use crate::decoder::{
    self, caption_trainable_params, generate, init_decoder, lm_loss, teacher_forced_step,
    GenerationConfig, Tokenizer, BOS, EOS,
};
use crate::encoder::{
    decode_predictions, encode_backbone, encoder_forward, init_encoder, loss_hungarian,
    DecodedTriple,
};
use crate::fusion::{fuse, fusion_param_names, init_fusion};
use crate::nn::{AdamW, ParamStore, Session};
use crate::{Error, Result};
use crate::autodiff::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Hoi,
    Caption,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Hoi => "hoi",
            Stage::Caption => "caption",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub without_hoi_tag: bool,
    #[serde(default)]
    pub without_pos: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr_hoi: f64,
    pub lr_caption: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablations: AblationFlags,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Unfreezes the whole decoder during the caption stage.
    pub train_full_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            stage: Stage::Hoi,
            epochs: 10,
            lr_hoi: 5e-6,
            lr_caption: 1e-4,
            batch_size: 8,
            seed: 0,
            ablations: AblationFlags::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            train_full_decoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.lr_hoi <= 0.0 || self.lr_caption <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> AdamW {
        let mut opt = AdamW::new(lr, self.weight_decay);
        opt.beta1 = self.beta1;
        opt.beta2 = self.beta2;
        opt.eps = self.eps;
        opt.clip_norm = self.grad_clip;
        opt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRow {
    pub step: u64,
    pub stage: String,
    pub loss_total: f64,
    pub loss_loc: f64,
    pub loss_act: f64,
    pub loss_box: f64,
    pub loss_lm: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    rows: Vec<TrainStepRow>,
}

impl TrainLog {
    pub fn new() -> TrainLog {
        TrainLog::default()
    }

    pub fn push(&mut self, row: TrainStepRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.step > last.step, "step index must be monotone");
        }
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[TrainStepRow] {
        &self.rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<TrainLog> {
        let mut r = csv::Reader::from_path(path)?;
        let mut log = TrainLog::new();
        for row in r.deserialize() {
            log.push(row?);
        }
        Ok(log)
    }
}

/// Ground-truth tags for tag-level teacher forcing: one triple per ground
/// truth (pair, action), confidence 1. The without-hoi-tag ablation yields
/// an empty set.
pub fn ground_truth_tags(record: &HoiPairRecord, without_hoi_tag: bool) -> Vec<DecodedTriple> {
    if without_hoi_tag {
        return Vec::new();
    }
    let mut tags = Vec::new();
    for t in &record.triples {
        for &a in &t.action_ids {
            tags.push(DecodedTriple {
                h_class: record.entities[t.human_idx].class_id,
                o_class: record.entities[t.object_idx].class_id,
                action_id: a,
                confidence: 1.0,
            });
        }
    }
    tags
}

fn check_finite(step: u64, name: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged { step: step as usize, detail: format!("{name} is {value}") });
    }
    Ok(())
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match into.get_mut(&name) {
            Some(t) => t.add_assign(&g),
            None => {
                into.insert(name, g);
            }
        }
    }
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, k: f64) {
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= k;
        }
    }
}

fn shuffled_epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Initializes every parameter of the full model from one seed.
pub fn init_model(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_encoder(&mut store, &config.encoder, seed);
    init_fusion(&mut store, &config.fusion, seed);
    init_decoder(&mut store, &config.decoder, seed);
    store
}

/// Stage 1: supervised HOI-encoder training against the Hungarian loss.
/// Saves a rolling checkpoint (`hoi.ckpt`) and the train log
/// (`train-hoi.csv`) into `out_dir` each epoch.
pub fn train_hoi_stage(
    manifest: &DatasetManifest,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    model.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::config("training manifest is empty"));
    }
    fs::create_dir_all(out_dir)?;
    let mut store = init_model(model, cfg.seed);
    let mut opt = cfg.optimizer(cfg.lr_hoi);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::new();
    let mut step: u64 = 0;
    let ckpt_path = out_dir.join("hoi.ckpt");
    for _epoch in 0..cfg.epochs {
        let order = shuffled_epoch_order(manifest.records.len(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let started = Instant::now();
            let mut grads = BTreeMap::new();
            let mut sums = [0.0f64; 4];
            for &i in batch {
                let record = &manifest.records[i];
                let tape = Tape::new();
                let s = Session::new(&tape, &store);
                let graph = encoder_forward(&s, &model.encoder, &record.image)?;
                if !(graph.sim_h.value().is_finite()
                    && graph.sim_o.value().is_finite()
                    && graph.a_probs.value().is_finite()
                    && graph.boxes.value().is_finite()
                    && graph.class_logits.value().is_finite())
                {
                    return Err(Error::Diverged {
                        step: step as usize,
                        detail: "encoder forward produced non-finite outputs".into(),
                    });
                }
                let lg = loss_hungarian(&graph, &record.pair, &model.encoder)?;
                check_finite(step, "loss_total", lg.breakdown.loss_total)?;
                check_finite(step, "objective", lg.objective.item())?;
                sums[0] += lg.breakdown.loss_total;
                sums[1] += lg.breakdown.loss_loc;
                sums[2] += lg.breakdown.loss_act;
                sums[3] += lg.breakdown.loss_box;
                let g = tape.backward(lg.objective);
                accumulate(&mut grads, s.collect_grads(&g));
            }
            let n = batch.len() as f64;
            scale_grads(&mut grads, 1.0 / n);
            opt.step(&mut store, &grads, |name| name.starts_with("enc."));
            log.push(TrainStepRow {
                step,
                stage: Stage::Hoi.name().into(),
                loss_total: sums[0] / n,
                loss_loc: sums[1] / n,
                loss_act: sums[2] / n,
                loss_box: sums[3] / n,
                loss_lm: 0.0,
                lr: cfg.lr_hoi,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        save_checkpoint(&ckpt_path, model, &store)?;
        log.write_csv(&out_dir.join("train-hoi.csv"))?;
    }
    Ok((Checkpoint { config: model.clone(), params: store }, log))
}

fn caption_sequence(tok: &Tokenizer, text: &str, max_len: usize) -> Result<Vec<usize>> {
    let mut seq = vec![BOS];
    seq.extend(tok.tokenize(text));
    seq.push(EOS);
    if seq.len() > max_len {
        return Err(Error::invariant(format!(
            "caption needs {} tokens, decoder max_len is {max_len}",
            seq.len()
        )));
    }
    Ok(seq)
}

/// Stage 2: freezes the HOI encoder and trains the projectors plus the
/// unfrozen decoder subset against lm_loss, teacher-forcing ground-truth
/// tags. Saves `caption.ckpt` and `train-caption.csv` into `out_dir`.
pub fn train_caption_stage(
    manifest: &DatasetManifest,
    hoi_ckpt: Checkpoint,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::config("training manifest is empty"));
    }
    fs::create_dir_all(out_dir)?;
    let mut model = hoi_ckpt.config.clone();
    model.without_hoi_tag = cfg.ablations.without_hoi_tag;
    model.fusion.without_pos = cfg.ablations.without_pos;
    model.validate()?;
    let tok = Tokenizer::closed();
    if model.decoder.vocab_size != tok.vocab_size() {
        return Err(Error::config(format!(
            "checkpoint vocab {} != tokenizer vocab {}",
            model.decoder.vocab_size,
            tok.vocab_size()
        )));
    }
    let mut store = hoi_ckpt.params;
    for sentinel in ["enc.entity_q", "fus.vproj.l1.w", "dec.tok_emb"] {
        if !store.contains(sentinel) {
            return Err(Error::config(format!("checkpoint missing parameter {sentinel}")));
        }
    }
    let mut trainable: HashSet<String> = fusion_param_names(&model.fusion).into_iter().collect();
    trainable.extend(caption_trainable_params(&model.decoder));
    let full_decoder = cfg.train_full_decoder;
    let is_trainable =
        move |name: &str| trainable.contains(name) || (full_decoder && name.starts_with("dec."));

    let mut opt = cfg.optimizer(cfg.lr_caption);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::new();
    let mut step: u64 = 0;
    let ckpt_path = out_dir.join("caption.ckpt");
    for _epoch in 0..cfg.epochs {
        let order = shuffled_epoch_order(manifest.records.len(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let started = Instant::now();
            let mut grads = BTreeMap::new();
            let mut lm_sum = 0.0;
            for &i in batch {
                let record = &manifest.records[i];
                let tape = Tape::new();
                let s = Session::new(&tape, &store);
                let features = encode_backbone(&s, &model.encoder, &record.image)?;
                let tags = ground_truth_tags(&record.pair, model.without_hoi_tag);
                let fused =
                    fuse(&s, &model.fusion, features, s.p("dec.tok_emb"), &tags, &tok)?;
                let seq = caption_sequence(&tok, &record.caption.text, model.decoder.max_len)?;
                let logits =
                    teacher_forced_step(&s, &model.decoder, Some(fused.tokens), &seq[..seq.len() - 1])?;
                let loss = lm_loss(logits, &seq[1..])?;
                check_finite(step, "loss_lm", loss.item())?;
                lm_sum += loss.item();
                let g = tape.backward(loss);
                accumulate(&mut grads, s.collect_grads(&g));
            }
            let n = batch.len() as f64;
            scale_grads(&mut grads, 1.0 / n);
            opt.step(&mut store, &grads, |name| is_trainable(name));
            log.push(TrainStepRow {
                step,
                stage: Stage::Caption.name().into(),
                loss_total: lm_sum / n,
                loss_loc: 0.0,
                loss_act: 0.0,
                loss_box: 0.0,
                loss_lm: lm_sum / n,
                lr: cfg.lr_caption,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        save_checkpoint(&ckpt_path, &model, &store)?;
        log.write_csv(&out_dir.join("train-caption.csv"))?;
    }
    Ok((Checkpoint { config: model, params: store }, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub image_id: String,
    pub tags: Vec<String>,
    pub caption: String,
    pub is_threat_pred: bool,
}

/// Deployed path: encode, decode triples, serialize tags, fuse, generate.
/// Writes one JSON line per record in manifest order.
pub fn run_inference(
    manifest: &DatasetManifest,
    ckpt: &Checkpoint,
    gen: &GenerationConfig,
    act_threshold: f64,
    ent_threshold: f64,
    out_path: &Path,
) -> Result<Vec<InferenceRecord>> {
    gen.validate()?;
    ckpt.config.validate()?;
    let tok = Tokenizer::closed();
    if ckpt.config.decoder.vocab_size != tok.vocab_size() {
        return Err(Error::config(format!(
            "checkpoint vocab {} != tokenizer vocab {}",
            ckpt.config.decoder.vocab_size,
            tok.vocab_size()
        )));
    }
    let mut out = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        out.push(infer_one(record, ckpt, gen, act_threshold, ent_threshold, &tok)?);
    }
    let mut body = String::new();
    for rec in &out {
        body.push_str(&serde_json::to_string(rec)?);
        body.push('\n');
    }
    let mut f = fs::File::create(out_path)?;
    f.write_all(body.as_bytes())?;
    Ok(out)
}

fn infer_one(
    record: &DatasetRecord,
    ckpt: &Checkpoint,
    gen: &GenerationConfig,
    act_threshold: f64,
    ent_threshold: f64,
    tok: &Tokenizer,
) -> Result<InferenceRecord> {
    let model = &ckpt.config;
    let tape = Tape::new();
    let s = Session::new(&tape, &ckpt.params);
    let graph = encoder_forward(&s, &model.encoder, &record.image)?;
    let pred = graph.prediction();
    let triples = decode_predictions(&pred, act_threshold, ent_threshold)?;
    let is_threat_pred = triples.iter().any(|t| THREAT_ACTION_IDS.contains(&t.action_id));
    let tags: Vec<DecodedTriple> = if model.without_hoi_tag { Vec::new() } else { triples };
    let features = encode_backbone(&s, &model.encoder, &record.image)?;
    let fused = fuse(&s, &model.fusion, features, s.p("dec.tok_emb"), &tags, tok)?;
    let ids = generate(&s, &model.decoder, Some(fused.tokens), gen)?;
    let caption = tok.detokenize(&ids);
    Ok(InferenceRecord {
        image_id: record.pair.image_id.clone(),
        tags: tags.iter().take(model.fusion.max_tags).map(decoder::tag_string).collect(),
        caption,
        is_threat_pred,
    })
}
