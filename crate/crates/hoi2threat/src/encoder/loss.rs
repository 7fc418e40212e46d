//! Training losses for the HOI encoder: two-sided contrastive localization,
//! multi-label action BCE, box regression, and their assembly through
//! Hungarian matching, plus the auxiliary entity criterion that grounds the
//! pointer targets.

use super::{EncoderConfig, EncoderGraph, HoiPointerOutput};
use crate::autodiff::{concat_cols, Tensor, Var};
use crate::data::HoiPairRecord;
use crate::hungarian::hungarian_match;
use crate::{Error, Result};

/// Probability clamp inside every BCE term.
pub const BCE_EPS: f64 = 1e-7;

const NO_ENTITY_WEIGHT: f64 = 0.1;

/// Concrete loss values for logging; `loss_total` excludes the entity
/// criterion by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub loss_loc: f64,
    pub loss_act: f64,
    pub loss_box: f64,
    pub loss_total: f64,
    pub tau: f64,
}

/// Loss graph for one record: differentiable scalars plus the assignments
/// that produced them.
pub struct LossGraph<'t> {
    pub loss_loc: Var<'t>,
    pub loss_act: Var<'t>,
    pub loss_box: Var<'t>,
    pub loss_total: Var<'t>,
    /// Auxiliary entity classification + box criterion (not part of loss_total).
    pub entity_loss: Var<'t>,
    /// loss_total + entity_loss; the quantity the trainer optimizes.
    pub objective: Var<'t>,
    /// (interaction slot, ground-truth triple index).
    pub assignment: Vec<(usize, usize)>,
    /// (entity slot, ground-truth entity index).
    pub entity_assignment: Vec<(usize, usize)>,
    pub breakdown: LossBreakdown,
}

fn log_softmax_f64(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|v| v - lse).collect()
}

fn bce_f64(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn multihot(action_ids: &[usize], gamma: usize) -> Vec<f64> {
    let mut v = vec![0.0; gamma];
    for &a in action_ids {
        v[a] = 1.0;
    }
    v
}

/// Mean binary cross-entropy over one probability row.
pub fn loss_act(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    probs.iter().zip(targets).map(|(&p, &t)| bce_f64(p, t)).sum::<f64>() / probs.len() as f64
}

/// Per-row mean BCE as a graph node: probs [n, g] against constant targets,
/// returning [n, 1].
pub fn bce_rows<'t>(probs: Var<'t>, targets: &Tensor) -> Var<'t> {
    let g = probs.shape()[1];
    let t = probs.tape().constant(targets.clone());
    let one = probs.tape().constant(Tensor::ones(&[probs.shape()[0], g]));
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let pos = t.mul(&p.ln());
    let neg = one.sub(&t).mul(&one.sub(&p).ln());
    pos.add(&neg).sum1().scale(-1.0 / g as f64)
}

/// Two-sided InfoNCE localization loss, mean over matched pairs.
///
/// `assignment` pairs interaction slots with ground-truth triples;
/// `target_h[g]` / `target_o[g]` name the entity slots grounding triple `g`.
pub fn loss_loc_graph<'t>(
    sim_h: Var<'t>,
    sim_o: Var<'t>,
    assignment: &[(usize, usize)],
    target_h: &[usize],
    target_o: &[usize],
    tau: f64,
) -> Result<Var<'t>> {
    let sum = loss_loc_sum_graph(sim_h, sim_o, assignment, target_h, target_o, tau)?;
    let p = assignment.len().max(1);
    Ok(sum.scale(1.0 / p as f64))
}

fn loss_loc_sum_graph<'t>(
    sim_h: Var<'t>,
    sim_o: Var<'t>,
    assignment: &[(usize, usize)],
    target_h: &[usize],
    target_o: &[usize],
    tau: f64,
) -> Result<Var<'t>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::config(format!("tau {tau} must be positive")));
    }
    let m = sim_h.shape()[1];
    if assignment.is_empty() {
        return Ok(sim_h.tape().constant(Tensor::scalar(0.0)));
    }
    let slots: Vec<usize> = assignment.iter().map(|&(i, _)| i).collect();
    let pick_h: Vec<usize> = assignment.iter().map(|&(_, g)| target_h[g]).collect();
    let pick_o: Vec<usize> = assignment.iter().map(|&(_, g)| target_o[g]).collect();
    for &t in pick_h.iter().chain(pick_o.iter()) {
        if t >= m {
            return Err(Error::invariant(format!("target entity slot {t} outside 0..{m}")));
        }
    }
    let lh = sim_h.gather_rows(&slots).scale(1.0 / tau).log_softmax_rows().pick_per_row(&pick_h);
    let lo = sim_o.gather_rows(&slots).scale(1.0 / tau).log_softmax_rows().pick_per_row(&pick_o);
    Ok(lh.sum().add(&lo.sum()).neg())
}

/// Value-level localization loss over pointer outputs (mean over pairs).
pub fn loss_loc(
    pointers: &HoiPointerOutput,
    assignment: &[(usize, usize)],
    target_h: &[usize],
    target_o: &[usize],
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::config(format!("tau {tau} must be positive")));
    }
    if assignment.is_empty() {
        return Ok(0.0);
    }
    let m = pointers.sim_h.cols();
    let mut total = 0.0;
    for &(i, g) in assignment {
        for (sim, target) in [(&pointers.sim_h, target_h[g]), (&pointers.sim_o, target_o[g])] {
            if target >= m {
                return Err(Error::invariant(format!("target entity slot {target} outside 0..{m}")));
            }
            let row: Vec<f64> = (0..m).map(|j| sim.at2(i, j) / tau).collect();
            total -= log_softmax_f64(&row)[target];
        }
    }
    Ok(total / assignment.len() as f64)
}

/// Generalized IoU of two corner boxes.
pub fn box_giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter_w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let inter_h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = inter_w * inter_h;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let iou = inter / (union + 1e-9);
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let c_area = cw * ch;
    iou - (c_area - union) / (c_area + 1e-9)
}

/// Box regression term, summed over rows: L1 over the four coordinates plus
/// (1 - GIoU), predictions [p, 4] against constant targets [p, 4].
pub fn loss_box_pairs<'t>(pred: Var<'t>, gt: &Tensor) -> Var<'t> {
    let tape = pred.tape();
    let g = tape.constant(gt.clone());
    let p = |v: &Var<'t>, c: usize| v.slice_cols(c, 1);
    let (px0, py0, px1, py1) = (p(&pred, 0), p(&pred, 1), p(&pred, 2), p(&pred, 3));
    let (gx0, gy0, gx1, gy1) = (p(&g, 0), p(&g, 1), p(&g, 2), p(&g, 3));
    let l1 = px0
        .sub(&gx0)
        .abs()
        .add(&py0.sub(&gy0).abs())
        .add(&px1.sub(&gx1).abs())
        .add(&py1.sub(&gy1).abs());
    let zero = tape.constant(Tensor::zeros(&[pred.shape()[0], 1]));
    let iw = px1.emin(&gx1).sub(&px0.emax(&gx0)).emax(&zero);
    let ih = py1.emin(&gy1).sub(&py0.emax(&gy0)).emax(&zero);
    let inter = iw.mul(&ih);
    let area_p = px1.sub(&px0).mul(&py1.sub(&py0));
    let area_g = gx1.sub(&gx0).mul(&gy1.sub(&gy0));
    let union = area_p.add(&area_g).sub(&inter);
    let iou = inter.div(&union.add_scalar(1e-9));
    let cw = px1.emax(&gx1).sub(&px0.emin(&gx0));
    let ch = py1.emax(&gy1).sub(&py0.emin(&gy0));
    let c_area = cw.mul(&ch);
    let giou = iou.sub(&c_area.sub(&union).div(&c_area.add_scalar(1e-9)));
    let one = tape.constant(Tensor::ones(&[pred.shape()[0], 1]));
    l1.add(&one.sub(&giou)).sum()
}

/// Matches entity slots to ground-truth entities with a DETR-style cost:
/// -p(class) + L1 + (1 - GIoU). Errors when the record holds more entities
/// than there are slots.
pub fn entity_match(
    class_logits: &Tensor,
    boxes: &Tensor,
    record: &HoiPairRecord,
) -> Result<Vec<(usize, usize)>> {
    let m = class_logits.rows();
    let n = record.entities.len();
    if n > m {
        return Err(Error::invariant(format!(
            "record {} has {n} entities but only {m} entity slots",
            record.image_id
        )));
    }
    let mut cost = vec![vec![0.0; n]; m];
    for (s, row) in cost.iter_mut().enumerate() {
        let logits: Vec<f64> = (0..class_logits.cols()).map(|c| class_logits.at2(s, c)).collect();
        let log_probs = log_softmax_f64(&logits);
        let pb = [boxes.at2(s, 0), boxes.at2(s, 1), boxes.at2(s, 2), boxes.at2(s, 3)];
        for (e, cell) in row.iter_mut().enumerate() {
            let ent = &record.entities[e];
            let l1: f64 = pb.iter().zip(ent.bbox.iter()).map(|(a, b)| (a - b).abs()).sum();
            *cell = -log_probs[ent.class_id].exp() + l1 + (1.0 - box_giou(&pb, &ent.bbox));
        }
    }
    hungarian_match(&cost)
}

/// Entity criterion: weighted cross-entropy over all slots (unmatched slots
/// target the no-entity class at reduced weight) plus the box term on
/// matched slots, normalized by the match count.
fn entity_criterion<'t>(
    class_logits: Var<'t>,
    boxes: Var<'t>,
    record: &HoiPairRecord,
    assignment: &[(usize, usize)],
) -> Var<'t> {
    let m = class_logits.shape()[0];
    let no_entity = class_logits.shape()[1] - 1;
    let mut targets = vec![no_entity; m];
    let mut weights = vec![NO_ENTITY_WEIGHT; m];
    for &(slot, e) in assignment {
        targets[slot] = record.entities[e].class_id;
        weights[slot] = 1.0;
    }
    let weight_sum: f64 = weights.iter().sum();
    let w = class_logits.tape().constant(Tensor::new(&[m], weights));
    let ce = class_logits
        .log_softmax_rows()
        .pick_per_row(&targets)
        .mul(&w)
        .sum()
        .scale(-1.0 / weight_sum);
    if assignment.is_empty() {
        return ce;
    }
    let slots: Vec<usize> = assignment.iter().map(|&(s, _)| s).collect();
    let mut gt = Tensor::zeros(&[assignment.len(), 4]);
    for (r, &(_, e)) in assignment.iter().enumerate() {
        for c in 0..4 {
            gt.set2(r, c, record.entities[e].bbox[c]);
        }
    }
    let ebox = loss_box_pairs(boxes.gather_rows(&slots), &gt).scale(1.0 / assignment.len() as f64);
    ce.add(&ebox)
}

/// Builds the matched Hungarian loss for one record.
///
/// The interaction matching cost mirrors the loss itself: per (slot, triple),
/// the two-sided localization term plus the action BCE term. Matched slots
/// contribute localization, action, and box losses; unmatched slots only the
/// BCE against an all-zero action target. Breakdown fields are sums over
/// slots, and loss_total = loss_loc + loss_act + lambda_box * loss_box holds
/// exactly.
pub fn loss_hungarian<'t>(
    graph: &EncoderGraph<'t>,
    record: &HoiPairRecord,
    cfg: &EncoderConfig,
) -> Result<LossGraph<'t>> {
    let tau = cfg.tau;
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::config(format!("tau {tau} must be positive")));
    }
    let k = graph.sim_h.shape()[0];
    let m = graph.sim_h.shape()[1];
    let gamma = graph.a_probs.shape()[1];
    let n_ent = record.entities.len();
    for t in &record.triples {
        if t.human_idx >= n_ent || t.object_idx >= n_ent {
            return Err(Error::invariant(format!(
                "record {} triple references entity outside 0..{n_ent}",
                record.image_id
            )));
        }
    }

    let class_logits_val = graph.class_logits.value();
    let boxes_val = graph.boxes.value();
    let entity_assignment = entity_match(&class_logits_val, &boxes_val, record)?;
    let mut slot_of_entity = vec![usize::MAX; n_ent];
    for &(slot, e) in &entity_assignment {
        slot_of_entity[e] = slot;
    }
    let target_h: Vec<usize> = record.triples.iter().map(|t| slot_of_entity[t.human_idx]).collect();
    let target_o: Vec<usize> = record.triples.iter().map(|t| slot_of_entity[t.object_idx]).collect();

    // Matching cost from current values; the differentiable loss reuses the
    // same terms on the matched pairs.
    let sim_h_val = graph.sim_h.value();
    let sim_o_val = graph.sim_o.value();
    let a_probs_val = graph.a_probs.value();
    let n_gt = record.triples.len();
    let mut cost = vec![vec![0.0; n_gt]; k];
    for (i, row) in cost.iter_mut().enumerate() {
        let lh = log_softmax_f64(&(0..m).map(|j| sim_h_val.at2(i, j) / tau).collect::<Vec<_>>());
        let lo = log_softmax_f64(&(0..m).map(|j| sim_o_val.at2(i, j) / tau).collect::<Vec<_>>());
        let probs: Vec<f64> = (0..gamma).map(|a| a_probs_val.at2(i, a)).collect();
        for (g, cell) in row.iter_mut().enumerate() {
            let t = &record.triples[g];
            let loc = -lh[target_h[g]] - lo[target_o[g]];
            let act = loss_act(&probs, &multihot(&t.action_ids, gamma));
            *cell = loc + act;
        }
    }
    let assignment = hungarian_match(&cost)?;

    let loss_loc = loss_loc_sum_graph(graph.sim_h, graph.sim_o, &assignment, &target_h, &target_o, tau)?;

    let mut act_targets = Tensor::zeros(&[k, gamma]);
    for &(i, g) in &assignment {
        for &a in &record.triples[g].action_ids {
            act_targets.set2(i, a, 1.0);
        }
    }
    let loss_act_var = bce_rows(graph.a_probs, &act_targets).sum();

    let pointers = graph.pointer_output();
    let loss_box = if assignment.is_empty() {
        graph.sim_h.tape().constant(Tensor::scalar(0.0))
    } else {
        let h_slots: Vec<usize> = assignment.iter().map(|&(i, _)| pointers.c_hat_h[i]).collect();
        let o_slots: Vec<usize> = assignment.iter().map(|&(i, _)| pointers.c_hat_o[i]).collect();
        let mut gt_h = Tensor::zeros(&[assignment.len(), 4]);
        let mut gt_o = Tensor::zeros(&[assignment.len(), 4]);
        for (r, &(_, g)) in assignment.iter().enumerate() {
            let t = &record.triples[g];
            for c in 0..4 {
                gt_h.set2(r, c, record.entities[t.human_idx].bbox[c]);
                gt_o.set2(r, c, record.entities[t.object_idx].bbox[c]);
            }
        }
        let bh = loss_box_pairs(graph.boxes.gather_rows(&h_slots), &gt_h);
        let bo = loss_box_pairs(graph.boxes.gather_rows(&o_slots), &gt_o);
        bh.add(&bo)
    };

    let loss_total = loss_loc.add(&loss_act_var).add(&loss_box.scale(cfg.lambda_box));
    let entity_loss = entity_criterion(graph.class_logits, graph.boxes, record, &entity_assignment);
    let objective = loss_total.add(&entity_loss);
    let breakdown = LossBreakdown {
        loss_loc: loss_loc.item(),
        loss_act: loss_act_var.item(),
        loss_box: loss_box.item(),
        loss_total: loss_total.item(),
        tau,
    };
    Ok(LossGraph {
        loss_loc,
        loss_act: loss_act_var,
        loss_box,
        loss_total,
        entity_loss,
        objective,
        assignment,
        entity_assignment,
        breakdown,
    })
}

/// Builds corner boxes [n, 4] from raw logits through sigmoid cxcywh, the
/// same path the entity head uses.
pub(crate) fn raw_to_corner_boxes<'t>(raw: Var<'t>) -> Var<'t> {
    let s = raw.sigmoid();
    let cx = s.slice_cols(0, 1);
    let cy = s.slice_cols(1, 1);
    let w = s.slice_cols(2, 1);
    let h = s.slice_cols(3, 1);
    concat_cols(&[
        cx.sub(&w.scale(0.5)).clamp(0.0, 1.0),
        cy.sub(&h.scale(0.5)).clamp(0.0, 1.0),
        cx.add(&w.scale(0.5)).clamp(0.0, 1.0),
        cy.add(&h.scale(0.5)).clamp(0.0, 1.0),
    ])
}
