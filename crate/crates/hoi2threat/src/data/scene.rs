//! Deterministic synthetic scene generator. Annotations are correct by
//! construction: glyphs and action markers are rendered from the same plan
//! that becomes the record.

use super::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BACKGROUND: u8 = 236;

/// (w_lo, w_hi, h_lo, h_hi) as fractions of the cell side, per class.
const SIZE_FRACS: [(f64, f64, f64, f64); 6] = [
    (0.30, 0.45, 0.60, 0.80), // person
    (0.45, 0.65, 0.20, 0.35), // knife
    (0.40, 0.60, 0.28, 0.45), // gun
    (0.65, 0.85, 0.38, 0.55), // car
    (0.30, 0.45, 0.32, 0.48), // bag
    (0.30, 0.45, 0.65, 0.85), // wall
];

const MARKER_COLORS: [[u8; 3]; 6] = [
    [250, 210, 30],  // hold
    [245, 140, 20],  // carry
    [40, 200, 220],  // stand_by
    [225, 30, 150],  // attack
    [130, 230, 40],  // shoot
    [130, 50, 220],  // hijack
];

/// (h_class, o_class, candidate actions); one action is sampled, and with
/// probability 0.3 a two-candidate kind keeps both.
const NORMAL_KINDS: [(usize, usize, &[usize]); 6] = [
    (CLASS_PERSON, CLASS_KNIFE, &[ACT_HOLD, ACT_CARRY]),
    (CLASS_PERSON, CLASS_GUN, &[ACT_HOLD, ACT_CARRY]),
    (CLASS_PERSON, CLASS_BAG, &[ACT_HOLD, ACT_CARRY]),
    (CLASS_PERSON, CLASS_PERSON, &[ACT_STAND_BY]),
    (CLASS_PERSON, CLASS_WALL, &[ACT_STAND_BY]),
    (CLASS_PERSON, CLASS_CAR, &[ACT_STAND_BY]),
];

/// The last kind is the object-object "indirect threat" case; the human slot
/// is a role name, not a species claim.
const THREAT_KINDS: [(usize, usize, usize); 4] = [
    (CLASS_PERSON, CLASS_PERSON, ACT_ATTACK),
    (CLASS_PERSON, CLASS_GUN, ACT_SHOOT),
    (CLASS_PERSON, CLASS_CAR, ACT_HIJACK),
    (CLASS_CAR, CLASS_WALL, ACT_HIJACK),
];

/// Renders the scene for `seed` and returns its annotation alongside.
///
/// The same `(seed, config)` always yields byte-identical output. The threat
/// coin is drawn from the seed stream, so forcing the same kind through
/// [`build_splits`] reproduces the unforced scene exactly.
pub fn build_synthetic_scene(seed: u64, config: &GenConfig) -> Result<(HoiPairRecord, SceneImage)> {
    build_scene_of_kind(seed, config, &format!("scene-{seed:016x}"), None)
}

pub(super) fn build_scene_of_kind(
    seed: u64,
    config: &GenConfig,
    image_id: &str,
    forced_threat: Option<bool>,
) -> Result<(HoiPairRecord, SceneImage)> {
    config.validate()?;
    let res = config.resolution;
    let k = config.grid_side();
    let cell = res / k;
    let (lo, hi) = config.entity_range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let coin: f64 = rng.gen();
    let is_threat = forced_threat.unwrap_or(hi >= 2 && coin < config.threat_ratio);
    if is_threat && hi < 2 {
        return Err(Error::config(
            "cannot force a threat scene when the entity range upper bound is below 2",
        ));
    }

    let mut n = rng.gen_range(lo..=hi);
    if is_threat && n < 2 {
        n = 2;
    }

    let max_pairs = n / 2;
    let min_pairs = usize::from(is_threat);
    let want_pairs = if max_pairs == 0 { 0 } else { rng.gen_range(min_pairs..=max_pairs) };

    // Disjoint adjacent cell pairs for interactions, then free cells for the rest.
    let mut adjacencies: Vec<(usize, usize)> = Vec::new();
    for r in 0..k {
        for c in 0..k {
            if c + 1 < k {
                adjacencies.push((r * k + c, r * k + c + 1));
            }
            if r + 1 < k {
                adjacencies.push((r * k + c, (r + 1) * k + c));
            }
        }
    }
    adjacencies.shuffle(&mut rng);
    let mut used = vec![false; k * k];
    let mut pair_cells: Vec<(usize, usize)> = Vec::new();
    for &(a, b) in &adjacencies {
        if pair_cells.len() == want_pairs {
            break;
        }
        if !used[a] && !used[b] {
            used[a] = true;
            used[b] = true;
            pair_cells.push((a, b));
        }
    }
    let n_pairs = pair_cells.len();
    if is_threat && n_pairs == 0 {
        return Err(Error::invariant("threat scene could not place an interacting pair"));
    }
    let mut free: Vec<usize> = (0..k * k).filter(|&c| !used[c]).collect();
    free.shuffle(&mut rng);
    let n_singles = n - 2 * n_pairs;

    // Decide interaction kinds before placing anything.
    struct PairPlan {
        h_class: usize,
        o_class: usize,
        actions: Vec<usize>,
        cells: (usize, usize),
    }
    let mut plans: Vec<PairPlan> = Vec::new();
    for (p, &cells) in pair_cells.iter().enumerate() {
        let threat_pair = is_threat && (p == 0 || rng.gen::<f64>() < 0.35);
        let (h_class, o_class, mut actions) = if threat_pair {
            let (h, o, a) = THREAT_KINDS[rng.gen_range(0..THREAT_KINDS.len())];
            let mut acts = vec![a];
            if a == ACT_SHOOT && rng.gen::<f64>() < 0.3 {
                acts.push(ACT_HOLD);
            }
            (h, o, acts)
        } else {
            let (h, o, candidates) = NORMAL_KINDS[rng.gen_range(0..NORMAL_KINDS.len())];
            let mut acts = vec![candidates[rng.gen_range(0..candidates.len())]];
            if candidates.len() > 1 && rng.gen::<f64>() < 0.3 {
                acts = candidates.to_vec();
            }
            (h, o, acts)
        };
        actions.sort_unstable();
        actions.dedup();
        let cells = if rng.gen::<bool>() { cells } else { (cells.1, cells.0) };
        plans.push(PairPlan { h_class, o_class, actions, cells });
    }

    // Place boxes in pixel space. Paired entities lean toward the shared edge.
    let mut entities: Vec<EntityRecord> = Vec::new();
    let mut px_boxes: Vec<(usize, usize, usize, usize)> = Vec::new();
    let push_entity = |entities: &mut Vec<EntityRecord>,
                           px_boxes: &mut Vec<(usize, usize, usize, usize)>,
                           rng: &mut ChaCha8Rng,
                           class: usize,
                           cell_id: usize,
                           bias: (i32, i32)| {
        let (x0, y0, w, h) = place_box(rng, cell, (cell_id % k) * cell, (cell_id / k) * cell, class, bias);
        let id = entities.len();
        entities.push(EntityRecord {
            id,
            class_id: class,
            bbox: [
                x0 as f64 / res as f64,
                y0 as f64 / res as f64,
                (x0 + w) as f64 / res as f64,
                (y0 + h) as f64 / res as f64,
            ],
        });
        px_boxes.push((x0, y0, w, h));
    };

    let mut triples: Vec<HoiTripleGT> = Vec::new();
    for plan in &plans {
        let (ca, cb) = plan.cells;
        let bias_a = cell_bias(ca, cb, k);
        let bias_b = cell_bias(cb, ca, k);
        let h_idx = entities.len();
        push_entity(&mut entities, &mut px_boxes, &mut rng, plan.h_class, ca, bias_a);
        push_entity(&mut entities, &mut px_boxes, &mut rng, plan.o_class, cb, bias_b);
        triples.push(HoiTripleGT {
            human_idx: h_idx,
            object_idx: h_idx + 1,
            action_ids: plan.actions.clone(),
        });
    }
    for s in 0..n_singles {
        let class = rng.gen_range(0..ENTITY_CLASSES.len());
        push_entity(&mut entities, &mut px_boxes, &mut rng, class, free[s], (0, 0));
    }

    let actual_threat = triples
        .iter()
        .any(|t| t.action_ids.iter().any(|a| THREAT_ACTION_IDS.contains(a)));
    if actual_threat != is_threat {
        return Err(Error::invariant("planned threat kind disagrees with generated actions"));
    }

    // Render: noisy background, glyphs in entity order, markers last.
    let mut rgb = vec![BACKGROUND; res * res * 3];
    let mut noise_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x0b5c_e11e));
    for p in 0..res * res {
        let v = (BACKGROUND as i32 + noise_rng.gen_range(-6..=6)).clamp(0, 255) as u8;
        rgb[p * 3] = v;
        rgb[p * 3 + 1] = v;
        rgb[p * 3 + 2] = v;
    }
    for (e, &(x0, y0, w, h)) in entities.iter().zip(px_boxes.iter()) {
        draw_glyph(&mut rgb, res, e.class_id, x0, y0, w, h);
    }
    for t in &triples {
        let (hx, hy) = box_center(px_boxes[t.human_idx]);
        let (ox, oy) = box_center(px_boxes[t.object_idx]);
        let mid = ((hx + ox) / 2, (hy + oy) / 2);
        let count = t.action_ids.len();
        for (i, &a) in t.action_ids.iter().enumerate() {
            let dy = i as i32 * 9 - (count as i32 - 1) * 9 / 2;
            draw_marker(&mut rgb, res, mid.0 as i32, mid.1 as i32 + dy, MARKER_COLORS[a]);
        }
    }

    let record = HoiPairRecord {
        image_id: image_id.to_string(),
        scene_seed: seed,
        entities,
        triples,
        is_threat,
    };
    Ok((record, SceneImage { resolution: res, rgb }))
}

/// Direction from cell `from` toward cell `to` on a k-wide grid, as (dx, dy)
/// in {-1, 0, 1}.
fn cell_bias(from: usize, to: usize, k: usize) -> (i32, i32) {
    let (fr, fc) = (from / k, from % k);
    let (tr, tc) = (to / k, to % k);
    ((tc as i32 - fc as i32).signum(), (tr as i32 - fr as i32).signum())
}

fn place_box(
    rng: &mut ChaCha8Rng,
    cell: usize,
    cell_x: usize,
    cell_y: usize,
    class: usize,
    bias: (i32, i32),
) -> (usize, usize, usize, usize) {
    let (wl, wh, hl, hh) = SIZE_FRACS[class];
    let side = cell as f64;
    let w = ((side * rng.gen_range(wl..wh)).round() as usize).clamp(4, cell - 2);
    let h = ((side * rng.gen_range(hl..hh)).round() as usize).clamp(4, cell - 2);
    let off = |rng: &mut ChaCha8Rng, free: usize, dir: i32| -> usize {
        match dir {
            1 => rng.gen_range(free * 2 / 3..=free),
            -1 => rng.gen_range(0..=free / 3),
            _ => rng.gen_range(0..=free),
        }
    };
    let x0 = cell_x + 1 + off(rng, cell - 2 - w, bias.0);
    let y0 = cell_y + 1 + off(rng, cell - 2 - h, bias.1);
    (x0, y0, w, h)
}

fn box_center((x0, y0, w, h): (usize, usize, usize, usize)) -> (usize, usize) {
    (x0 + w / 2, y0 + h / 2)
}

fn set_px(rgb: &mut [u8], res: usize, x: i32, y: i32, color: [u8; 3]) {
    if x < 0 || y < 0 || x as usize >= res || y as usize >= res {
        return;
    }
    let p = (y as usize * res + x as usize) * 3;
    rgb[p..p + 3].copy_from_slice(&color);
}

fn fill_rect(rgb: &mut [u8], res: usize, x0: i32, y0: i32, w: i32, h: i32, color: [u8; 3]) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            set_px(rgb, res, x, y, color);
        }
    }
}

fn outline_rect(rgb: &mut [u8], res: usize, x0: i32, y0: i32, w: i32, h: i32, color: [u8; 3]) {
    fill_rect(rgb, res, x0, y0, w, 1, color);
    fill_rect(rgb, res, x0, y0 + h - 1, w, 1, color);
    fill_rect(rgb, res, x0, y0, 1, h, color);
    fill_rect(rgb, res, x0 + w - 1, y0, 1, h, color);
}

fn fill_circle(rgb: &mut [u8], res: usize, cx: i32, cy: i32, r: i32, color: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                set_px(rgb, res, cx + dx, cy + dy, color);
            }
        }
    }
}

fn draw_glyph(rgb: &mut [u8], res: usize, class: usize, x0: usize, y0: usize, w: usize, h: usize) {
    let (x0, y0, w, h) = (x0 as i32, y0 as i32, w as i32, h as i32);
    match class {
        CLASS_PERSON => {
            let r = (w / 3).max(2);
            fill_circle(rgb, res, x0 + w / 2, y0 + r, r, [235, 200, 170]);
            fill_rect(rgb, res, x0 + w / 6, y0 + 2 * r, w - w / 3, (h - 2 * r).max(1), [40, 90, 200]);
        }
        CLASS_KNIFE => {
            let steps = w.max(h);
            for t in 0..=steps {
                let x = x0 + (w - 3) * t / steps;
                let y = y0 + (h - 3) * (steps - t) / steps;
                fill_rect(rgb, res, x, y, 3, 3, [190, 195, 205]);
            }
            fill_rect(rgb, res, x0, y0 + h - 4, 4, 4, [90, 60, 30]);
        }
        CLASS_GUN => {
            let bh = (h / 3).max(3);
            fill_rect(rgb, res, x0, y0, w, bh, [35, 35, 40]);
            fill_rect(rgb, res, x0 + w / 6, y0 + bh, (w / 5).max(3), h - bh, [35, 35, 40]);
        }
        CLASS_CAR => {
            let s = (h / 4).max(3);
            fill_rect(rgb, res, x0, y0 + h / 3, w, h - h / 3 - s / 2, [200, 40, 40]);
            fill_rect(rgb, res, x0 + w / 4, y0, w - w / 2, h / 3 + 1, [150, 25, 25]);
            fill_rect(rgb, res, x0 + w / 8, y0 + h - s, s, s, [20, 20, 20]);
            fill_rect(rgb, res, x0 + w - w / 8 - s, y0 + h - s, s, s, [20, 20, 20]);
        }
        CLASS_BAG => {
            fill_rect(rgb, res, x0, y0 + h / 4, w, h - h / 4, [150, 100, 50]);
            outline_rect(rgb, res, x0 + w / 4, y0, w - w / 2, h / 4 + 2, [90, 55, 25]);
        }
        CLASS_WALL => {
            fill_rect(rgb, res, x0, y0, w, h, [105, 170, 90]);
            let mut y = y0;
            while y < y0 + h {
                fill_rect(rgb, res, x0, y, w, 1, [60, 110, 50]);
                y += 4;
            }
        }
        _ => unreachable!("class id out of range"),
    }
}

fn draw_marker(rgb: &mut [u8], res: usize, cx: i32, cy: i32, color: [u8; 3]) {
    let cx = cx.clamp(4, res as i32 - 5);
    let cy = cy.clamp(4, res as i32 - 5);
    fill_rect(rgb, res, cx - 3, cy - 3, 7, 7, [15, 15, 15]);
    fill_rect(rgb, res, cx - 2, cy - 2, 5, 5, color);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = GenConfig::default();
        let a = build_synthetic_scene(7, &cfg).unwrap();
        let b = build_synthetic_scene(7, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn forcing_matches_the_unforced_coin() {
        let mut cfg = GenConfig::default();
        cfg.threat_ratio = 1.0;
        for seed in 0..20 {
            let unforced = build_synthetic_scene(seed, &cfg).unwrap();
            let forced = build_scene_of_kind(seed, &cfg, &unforced.0.image_id, Some(true)).unwrap();
            assert_eq!(unforced.0, forced.0);
            assert_eq!(unforced.1, forced.1);
        }
    }

    #[test]
    fn threat_ratio_extremes() {
        let mut cfg = GenConfig::default();
        cfg.threat_ratio = 0.0;
        for seed in 0..100 {
            let (rec, _) = build_synthetic_scene(seed, &cfg).unwrap();
            assert!(!rec.is_threat);
        }
        cfg.threat_ratio = 1.0;
        for seed in 0..100 {
            let (rec, _) = build_synthetic_scene(seed, &cfg).unwrap();
            assert!(rec.is_threat);
            assert!(rec.entities.len() >= 2);
            assert!(rec
                .triples
                .iter()
                .any(|t| t.action_ids.iter().any(|a| THREAT_ACTION_IDS.contains(a))));
        }
    }

    #[test]
    fn single_entity_config_never_interacts() {
        let mut cfg = GenConfig::default();
        cfg.entity_range = (1, 1);
        for seed in 0..50 {
            let (rec, _) = build_synthetic_scene(seed, &cfg).unwrap();
            assert_eq!(rec.entities.len(), 1);
            assert!(rec.triples.is_empty());
            assert!(!rec.is_threat);
        }
    }

    #[test]
    fn records_are_structurally_valid_and_boxes_disjoint() {
        let cfg = GenConfig::default();
        for seed in 0..200 {
            let (rec, img) = build_synthetic_scene(record_seed(5, seed), &cfg).unwrap();
            assert!(validate_record(&rec, 6, 6).is_empty(), "seed {seed}");
            assert_eq!(img.rgb.len(), 64 * 64 * 3);
            for i in 0..rec.entities.len() {
                for j in i + 1..rec.entities.len() {
                    let a = rec.entities[i].bbox;
                    let b = rec.entities[j].bbox;
                    let ow = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
                    let oh = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
                    assert_eq!(ow * oh, 0.0, "seed {seed}: entities {i} and {j} overlap");
                }
            }
            for w in rec.triples.windows(2) {
                assert!((w[0].human_idx, w[0].object_idx) < (w[1].human_idx, w[1].object_idx));
            }
        }
    }

    #[test]
    fn mean_entity_count_is_near_target() {
        let cfg = GenConfig::default();
        let total: usize = (0..400)
            .map(|i| build_synthetic_scene(record_seed(99, i), &cfg).unwrap().0.entities.len())
            .sum();
        let mean = total as f64 / 400.0;
        assert!(
            (mean - cfg.target_mean_entities).abs() <= 0.5,
            "mean {mean} strayed from target {}",
            cfg.target_mean_entities
        );
    }

    #[test]
    fn threat_marker_pixels_are_visible() {
        let mut cfg = GenConfig::default();
        cfg.threat_ratio = 1.0;
        for seed in 0..30 {
            let (rec, img) = build_synthetic_scene(seed, &cfg).unwrap();
            let threat_acts: Vec<usize> = rec
                .triples
                .iter()
                .flat_map(|t| t.action_ids.iter().copied())
                .filter(|a| THREAT_ACTION_IDS.contains(a))
                .collect();
            for a in threat_acts {
                let c = MARKER_COLORS[a];
                let found = img.rgb.chunks_exact(3).any(|p| p == c);
                assert!(found, "seed {seed}: marker for action {a} not rendered");
            }
        }
    }
}
