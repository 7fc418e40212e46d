//! Synthetic HOI scene dataset: records, generation, captions, serialization.

mod caption;
mod io;
mod scene;

pub use caption::{align_caption, validate_alignment, AlignmentViolation};
pub use io::{load_dataset, serialize_dataset};
pub use scene::build_synthetic_scene;

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Entity class names in canonical id order.
pub const ENTITY_CLASSES: [&str; 6] = ["person", "knife", "gun", "car", "bag", "wall"];
/// Action names in canonical id order.
pub const ACTIONS: [&str; 6] = ["hold", "carry", "stand_by", "attack", "shoot", "hijack"];
/// Subset of [`ACTIONS`] that marks a scene as threatening.
pub const THREAT_ACTIONS: [&str; 3] = ["attack", "shoot", "hijack"];

pub const CLASS_PERSON: usize = 0;
pub const CLASS_KNIFE: usize = 1;
pub const CLASS_GUN: usize = 2;
pub const CLASS_CAR: usize = 3;
pub const CLASS_BAG: usize = 4;
pub const CLASS_WALL: usize = 5;

pub const ACT_HOLD: usize = 0;
pub const ACT_CARRY: usize = 1;
pub const ACT_STAND_BY: usize = 2;
pub const ACT_ATTACK: usize = 3;
pub const ACT_SHOOT: usize = 4;
pub const ACT_HIJACK: usize = 5;

/// Action ids considered threatening.
pub const THREAT_ACTION_IDS: [usize; 3] = [ACT_ATTACK, ACT_SHOOT, ACT_HIJACK];

/// One annotated entity instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: usize,
    pub class_id: usize,
    /// Normalized corners `[x_min, y_min, x_max, y_max]`, each in `[0, 1]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Ground-truth interaction between one human-role entity and one object entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiTripleGT {
    /// Index into the record's entity list (not the entity id).
    #[serde(rename = "h")]
    pub human_idx: usize,
    #[serde(rename = "o")]
    pub object_idx: usize,
    /// Sorted, deduplicated, non-empty action ids.
    #[serde(rename = "actions")]
    pub action_ids: Vec<usize>,
}

/// Full annotation for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiPairRecord {
    pub image_id: String,
    pub scene_seed: u64,
    pub entities: Vec<EntityRecord>,
    pub triples: Vec<HoiTripleGT>,
    pub is_threat: bool,
}

/// Reference caption for one scene, aligned with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub token_ids: Vec<usize>,
}

/// Rendered scene, kept as 8-bit RGB so files round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub resolution: usize,
    /// Row-major RGB bytes, length `resolution * resolution * 3`.
    pub rgb: Vec<u8>,
}

impl SceneImage {
    /// Pixel values as floats in `[0, 1]`, channels-first `[3, res, res]`.
    pub fn to_tensor(&self) -> crate::autodiff::Tensor {
        let r = self.resolution;
        let mut data = vec![0.0; 3 * r * r];
        for y in 0..r {
            for x in 0..r {
                for c in 0..3 {
                    data[c * r * r + y * r + x] = self.rgb[(y * r + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        crate::autodiff::Tensor::new(&[3, r, r], data)
    }
}

/// One dataset entry: annotation, caption and rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub pair: HoiPairRecord,
    pub caption: CaptionRecord,
    pub image: SceneImage,
}

/// A named split plus everything needed to interpret its records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub vocab_entities: Vec<String>,
    pub vocab_actions: Vec<String>,
    pub threat_actions: Vec<String>,
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn threat_action_ids(&self) -> Vec<usize> {
        self.vocab_actions
            .iter()
            .enumerate()
            .filter(|(_, a)| self.threat_actions.contains(a))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Square image side in pixels.
    pub resolution: usize,
    /// Inclusive bounds on the number of entities per scene.
    pub entity_range: (usize, usize),
    /// Sanity target for the average entity count over a large sample.
    pub target_mean_entities: f64,
    /// Probability that a scene contains at least one threatening action.
    pub threat_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            resolution: 64,
            entity_range: (1, 5),
            target_mean_entities: 2.7,
            threat_ratio: 0.4,
        }
    }
}

impl GenConfig {
    /// Side of the square placement grid.
    pub fn grid_side(&self) -> usize {
        (self.resolution / 21).max(1)
    }

    /// Maximum number of entities a scene can hold without overlap.
    pub fn capacity(&self) -> usize {
        let k = self.grid_side();
        k * k
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::config(format!(
                "resolution {} is below the 16 px minimum",
                self.resolution
            )));
        }
        let (lo, hi) = self.entity_range;
        if lo < 1 || lo > hi {
            return Err(Error::config(format!(
                "entity range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
            )));
        }
        if hi > self.capacity() {
            return Err(Error::config(format!(
                "entity range upper bound {hi} exceeds placement capacity {} at resolution {}",
                self.capacity(),
                self.resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.threat_ratio) || !self.threat_ratio.is_finite() {
            return Err(Error::config(format!(
                "threat ratio {} must lie in [0, 1]",
                self.threat_ratio
            )));
        }
        Ok(())
    }
}

/// splitmix64 finalizer; decorrelates consecutive seeds.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th record derived from a master seed.
pub fn record_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Structural checks on one record. Returns human-readable violations.
pub fn validate_record(record: &HoiPairRecord, num_classes: usize, num_actions: usize) -> Vec<String> {
    let mut out = Vec::new();
    let n = record.entities.len();
    for (i, e) in record.entities.iter().enumerate() {
        if e.id != i {
            out.push(format!("entity {} has id {} (ids must equal list position)", i, e.id));
        }
        if e.class_id >= num_classes {
            out.push(format!("entity {} class_id {} out of range", i, e.class_id));
        }
        let [x0, y0, x1, y1] = e.bbox;
        let inside = [x0, y0, x1, y1].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !inside || x0 >= x1 || y0 >= y1 {
            out.push(format!("entity {} box {:?} is not a valid normalized box", i, e.bbox));
        }
    }
    let mut seen_pairs = std::collections::BTreeSet::new();
    let mut any_threat = false;
    for (t, triple) in record.triples.iter().enumerate() {
        if triple.human_idx >= n || triple.object_idx >= n {
            out.push(format!("triple {t} references an entity index outside 0..{n}"));
            continue;
        }
        if triple.human_idx == triple.object_idx {
            out.push(format!("triple {t} pairs entity {} with itself", triple.human_idx));
        }
        if !seen_pairs.insert((triple.human_idx, triple.object_idx)) {
            out.push(format!(
                "triple {t} duplicates pair ({}, {})",
                triple.human_idx, triple.object_idx
            ));
        }
        if triple.action_ids.is_empty() {
            out.push(format!("triple {t} has no actions"));
        }
        let mut sorted = triple.action_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != triple.action_ids {
            out.push(format!("triple {t} actions {:?} are not sorted and unique", triple.action_ids));
        }
        for &a in &triple.action_ids {
            if a >= num_actions {
                out.push(format!("triple {t} action id {a} out of range"));
            } else if THREAT_ACTION_IDS.contains(&a) {
                any_threat = true;
            }
        }
    }
    if record.is_threat != any_threat {
        out.push(format!(
            "is_threat flag {} disagrees with actions (threatening action present: {})",
            record.is_threat, any_threat
        ));
    }
    out
}

/// Builds disjoint train/val/test splits with exact floor(n * ratio) threat counts.
pub fn build_splits(
    counts: (usize, usize, usize),
    master_seed: u64,
    config: &GenConfig,
) -> Result<Vec<DatasetManifest>> {
    config.validate()?;
    let names = ["train", "val", "test"];
    let sizes = [counts.0, counts.1, counts.2];
    let mut out = Vec::with_capacity(3);
    let mut global_index = 0u64;
    for (name, &n) in names.iter().zip(sizes.iter()) {
        let n_threat = (n as f64 * config.threat_ratio).floor() as usize;
        if n_threat > 0 && config.entity_range.1 < 2 {
            return Err(Error::config(
                "threat scenes need at least two entities; raise the entity range upper bound or set threat_ratio to 0",
            ));
        }
        // Spread the threat records across the split instead of batching them first.
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
            splitmix64(master_seed ^ 0x7357_5011_7u64 ^ global_index),
        );
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let mut is_threat = vec![false; n];
        for &i in order.iter().take(n_threat) {
            is_threat[i] = true;
        }
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let seed = record_seed(master_seed, global_index + i as u64);
            let image_id = format!("{name}-{i:05}");
            let (pair, image) = scene::build_scene_of_kind(seed, config, &image_id, Some(is_threat[i]))?;
            let caption = align_caption(&pair)?;
            records.push(DatasetRecord { pair, caption, image });
        }
        global_index += n as u64;
        out.push(DatasetManifest {
            split: name.to_string(),
            vocab_entities: ENTITY_CLASSES.iter().map(|s| s.to_string()).collect(),
            vocab_actions: ACTIONS.iter().map(|s| s.to_string()).collect(),
            threat_actions: THREAT_ACTIONS.iter().map(|s| s.to_string()).collect(),
            records,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_known_values() {
        // First three outputs of the splitmix64 stream seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(record_seed(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(record_seed(0, 1), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(record_seed(0, 2), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn capacity_scales_with_resolution() {
        let mut cfg = GenConfig::default();
        assert_eq!(cfg.grid_side(), 3);
        assert_eq!(cfg.capacity(), 9);
        cfg.resolution = 32;
        assert_eq!(cfg.capacity(), 1);
        cfg.entity_range = (1, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn splits_have_exact_threat_counts_and_disjoint_ids() {
        let cfg = GenConfig::default();
        let splits = build_splits((20, 10, 10), 11, &cfg).unwrap();
        assert_eq!(splits.len(), 3);
        let mut all_ids = std::collections::BTreeSet::new();
        for (m, expect_n, expect_threat) in
            [(&splits[0], 20, 8), (&splits[1], 10, 4), (&splits[2], 10, 4)]
        {
            assert_eq!(m.records.len(), expect_n);
            let t = m.records.iter().filter(|r| r.pair.is_threat).count();
            assert_eq!(t, expect_threat, "split {}", m.split);
            for r in &m.records {
                assert!(all_ids.insert(r.pair.image_id.clone()), "duplicate id {}", r.pair.image_id);
                assert!(validate_record(&r.pair, 6, 6).is_empty());
            }
        }
    }

    #[test]
    fn build_splits_is_deterministic() {
        let cfg = GenConfig::default();
        let a = build_splits((4, 2, 2), 3, &cfg).unwrap();
        let b = build_splits((4, 2, 2), 3, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validate_record_flags_bad_fields() {
        let record = HoiPairRecord {
            image_id: "x".into(),
            scene_seed: 0,
            entities: vec![
                EntityRecord { id: 0, class_id: 0, bbox: [0.1, 0.1, 0.3, 0.4] },
                EntityRecord { id: 1, class_id: 9, bbox: [0.5, 0.5, 0.4, 0.9] },
            ],
            triples: vec![
                HoiTripleGT { human_idx: 0, object_idx: 5, action_ids: vec![0] },
                HoiTripleGT { human_idx: 0, object_idx: 1, action_ids: vec![2, 1] },
            ],
            is_threat: true,
        };
        let violations = validate_record(&record, 6, 6);
        assert!(violations.iter().any(|v| v.contains("class_id 9")));
        assert!(violations.iter().any(|v| v.contains("not a valid normalized box")));
        assert!(violations.iter().any(|v| v.contains("outside 0..2")));
        assert!(violations.iter().any(|v| v.contains("not sorted")));
        assert!(violations.iter().any(|v| v.contains("is_threat")));
    }
}
