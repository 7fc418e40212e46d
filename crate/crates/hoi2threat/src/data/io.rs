//! Dataset files: one JSONL manifest (header line plus one record per line)
//! with PNG images stored next to it, named `<image_id>.png`.

use super::*;
use crate::decoder::Tokenizer;
use std::io::Write;
use std::path::Path;

pub const SCHEMA_VERSION: &str = "td-hoi/1";

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderLine {
    schema: String,
    split: String,
    vocab_entities: Vec<String>,
    vocab_actions: Vec<String>,
    threat_actions: Vec<String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RecordLine {
    image_id: String,
    scene_seed: u64,
    entities: Vec<EntityRecord>,
    triples: Vec<HoiTripleGT>,
    is_threat: bool,
    caption: String,
}

/// Writes `manifest` to `path` as JSONL and its images as sibling PNG files.
pub fn serialize_dataset(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let header = HeaderLine {
        schema: SCHEMA_VERSION.to_string(),
        split: manifest.split.clone(),
        vocab_entities: manifest.vocab_entities.clone(),
        vocab_actions: manifest.vocab_actions.clone(),
        threat_actions: manifest.threat_actions.clone(),
    };
    let mut out = Vec::new();
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for r in &manifest.records {
        let line = RecordLine {
            image_id: r.pair.image_id.clone(),
            scene_seed: r.pair.scene_seed,
            entities: r.pair.entities.clone(),
            triples: r.pair.triples.clone(),
            is_threat: r.pair.is_threat,
            caption: r.caption.text.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
        let res = r.image.resolution as u32;
        let img = image::RgbImage::from_raw(res, res, r.image.rgb.clone())
            .ok_or_else(|| Error::invariant(format!("image buffer for {} has the wrong size", r.pair.image_id)))?;
        img.save(dir.join(format!("{}.png", r.pair.image_id)))?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a JSONL manifest and its PNG images back.
///
/// Errors cite the 1-based line and the offending field; every record is
/// structurally validated, ids must be unique, and captions must align.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let body = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = body.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::schema(1, "file is empty, expected a header line"))?;
    let header: HeaderLine = serde_json::from_str(header_line)
        .map_err(|e| Error::schema(1, format!("bad header: {e}")))?;
    if header.schema != SCHEMA_VERSION {
        return Err(Error::schema(
            1,
            format!("schema field is {:?}, this reader handles {SCHEMA_VERSION:?}", header.schema),
        ));
    }
    if header.vocab_entities.is_empty() || header.vocab_actions.is_empty() {
        return Err(Error::schema(1, "header vocabularies must be non-empty"));
    }
    for t in &header.threat_actions {
        if !header.vocab_actions.contains(t) {
            return Err(Error::schema(1, format!("threat action {t:?} is not in vocab_actions")));
        }
    }

    let tokenizer = Tokenizer::closed();
    let mut records = Vec::new();
    let mut seen_ids = std::collections::BTreeSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(line)
            .map_err(|e| Error::schema(line_no, format!("bad record: {e}")))?;
        let pair = HoiPairRecord {
            image_id: rec.image_id,
            scene_seed: rec.scene_seed,
            entities: rec.entities,
            triples: rec.triples,
            is_threat: rec.is_threat,
        };
        let violations = validate_record(&pair, header.vocab_entities.len(), header.vocab_actions.len());
        if let Some(first) = violations.first() {
            return Err(Error::schema(line_no, format!("record {}: {first}", pair.image_id)));
        }
        if !seen_ids.insert(pair.image_id.clone()) {
            return Err(Error::schema(line_no, format!("duplicate image_id {:?}", pair.image_id)));
        }
        let caption = CaptionRecord {
            image_id: pair.image_id.clone(),
            token_ids: tokenizer.tokenize(&rec.caption),
            text: rec.caption,
        };
        let png = dir.join(format!("{}.png", pair.image_id));
        let img = image::open(&png)
            .map_err(|e| Error::schema(line_no, format!("image {} unreadable: {e}", png.display())))?
            .into_rgb8();
        if img.width() != img.height() {
            return Err(Error::schema(line_no, format!("image {} is not square", png.display())));
        }
        let image = SceneImage { resolution: img.width() as usize, rgb: img.into_raw() };
        records.push(DatasetRecord { pair, caption, image });
    }
    Ok(DatasetManifest {
        split: header.split,
        vocab_entities: header.vocab_entities,
        vocab_actions: header.vocab_actions,
        threat_actions: header.threat_actions,
        records,
    })
}
