//! Checkpoint format "hoi2threat-ckpt/1": one JSON header line describing
//! the model config and parameter layout, followed by the raw little-endian
//! f64 data of every tensor in header order.

use crate::data::GenConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::fusion::FusionConfig;
use crate::nn::ParamStore;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_VERSION: &str = "hoi2threat-ckpt/1";

/// Everything needed to rebuild the model: sub-configs for each stage plus
/// the tag ablation flag (position ablation lives in the fusion config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub without_hoi_tag: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            without_hoi_tag: false,
        }
    }
}

impl ModelConfig {
    /// Checks the sub-configs individually and their shared dimensions.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if self.fusion.d_visual != self.encoder.d {
            return Err(Error::config(format!(
                "fusion d_visual {} != encoder d {}",
                self.fusion.d_visual, self.encoder.d
            )));
        }
        if self.decoder.d_f != self.fusion.d_f {
            return Err(Error::config(format!(
                "decoder d_f {} != fusion d_f {}",
                self.decoder.d_f, self.fusion.d_f
            )));
        }
        Ok(())
    }

    /// A config scaled to match a dataset generator's resolution.
    pub fn for_resolution(gen: &GenConfig) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder.resolution = gen.resolution;
        cfg
    }
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: ModelConfig,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Writes config + parameters. Parameters serialize in name order, so the
/// byte stream is a pure function of (config, parameter values).
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let metas: Vec<ParamMeta> = params
        .iter()
        .map(|(name, t)| ParamMeta { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let header = Header { version: CKPT_VERSION.into(), config: config.clone(), params: metas };
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::schema(1, "checkpoint missing header line"))?;
    let header: Header = serde_json::from_slice(&raw[..nl])
        .map_err(|e| Error::schema(1, format!("bad checkpoint header: {e}")))?;
    if header.version != CKPT_VERSION {
        return Err(Error::schema(
            1,
            format!("checkpoint version {:?}, expected {CKPT_VERSION:?}", header.version),
        ));
    }
    header.config.validate()?;
    let mut body = &raw[nl + 1..];
    let mut params = ParamStore::new();
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        if body.len() < n * 8 {
            return Err(Error::schema(1, format!("checkpoint truncated at parameter {}", meta.name)));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&body[i * 8..i * 8 + 8]);
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::schema(1, format!("non-finite value in parameter {}", meta.name)));
            }
            data.push(v);
        }
        body = &body[n * 8..];
        params.insert(&meta.name, crate::autodiff::Tensor::new(&meta.shape, data));
    }
    if !body.is_empty() {
        return Err(Error::schema(1, format!("{} trailing bytes after parameters", body.len())));
    }
    Ok(Checkpoint { config: header.config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_linear;
    use tempfile::tempdir;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder.resolution = 32;
        cfg.encoder.d = 16;
        cfg.fusion.d_visual = 16;
        cfg.fusion.d_f = 16;
        cfg.decoder.d_f = 16;
        cfg
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        init_linear(&mut store, "enc.a", 4, 6, 3);
        init_linear(&mut store, "dec.b", 5, 2, 3);
        save_checkpoint(&path, &cfg, &store).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.params.len(), store.len());
        for (name, t) in store.iter() {
            assert_eq!(loaded.params.get(name), t, "{name}");
        }
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        init_linear(&mut store, "enc.a", 3, 3, 9);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &cfg, &store).unwrap();
        save_checkpoint(&p2, &cfg, &store).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = tiny_config();
        let store = ParamStore::new();
        save_checkpoint(&path, &cfg, &store).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("hoi2threat-ckpt/1", "hoi2threat-ckpt/9")).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("hoi2threat-ckpt/1"));
    }

    #[test]
    fn truncated_body_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        init_linear(&mut store, "enc.a", 4, 4, 1);
        save_checkpoint(&path, &cfg, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn mismatched_dims_rejected_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut cfg = tiny_config();
        cfg.fusion.d_visual = 99;
        let store = ParamStore::new();
        save_checkpoint(&path, &cfg, &store).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
