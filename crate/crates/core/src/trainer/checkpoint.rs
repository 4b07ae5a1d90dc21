//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"PLCP"
//! u32    format version (1)
//! u32    metadata length, followed by that many bytes of JSON metadata
//! u32    parameter count
//! per parameter:
//!   u32      name length, followed by the UTF-8 name
//!   u8       trainable flag
//!   u32      rank, then rank u32 dimensions
//!   f64[n]   values as raw little-endian bits (bit-exact round trip)
//! ```

use crate::classifier::ClassifierConfig;
use crate::data::EmbeddingTable;
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::CheckpointError;
use crate::eval::FusionNorm;
use crate::model::Model;
use crate::params::ParamSet;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PLCP";
const VERSION: u32 = 1;

/// Everything needed to rebuild the model around the parameter arrays, plus
/// the early-stopping record of the run that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderKind,
    pub enc_cfg: EncoderConfig,
    pub cls_cfg: ClassifierConfig,
    pub num_classes: usize,
    pub second_order: bool,
    pub epoch: usize,
    pub dev_macro_f1: f64,
    pub dev_accuracy: f64,
    /// Fusion weight selected on dev; `None` for classifier-only training.
    pub gamma: Option<f64>,
    pub fusion_norm: FusionNorm,
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(io_err);

    write(&mut w, MAGIC)?;
    write(&mut w, &VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    write(&mut w, &(meta_json.len() as u32).to_le_bytes())?;
    write(&mut w, &meta_json)?;
    write(&mut w, &(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        write(&mut w, &(p.name.len() as u32).to_le_bytes())?;
        write(&mut w, p.name.as_bytes())?;
        write(&mut w, &[u8::from(p.trainable)])?;
        write(&mut w, &(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            write(&mut w, &(d as u32).to_le_bytes())?;
        }
        for &v in &p.values {
            write(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParamSet), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bad = |reason: &str| CheckpointError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, CheckpointError> {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| bad(&format!("metadata does not parse: {e}")))?;

    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io_err)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut f64buf).map_err(io_err)?;
            values.push(f64::from_le_bytes(f64buf));
        }
        params.add_with(&name, shape, values, flag[0] != 0);
    }
    Ok((meta, params))
}

/// Rebuild a full model from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let (meta, params) = load(path)?;
    let model = Model {
        kind: meta.encoder,
        enc_cfg: meta.enc_cfg.clone(),
        cls_cfg: meta.cls_cfg.clone(),
        num_classes: meta.num_classes,
        second_order: meta.second_order,
        params,
    };
    Ok((model, meta))
}

/// Convenience used by tests: metadata for a model without a training run.
pub fn meta_for(model: &Model) -> CheckpointMeta {
    CheckpointMeta {
        encoder: model.kind,
        enc_cfg: model.enc_cfg.clone(),
        cls_cfg: model.cls_cfg.clone(),
        num_classes: model.num_classes,
        second_order: model.second_order,
        epoch: 0,
        dev_macro_f1: 0.0,
        dev_accuracy: 0.0,
        gamma: None,
        fusion_norm: FusionNorm::default(),
    }
}

/// Build a tiny model for round-trip tests.
#[doc(hidden)]
pub fn tiny_test_model(seed: u64) -> Model {
    let enc_cfg = EncoderConfig {
        emb_dim: 4,
        filter_widths: vec![1, 2],
        filters_per_width: 2,
        rep_dim: 6,
        hidden: 3,
        n_heads: 2,
        attn_dim: 3,
    };
    let emb = EmbeddingTable::seeded_random(5, 4, seed);
    Model::new(
        EncoderKind::TextCnn,
        enc_cfg,
        ClassifierConfig {
            hidden1: 4,
            hidden2: 3,
        },
        &emb,
        3,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = tiny_test_model(3);
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &meta_for(&model), &model.params).unwrap();
        let (meta, params) = load(&path).unwrap();
        assert_eq!(meta.num_classes, 3);
        assert_eq!(params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.trainable, b.trainable);
            assert!(a
                .values
                .iter()
                .zip(&b.values)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn loaded_model_reproduces_outputs() {
        let model = tiny_test_model(4);
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &meta_for(&model), &model.params).unwrap();
        let (restored, _) = load_model(&path).unwrap();
        let a = model.encode_value(&[1, 4, 2]).unwrap();
        let b = restored.encode_value(&[1, 4, 2]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::Malformed { .. })
        ));
    }
}
