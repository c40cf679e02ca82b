//! Self-describing model checkpoints.
//!
//! Layout: one JSON object with a version tag, the model header (config +
//! preprocessing statistics + architecture references) and the parameter
//! store serialized to its own JSON string, protected by a sha256 checksum.
//! Floating-point values round-trip bit-exactly through the shortest-
//! representation encoder serde_json uses.

use crate::adam::ParamStore;
use crate::error::{Error, Result};
use crate::model::Model;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &str = "ince-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    version: u32,
    /// Model minus the parameter values.
    header: ModelHeader,
    /// ParamStore JSON, checksummed as-is.
    params_json: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: crate::model::InceConfig,
    n_numerical: usize,
    cardinalities: Vec<usize>,
    embedder: crate::columnar::ColumnarEmbedder,
    cls: Option<usize>,
    encoder: crate::model::EncoderStack,
    decoder: crate::mlp::Mlp,
    stats: crate::dataset::FitStatistics,
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let params_json = serde_json::to_string(&model.store)?;
    let file = CheckpointFile {
        magic: MAGIC.to_string(),
        version: VERSION,
        header: ModelHeader {
            config: model.config.clone(),
            n_numerical: model.n_numerical,
            cardinalities: model.cardinalities.clone(),
            embedder: model.embedder.clone(),
            cls: model.cls,
            encoder: model.encoder.clone(),
            decoder: model.decoder.clone(),
            stats: model.stats.clone(),
        },
        sha256: hex_digest(params_json.as_bytes()),
        params_json,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(format!("cannot read checkpoint {}: {}", path.display(), e)))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(format!("malformed checkpoint {}: {}", path.display(), e)))?;
    if file.magic != MAGIC {
        return Err(Error::format("not a model checkpoint (bad magic)"));
    }
    if file.version != VERSION {
        return Err(Error::format(format!(
            "incompatible checkpoint version {} (supported: {})",
            file.version, VERSION
        )));
    }
    let checksum = hex_digest(file.params_json.as_bytes());
    if checksum != file.sha256 {
        return Err(Error::format("checkpoint checksum mismatch (file corrupted)"));
    }
    let store: ParamStore = serde_json::from_str(&file.params_json)?;
    let h = file.header;
    let model = Model {
        config: h.config,
        n_numerical: h.n_numerical,
        cardinalities: h.cardinalities,
        embedder: h.embedder,
        cls: h.cls,
        encoder: h.encoder,
        decoder: h.decoder,
        store,
        stats: h.stats,
    };
    validate_shapes(&model)?;
    Ok(model)
}

/// Checks that the parameter store matches the architecture references.
fn validate_shapes(model: &Model) -> Result<()> {
    let expect = Model::new(&model.config, &model.stats)?;
    if expect.store.len() != model.store.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, architecture expects {}",
            model.store.len(),
            expect.store.len()
        )));
    }
    for (a, b) in expect.store.params.iter().zip(model.store.params.iter()) {
        if !a.value.same_shape(&b.value) {
            return Err(Error::format(format!(
                "parameter `{}` has shape {}x{}, expected {}x{}",
                b.name,
                b.value.rows(),
                b.value.cols(),
                a.value.rows(),
                a.value.cols()
            )));
        }
    }
    Ok(())
}
