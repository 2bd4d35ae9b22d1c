//! Checkpoint directory format.
//!
//! A checkpoint is a directory of three files:
//!
//! - `manifest.json` — format version, spec, meta, the layer table with
//!   tensor shapes and blob offsets, and the (small) batch-norm running
//!   statistics.
//! - `weights.bin` — magic `GMCW1`, version u16 LE, then every trainable
//!   tensor as little-endian IEEE-754 f32 in layer order.
//! - `init_weights.bin` — same layout for the initialization snapshot.
//!
//! `load(save(c))` is bit-identical to `c`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

use super::{Checkpoint, CheckpointMeta, LayerDesc, NetworkSpec};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 5] = b"GMCW1";
const BLOB_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    param_shapes: Vec<Vec<usize>>,
    /// Element offset of this layer's first tensor within the blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: NetworkSpec,
    meta: CheckpointMeta,
    layers: Vec<ManifestLayer>,
    total_params: usize,
    /// Batch-norm running statistics per layer (empty for other layers).
    state: Vec<Vec<Vec<f32>>>,
}

fn write_blob(path: &Path, tensors: &[Vec<Tensor>]) -> Result<()> {
    let total: usize = tensors.iter().flat_map(|ts| ts.iter().map(|t| t.len())).sum();
    let mut bytes = Vec::with_capacity(7 + 4 * total);
    bytes.extend_from_slice(BLOB_MAGIC);
    bytes.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    for ts in tensors {
        for t in ts {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, expected_elems: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 7 || &bytes[..5] != BLOB_MAGIC {
        return Err(CoreError::BadMagic { format: "checkpoint blob", expected: BLOB_MAGIC.to_vec() });
    }
    let version = u16::from_le_bytes([bytes[5], bytes[6]]);
    if version != BLOB_VERSION {
        return Err(CoreError::BadVersion {
            format: "checkpoint blob",
            found: version as u32,
            supported: BLOB_VERSION as u32,
        });
    }
    let payload = &bytes[7..];
    if payload.len() != expected_elems * 4 {
        return Err(CoreError::LengthMismatch {
            format: "checkpoint blob",
            expected: expected_elems * 4,
            got: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn unpack(layers: &[LayerDesc], flat: &[f32]) -> Vec<Vec<Tensor>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut pos = 0;
    for layer in layers {
        let mut ts = Vec::new();
        for shape in layer.kind.param_shapes() {
            let len: usize = shape.iter().product();
            ts.push(Tensor::new(&shape, flat[pos..pos + len].to_vec()).expect("length checked"));
            pos += len;
        }
        out.push(ts);
    }
    out
}

/// Write a checkpoint directory; creates `dir` if needed.
pub fn save(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut offset = 0usize;
    let layers: Vec<ManifestLayer> = ckpt
        .layers()
        .iter()
        .map(|l| {
            let shapes = l.kind.param_shapes();
            let here = offset;
            offset += shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
            ManifestLayer { name: l.name.clone(), param_shapes: shapes, offset: here }
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: ckpt.spec.clone(),
        meta: ckpt.meta.clone(),
        layers,
        total_params: offset,
        state: ckpt.state.iter().map(|ts| ts.iter().map(|t| t.data().to_vec()).collect()).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_blob(&dir.join("weights.bin"), &ckpt.params)?;
    write_blob(&dir.join("init_weights.bin"), &ckpt.init_params)?;
    Ok(())
}

/// Read a checkpoint directory written by [`save`].
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CoreError::BadVersion {
            format: "checkpoint manifest",
            found: manifest.format_version,
            supported: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let (_, layers) = super::build_plan(&manifest.spec);
    // The manifest layer table must agree with the plan the spec implies.
    if manifest.layers.len() != layers.len()
        || manifest
            .layers
            .iter()
            .zip(&layers)
            .any(|(m, l)| m.name != l.name || m.param_shapes != l.kind.param_shapes())
    {
        return Err(CoreError::InvalidSpec {
            what: "checkpoint manifest",
            detail: "layer table does not match the spec's architecture".into(),
        });
    }
    let params_flat = read_blob(&dir.join("weights.bin"), manifest.total_params)?;
    let init_flat = read_blob(&dir.join("init_weights.bin"), manifest.total_params)?;
    let params = unpack(&layers, &params_flat);
    let init_params = unpack(&layers, &init_flat);
    let state: Vec<Vec<Tensor>> = layers
        .iter()
        .zip(&manifest.state)
        .map(|(l, ts)| {
            l.kind
                .state_shapes()
                .iter()
                .zip(ts)
                .map(|(shape, data)| Tensor::new(shape, data.clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Checkpoint::from_parts(manifest.spec, manifest.meta, params, init_params, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, NetworkSpec};
    use crate::rng::SeededRng;

    fn sample_checkpoint() -> Checkpoint {
        let spec = NetworkSpec::vgg_like((16, 16), 2, 4, true, 0.1, true).unwrap();
        build(&spec, &mut SeededRng::new(21, 0)).unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ckpt = sample_checkpoint();
        ckpt.meta.experiment_id = "t".into();
        ckpt.meta.final_train_error = Some(0.125);
        save(&ckpt, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.spec, ckpt.spec);
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.init_params, ckpt.init_params);
        assert_eq!(loaded.state, ckpt.state);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample_checkpoint();
        save(&ckpt, dir.path()).unwrap();
        let path = dir.path().join("weights.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match load(dir.path()) {
            Err(CoreError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample_checkpoint();
        save(&ckpt, dir.path()).unwrap();
        let path = dir.path().join("weights.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[5] = 99;
        std::fs::write(&path, bytes).unwrap();
        match load(dir.path()) {
            Err(CoreError::BadVersion { found: 99, .. }) => {}
            other => panic!("expected BadVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample_checkpoint();
        save(&ckpt, dir.path()).unwrap();
        let path = dir.path().join("init_weights.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load(dir.path()) {
            Err(CoreError::LengthMismatch { .. }) => {}
            other => panic!("expected LengthMismatch, got {other:?}"),
        }
    }
}
