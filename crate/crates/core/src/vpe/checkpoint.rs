//! Checkpoint persistence: a directory holding the binary tensor container
//! (`params.vpe`) plus a small JSON metadata file.
//!
//! Metadata deliberately contains no wall-clock fields; for a fixed seed the
//! whole checkpoint directory is byte-reproducible, which the determinism
//! tests assert.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Ix1, Ix2, Ix4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::tensor_store::TensorStore;
use crate::vpe::VpeParams;

pub const PARAMS_FILE: &str = "params.vpe";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u64,
    pub parent_version: Option<u64>,
    pub d_z: usize,
    pub canvas: usize,
    pub channels: [usize; 3],
    pub class_count: usize,
    pub seed: u64,
    /// SHA-256 over the training split (labels + quantized pixels).
    pub data_fingerprint: String,
}

/// Content hash of a dataset split, stable across runs and platforms.
pub fn dataset_fingerprint(samples: &[LabeledSample]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((samples.len() as u64).to_le_bytes());
    for sample in samples {
        hasher.update(sample.label.to_le_bytes());
        for &v in sample.image.data().iter() {
            hasher.update([(v.clamp(0.0, 1.0) * 255.0).round() as u8]);
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const TENSOR_NAMES: [&str; 20] = [
    "enc1.weight",
    "enc1.bias",
    "enc2.weight",
    "enc2.bias",
    "enc3.weight",
    "enc3.bias",
    "fc_mu.weight",
    "fc_mu.bias",
    "fc_logvar.weight",
    "fc_logvar.bias",
    "dec_fc.weight",
    "dec_fc.bias",
    "dec1.weight",
    "dec1.bias",
    "dec2.weight",
    "dec2.bias",
    "dec3.weight",
    "dec3.bias",
    "head.weight",
    "head.bias",
];

fn params_store(params: &VpeParams<f32>) -> Result<TensorStore> {
    let mut store = TensorStore::new(params.d_z as u32);
    let tensors: [ndarray::ArrayD<f32>; 20] = [
        params.enc1.weight.clone().into_dyn(),
        params.enc1.bias.clone().into_dyn(),
        params.enc2.weight.clone().into_dyn(),
        params.enc2.bias.clone().into_dyn(),
        params.enc3.weight.clone().into_dyn(),
        params.enc3.bias.clone().into_dyn(),
        params.fc_mu.weight.clone().into_dyn(),
        params.fc_mu.bias.clone().into_dyn(),
        params.fc_logvar.weight.clone().into_dyn(),
        params.fc_logvar.bias.clone().into_dyn(),
        params.dec_fc.weight.clone().into_dyn(),
        params.dec_fc.bias.clone().into_dyn(),
        params.dec1.weight.clone().into_dyn(),
        params.dec1.bias.clone().into_dyn(),
        params.dec2.weight.clone().into_dyn(),
        params.dec2.bias.clone().into_dyn(),
        params.dec3.weight.clone().into_dyn(),
        params.dec3.bias.clone().into_dyn(),
        params.head.weight.clone().into_dyn(),
        params.head.bias.clone().into_dyn(),
    ];
    for (name, tensor) in TENSOR_NAMES.iter().zip(tensors) {
        store.push(name, tensor)?;
    }
    Ok(store)
}

/// Write `<dir>/params.vpe` and `<dir>/meta.json`, creating the directory.
pub fn save_checkpoint(dir: &Path, params: &VpeParams<f32>, meta: &CheckpointMeta) -> Result<()> {
    if meta.d_z != params.d_z
        || meta.canvas != params.canvas
        || meta.channels != params.channels()
        || meta.class_count != params.class_count()
        || meta.version != params.version
    {
        return Err(Error::Contract(
            "checkpoint metadata disagrees with parameters".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    params_store(params)?.save(&dir.join(PARAMS_FILE))?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Data(format!("meta serialization: {e}")))?;
    fs::write(dir.join(META_FILE), json).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Load a checkpoint directory back into parameters + metadata, verifying
/// tensor shapes against the recorded architecture.
pub fn load_checkpoint(dir: &Path) -> Result<(VpeParams<f32>, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;

    let store = TensorStore::load(&dir.join(PARAMS_FILE))?;
    if store.d_z as usize != meta.d_z {
        return Err(Error::Data(format!(
            "{}: container d_z {} disagrees with metadata {}",
            dir.display(),
            store.d_z,
            meta.d_z
        )));
    }

    let mut params = VpeParams::<f32>::new(
        meta.canvas,
        meta.d_z,
        meta.channels,
        meta.class_count,
        meta.seed,
    )?;
    params.version = meta.version;

    let fetch4 = |name: &str| -> Result<ndarray::Array4<f32>> {
        store
            .get(name)?
            .clone()
            .into_dimensionality::<Ix4>()
            .map_err(|e| Error::Data(format!("tensor {name}: {e}")))
    };
    let fetch2 = |name: &str| -> Result<ndarray::Array2<f32>> {
        store
            .get(name)?
            .clone()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Data(format!("tensor {name}: {e}")))
    };
    let fetch1 = |name: &str| -> Result<ndarray::Array1<f32>> {
        store
            .get(name)?
            .clone()
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::Data(format!("tensor {name}: {e}")))
    };

    macro_rules! load_into {
        ($field:expr, $wname:literal, $bname:literal, $fetchw:ident) => {{
            let w = $fetchw($wname)?;
            let b = fetch1($bname)?;
            if w.dim() != $field.weight.dim() || b.dim() != $field.bias.dim() {
                return Err(Error::Data(format!(
                    "tensor {} shape does not match the declared architecture",
                    $wname
                )));
            }
            $field.weight = w;
            $field.bias = b;
        }};
    }

    load_into!(params.enc1, "enc1.weight", "enc1.bias", fetch4);
    load_into!(params.enc2, "enc2.weight", "enc2.bias", fetch4);
    load_into!(params.enc3, "enc3.weight", "enc3.bias", fetch4);
    load_into!(params.fc_mu, "fc_mu.weight", "fc_mu.bias", fetch2);
    load_into!(params.fc_logvar, "fc_logvar.weight", "fc_logvar.bias", fetch2);
    load_into!(params.dec_fc, "dec_fc.weight", "dec_fc.bias", fetch2);
    load_into!(params.dec1, "dec1.weight", "dec1.bias", fetch4);
    load_into!(params.dec2, "dec2.weight", "dec2.bias", fetch4);
    load_into!(params.dec3, "dec3.weight", "dec3.bias", fetch4);
    load_into!(params.head, "head.weight", "head.bias", fetch2);

    Ok((params, meta))
}

/// Standard directory name for a checkpoint of a given version.
pub fn checkpoint_dir_name(version: u64) -> String {
    format!("ckpt_{version}")
}

/// Locate the newest checkpoint (`ckpt_<version>` with the largest version)
/// under a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(v) = name.strip_prefix("ckpt_").and_then(|s| s.parse::<u64>().ok()) {
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Error::Data(format!(
            "{}: no ckpt_<version> directories found",
            run_dir.display()
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_catalog, synthesize_dataset, JitterConfig};

    fn sample_params() -> VpeParams<f32> {
        let mut p = VpeParams::new(16, 4, [4, 6, 8], 3, 11).unwrap();
        p.version = 2;
        p
    }

    fn sample_meta(p: &VpeParams<f32>) -> CheckpointMeta {
        CheckpointMeta {
            version: p.version,
            parent_version: Some(1),
            d_z: p.d_z,
            canvas: p.canvas,
            channels: p.channels(),
            class_count: p.class_count(),
            seed: 11,
            data_fingerprint: "abc123".into(),
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let params = sample_params();
        let meta = sample_meta(&params);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join(checkpoint_dir_name(params.version));
        save_checkpoint(&ckpt, &params, &meta).unwrap();
        let (back, back_meta) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(params, back);
        assert_eq!(meta, back_meta);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let params = sample_params();
        let meta = sample_meta(&params);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&a, &params, &meta).unwrap();
        save_checkpoint(&b, &params, &meta).unwrap();
        for file in [PARAMS_FILE, META_FILE] {
            let ba = std::fs::read(a.join(file)).unwrap();
            let bb = std::fs::read(b.join(file)).unwrap();
            assert_eq!(ba, bb, "{file} differs between identical saves");
        }
    }

    #[test]
    fn metadata_mismatch_is_rejected() {
        let params = sample_params();
        let mut meta = sample_meta(&params);
        meta.d_z = 8;
        let dir = tempfile::tempdir().unwrap();
        assert!(save_checkpoint(dir.path(), &params, &meta).is_err());
    }

    #[test]
    fn latest_checkpoint_picks_highest_version() {
        let dir = tempfile::tempdir().unwrap();
        for v in [1u64, 3, 2] {
            let mut p = sample_params();
            p.version = v;
            let mut m = sample_meta(&p);
            m.version = v;
            save_checkpoint(&dir.path().join(checkpoint_dir_name(v)), &p, &m).unwrap();
        }
        let latest = latest_checkpoint(dir.path()).unwrap();
        assert!(latest.ends_with("ckpt_3"));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let specs = default_catalog(2).unwrap();
        let a = synthesize_dataset(&specs, 16, 3, &JitterConfig::default(), 1).unwrap();
        let b = synthesize_dataset(&specs, 16, 3, &JitterConfig::default(), 2).unwrap();
        assert_eq!(dataset_fingerprint(&a), dataset_fingerprint(&a));
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&b));
    }
}
