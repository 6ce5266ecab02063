//! Model checkpoints ("IFTN", version 1).
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "IFTN" | u32 version | str phase | str fusion_mode | str config
//! | u32 entry_count | entries...
//! entry: str name | i32 ndim | i32 dims[ndim] | f32 data[product(dims)]
//! str:   u32 byte_len | utf-8 bytes
//! ```
//!
//! Tensors restore bit-exactly; loading validates every shape against the
//! target store.

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::Element;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"IFTN";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub phase: String,
    pub fusion_mode: String,
    pub config_echo: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Snapshot every store entry (weights and buffers) in insertion order,
    /// optionally restricted to names under `prefix`.
    pub fn from_store<E: Element>(
        store: &ParamStore<E>,
        phase: &str,
        fusion_mode: &str,
        config_echo: &str,
        prefix: Option<&str>,
    ) -> Self {
        let entries = store
            .iter_named()
            .filter(|(name, _)| prefix.map(|p| name.starts_with(p)).unwrap_or(true))
            .map(|(name, tensor)| CheckpointEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                data: tensor.data().iter().map(|v| v.to_f64() as f32).collect(),
            })
            .collect();
        Self {
            version: CKPT_VERSION,
            phase: phase.to_string(),
            fusion_mode: fusion_mode.to_string(),
            config_echo: config_echo.to_string(),
            entries,
        }
    }

    pub fn find(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copy matching entries into the store, validating shapes. Returns the
    /// store names the checkpoint did not cover (the caller decides whether
    /// missing namespaces are an error or a transfer trigger).
    pub fn apply_to_store<E: Element>(&self, store: &mut ParamStore<E>) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            match self.find(&name) {
                Some(entry) => {
                    if entry.shape != store.get(id).shape() {
                        return Err(CoreError::CheckpointShape {
                            name,
                            expected: store.get(id).shape().to_vec(),
                            found: entry.shape.clone(),
                        });
                    }
                    let data: Vec<E> = entry.data.iter().map(|&v| E::from_f64(v as f64)).collect();
                    store.set_values(id, &data)?;
                }
                None => missing.push(name),
            }
        }
        Ok(missing)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| CoreError::Truncated { what: "checkpoint" })?;
    let len = u32::from_le_bytes(buf4) as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)
        .map_err(|_| CoreError::Truncated { what: "checkpoint" })?;
    String::from_utf8(bytes).map_err(|_| CoreError::Truncated { what: "checkpoint" })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&ckpt.version.to_le_bytes())?;
    write_str(&mut w, &ckpt.phase)?;
    write_str(&mut w, &ckpt.fusion_mode)?;
    write_str(&mut w, &ckpt.config_echo)?;
    w.write_all(&(ckpt.entries.len() as u32).to_le_bytes())?;
    for e in &ckpt.entries {
        write_str(&mut w, &e.name)?;
        w.write_all(&(e.shape.len() as i32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as i32).to_le_bytes())?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::Truncated { what: "checkpoint" })?;
    if &magic != CKPT_MAGIC {
        return Err(CoreError::BadMagic {
            what: "checkpoint",
            expected: "IFTN",
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| CoreError::Truncated { what: "checkpoint" })?;
    let version = u32::from_le_bytes(buf4);
    if version != CKPT_VERSION {
        return Err(CoreError::CheckpointVersion {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let phase = read_str(&mut r)?;
    let fusion_mode = read_str(&mut r)?;
    let config_echo = read_str(&mut r)?;
    r.read_exact(&mut buf4)
        .map_err(|_| CoreError::Truncated { what: "checkpoint" })?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let ndim = super::flo::read_i32(&mut r, "checkpoint")? as usize;
        if ndim > 8 {
            return Err(CoreError::Truncated { what: "checkpoint" });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(super::flo::read_i32(&mut r, "checkpoint")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            r.read_exact(&mut buf4)
                .map_err(|_| CoreError::Truncated { what: "checkpoint" })?;
            *v = f32::from_le_bytes(buf4);
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    if r.read(&mut buf4)? != 0 {
        return Err(CoreError::Truncated { what: "checkpoint" });
    }
    Ok(Checkpoint {
        version,
        phase,
        fusion_mode,
        config_echo,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(4);
        for (name, shape) in [("spatial.stem.w", vec![4usize, 3, 3, 3]), ("ttn.head.b", vec![5])] {
            let n: usize = shape.iter().product();
            let t = Tensor::from_vec(
                shape,
                (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
            )
            .unwrap();
            store.add_weight(name, t).unwrap();
        }
        store
    }

    #[test]
    fn round_trip_restores_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = sample_store();
        let ckpt = Checkpoint::from_store(&store, "phase1", "attention", "k = 7", None);
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, back);

        let mut store2 = sample_store();
        // Perturb then restore.
        let id = store2.id_of("ttn.head.b").unwrap();
        let zeros = vec![0.0f32; 5];
        store2.set_values(id, &zeros).unwrap();
        let missing = back.apply_to_store(&mut store2).unwrap();
        assert!(missing.is_empty());
        assert_eq!(store2.get(id).data(), store.get(id).data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let store = sample_store();
        let mut ckpt = Checkpoint::from_store(&store, "p", "attention", "", None);
        ckpt.entries[1].shape = vec![4];
        ckpt.entries[1].data = vec![0.0; 4];
        let mut target = sample_store();
        assert!(matches!(
            ckpt.apply_to_store(&mut target),
            Err(CoreError::CheckpointShape { .. })
        ));
    }

    #[test]
    fn tampered_entry_count_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::from_store(&sample_store(), "p", "attention", "", None);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Entry count lives right after magic+version+3 strings.
        let pos = 4 + 4 + (4 + 6) + (4 + 9) + 4;
        bytes[pos] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CoreError::Truncated { what: "checkpoint" })
        ));
    }

    #[test]
    fn missing_names_are_returned_for_partial_checkpoints() {
        let store = sample_store();
        let spatial_only = Checkpoint::from_store(&store, "p", "attention", "", Some("spatial."));
        let mut target = sample_store();
        let missing = spatial_only.apply_to_store(&mut target).unwrap();
        assert_eq!(missing, vec!["ttn.head.b".to_string()]);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::from_store(&sample_store(), "p", "attention", "", None);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CoreError::CheckpointVersion { found: 99, .. })
        ));
    }
}
