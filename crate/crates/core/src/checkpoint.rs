//! Single-file checkpoints: a magic line, a little-endian `u64` manifest
//! length, a JSON manifest, then raw little-endian `f64` payload in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::network::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 12] = b"SCRWKV-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .store
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec_pretty(&Manifest {
            format_version: FORMAT_VERSION,
            model: self.model,
            tensors,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: String| Error::Checkpoint(m);
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| bad("not a checkpoint (bad magic)".into()))?;
        if rest.len() < 8 {
            return Err(bad("truncated header".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(bad("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..len])
            .map_err(|e| bad(format!("corrupt manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let payload = &rest[len..];
        let mut expected = 0u64;
        let mut store = ParamStore::new();
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!(
                    "tensor {} has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected {
                return Err(bad(format!(
                    "tensor {} at offset {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + 8 * n;
            let raw = payload
                .get(e.offset as usize..end)
                .ok_or_else(|| bad(format!("payload truncated in tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.get(&e.name).is_ok() {
                return Err(bad(format!("tensor {} listed twice", e.name)));
            }
            store.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
            expected = end as u64;
        }
        if payload.len() as u64 != expected {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected
            )));
        }
        Ok(Checkpoint {
            model: manifest.model,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&read_bytes(path)?)
    }

    /// Loads weights for `model`: every tensor must match its expected shape
    /// and no unknown tensor may be present.
    pub fn load_for(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        model.check_store(&ckpt.store)?;
        Ok(Checkpoint {
            model: *model,
            store: ckpt.store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            sciu_layers: 2,
            grid: 4,
            decoder_dim: 8,
            height: 32,
            width: 32,
            ..ModelConfig::default()
        }
    }

    fn ckpt(seed: u64) -> Checkpoint {
        Checkpoint {
            model: toy(),
            store: toy().init(seed).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        let c = ckpt(3);
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.model, c.model);
        for ((na, a), (nb, b)) in c.store.iter().zip(back.store.iter()) {
            assert_eq!(na, nb);
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn different_config_names_first_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        ckpt(0).save(&p).unwrap();
        let other = ModelConfig {
            decoder_dim: 12,
            ..toy()
        };
        let err = Checkpoint::load_for(&p, &other).unwrap_err().to_string();
        assert!(err.contains("decoder.proj0.w"), "{err}");
    }

    #[test]
    fn unknown_tensors_listed() {
        let mut c = ckpt(0);
        c.store.insert("extra.a", Tensor::zeros(&[2]));
        c.store.insert("extra.b", Tensor::zeros(&[1]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        c.save(&p).unwrap();
        let err = Checkpoint::load_for(&p, &toy()).unwrap_err().to_string();
        assert!(err.contains("extra.a") && err.contains("extra.b"), "{err}");
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = ckpt(1).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut broken = bytes;
        broken[MAGIC.len() + 8] = b'#';
        assert!(Checkpoint::from_bytes(&broken)
            .unwrap_err()
            .to_string()
            .contains("manifest"));
    }
}
