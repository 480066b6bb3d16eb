//! Named FP32 tensor map plus the `SQLAB1` on-disk container.
//!
//! Layout: the magic line `SQLAB1\n`, a little-endian `u64` header length,
//! a JSON manifest (config, tensor table with shapes and byte offsets,
//! provenance, fold records, payload digest), then the raw little-endian
//! FP32 payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{LayerParams, Params};
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 7] = b"SQLAB1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }
}

/// Record of an offline transformation applied to a checkpoint (fold
/// parameters, rotation seeds) kept in the manifest for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub method: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub untied_head: bool,
    pub provenance: String,
    pub folds: Vec<FoldRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    endianness: String,
    dtype: String,
    config: ModelConfig,
    untied_head: bool,
    provenance: String,
    folds: Vec<FoldRecord>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    payload_sha256: String,
}

fn layer_name(layer: usize, field: &str) -> String {
    format!("layers.{layer}.{field}")
}

impl Checkpoint {
    /// Expected `(name, shape)` list implied by a config.
    pub fn expected_shapes(config: &ModelConfig, untied_head: bool) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let di = config.d_inner;
        let (ds, k) = (config.d_sem(), config.k_registers);
        let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
        for l in 0..config.n_layers {
            out.push((layer_name(l, "gamma1_sem"), vec![ds]));
            out.push((layer_name(l, "gamma1_reg"), vec![k]));
            out.push((layer_name(l, "w_qkv"), vec![3 * d, d]));
            out.push((layer_name(l, "w_o"), vec![d, d]));
            out.push((layer_name(l, "gamma2_sem"), vec![ds]));
            out.push((layer_name(l, "gamma2_reg"), vec![k]));
            out.push((layer_name(l, "w1"), vec![di, d]));
            out.push((layer_name(l, "w3"), vec![di, d]));
            out.push((layer_name(l, "w2"), vec![d, di]));
        }
        out.push(("final.gamma_sem".to_string(), vec![ds]));
        out.push(("final.gamma_reg".to_string(), vec![k]));
        if untied_head {
            out.push(("head".to_string(), vec![config.vocab_size, d]));
        }
        out
    }

    pub fn from_params(config: &ModelConfig, params: &Params, provenance: impl Into<String>) -> Self {
        let ds = config.d_sem();
        let mut tensors = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
            tensors.insert(name, Tensor::from_f64(shape, data));
        };
        let flat2 = |a: &Array2<f64>| a.iter().copied().collect::<Vec<f64>>();
        put("embed".into(), params.embed.shape().to_vec(), &flat2(&params.embed));
        for (l, lp) in params.layers.iter().enumerate() {
            let g1 = lp.gamma1.to_vec();
            let g2 = lp.gamma2.to_vec();
            put(layer_name(l, "gamma1_sem"), vec![ds], &g1[..ds]);
            put(layer_name(l, "gamma1_reg"), vec![g1.len() - ds], &g1[ds..]);
            put(layer_name(l, "w_qkv"), lp.w_qkv.shape().to_vec(), &flat2(&lp.w_qkv));
            put(layer_name(l, "w_o"), lp.w_o.shape().to_vec(), &flat2(&lp.w_o));
            put(layer_name(l, "gamma2_sem"), vec![ds], &g2[..ds]);
            put(layer_name(l, "gamma2_reg"), vec![g2.len() - ds], &g2[ds..]);
            put(layer_name(l, "w1"), lp.w1.shape().to_vec(), &flat2(&lp.w1));
            put(layer_name(l, "w3"), lp.w3.shape().to_vec(), &flat2(&lp.w3));
            put(layer_name(l, "w2"), lp.w2.shape().to_vec(), &flat2(&lp.w2));
        }
        let gf = params.gamma_final.to_vec();
        put("final.gamma_sem".into(), vec![ds], &gf[..ds]);
        put("final.gamma_reg".into(), vec![gf.len() - ds], &gf[ds..]);
        if let Some(h) = &params.head {
            put("head".into(), h.shape().to_vec(), &flat2(h));
        }
        Checkpoint {
            config: config.clone(),
            tensors,
            untied_head: params.head.is_some(),
            provenance: provenance.into(),
            folds: Vec::new(),
        }
    }

    /// Seeded random initialisation, the same one the trainer starts from.
    pub fn random_init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(config, seed);
        Ok(Checkpoint::from_params(config, &params, format!("random_init seed={seed}")))
    }

    /// Checks every tensor is present, correctly shaped and finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Checkpoint::expected_shapes(&self.config, self.untied_head);
        if expected.len() != self.tensors.len() {
            let extra: Vec<_> = self
                .tensors
                .keys()
                .filter(|n| !expected.iter().any(|(e, _)| e == *n))
                .collect();
            return Err(LabError::config(format!(
                "checkpoint has {} tensors, config implies {} (unexpected: {extra:?})",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| LabError::config(format!("missing tensor '{name}'")))?;
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(LabError::config(format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(LabError::numeric(
                    name.clone(),
                    format!("non-finite value {} at flat index {pos}", t.data[pos]),
                ));
            }
        }
        Ok(())
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LabError::config(format!("missing tensor '{name}'")))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        if t.shape.len() != 2 {
            return Err(LabError::config(format!("tensor '{name}' is not a matrix")));
        }
        Ok(Array2::from_shape_vec(
            (t.shape[0], t.shape[1]),
            t.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape checked"))
    }

    fn gains(&self, sem: &str, reg: &str) -> Result<Array1<f64>> {
        let s = self.get(sem)?;
        let r = self.get(reg)?;
        Ok(s.data.iter().chain(r.data.iter()).map(|&v| v as f64).collect())
    }

    /// Widens the stored tensors to the f64 parameter set.
    pub fn to_params(&self) -> Result<Params> {
        self.validate()?;
        let layers = (0..self.config.n_layers)
            .map(|l| {
                Ok(LayerParams {
                    gamma1: self.gains(&layer_name(l, "gamma1_sem"), &layer_name(l, "gamma1_reg"))?,
                    w_qkv: self.matrix(&layer_name(l, "w_qkv"))?,
                    w_o: self.matrix(&layer_name(l, "w_o"))?,
                    gamma2: self.gains(&layer_name(l, "gamma2_sem"), &layer_name(l, "gamma2_reg"))?,
                    w1: self.matrix(&layer_name(l, "w1"))?,
                    w3: self.matrix(&layer_name(l, "w3"))?,
                    w2: self.matrix(&layer_name(l, "w2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Params {
            embed: self.matrix("embed")?,
            layers,
            gamma_final: self.gains("final.gamma_sem", "final.gamma_reg")?,
            head: if self.untied_head { Some(self.matrix("head")?) } else { None },
        })
    }

    /// Rebuilds a checkpoint from modified parameters, keeping provenance and
    /// fold history.
    pub fn with_params(&self, params: &Params) -> Checkpoint {
        let mut out = Checkpoint::from_params(&self.config, params, self.provenance.clone());
        out.folds = self.folds.clone();
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len() as u64,
            });
        }
        let manifest = Manifest {
            format: "SQLAB1".into(),
            endianness: "little".into(),
            dtype: "fp32".into(),
            config: self.config.clone(),
            untied_head: self.untied_head,
            provenance: self.provenance.clone(),
            folds: self.folds.clone(),
            tensors: entries,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let ckpt = Checkpoint::from_bytes_unvalidated(bytes, origin)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Parses and hash-checks the container but leaves tensor contents
    /// (shapes, finiteness) to [`Checkpoint::validate`].
    pub fn from_bytes_unvalidated(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let bad = |detail: String| LabError::format(origin, detail);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing SQLAB1 magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_start = MAGIC.len() + 8;
        let payload_start = header_start
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[header_start..payload_start])
            .map_err(|e| bad(format!("manifest parse: {e}")))?;
        if manifest.format != "SQLAB1" || manifest.endianness != "little" || manifest.dtype != "fp32" {
            return Err(bad("unsupported format/endianness/dtype".into()));
        }
        let payload = &bytes[payload_start..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(bad("payload hash does not match manifest".into()));
        }
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.len as usize * 4)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad(format!("tensor '{}' runs past the payload", e.name)))?;
            if e.shape.iter().product::<usize>() != e.len as usize {
                return Err(bad(format!("tensor '{}' length disagrees with shape", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data));
        }
        let ckpt = Checkpoint {
            config: manifest.config,
            tensors,
            untied_head: manifest.untied_head,
            provenance: manifest.provenance,
            folds: manifest.folds,
        };
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn load_unvalidated(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Checkpoint::from_bytes_unvalidated(&bytes, path)
    }

    /// Human-readable manifest (config and tensor table) without payload.
    pub fn manifest_text(&self) -> String {
        let bytes = self.to_bytes();
        let len = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes")) as usize;
        String::from_utf8_lossy(&bytes[15..15 + len]).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip() {
        let ckpt = Checkpoint::random_init(&ModelConfig::tiny(4), 3).unwrap();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn register_gains_empty_without_registers() {
        let ckpt = Checkpoint::random_init(&ModelConfig::tiny(0), 3).unwrap();
        assert!(ckpt.tensors["layers.0.gamma1_reg"].data.is_empty());
        assert!(ckpt.tensors["final.gamma_reg"].data.is_empty());
        let ckpt = Checkpoint::random_init(&ModelConfig::tiny(2), 3).unwrap();
        assert_eq!(ckpt.tensors["final.gamma_reg"].shape, vec![2]);
    }

    #[test]
    fn tampered_hash_rejected() {
        let ckpt = Checkpoint::random_init(&ModelConfig::tiny(0), 3).unwrap();
        let mut bytes = ckpt.to_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("\"payload_sha256\": \"").unwrap() + 19;
        bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        let err = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn flipped_payload_rejected() {
        let ckpt = Checkpoint::random_init(&ModelConfig::tiny(0), 3).unwrap();
        let mut bytes = ckpt.to_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bytes, Path::new("mem")).is_err());
    }

    #[test]
    fn nan_names_tensor() {
        let mut ckpt = Checkpoint::random_init(&ModelConfig::tiny(0), 3).unwrap();
        ckpt.tensors.get_mut("layers.1.w2").unwrap().data[5] = f32::NAN;
        let err = ckpt.validate().unwrap_err();
        assert!(err.to_string().contains("layers.1.w2"), "{err}");
    }

    #[test]
    fn params_roundtrip_through_f32() {
        let cfg = ModelConfig::tiny(3);
        let mut p = Params::init(&cfg, 11);
        p.round_to_f32();
        let back = Checkpoint::from_params(&cfg, &p, "t").to_params().unwrap();
        assert_eq!(back, p);
    }
}
