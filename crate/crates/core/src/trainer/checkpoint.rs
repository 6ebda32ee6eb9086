//! Single-file checkpoints: an 8-byte little-endian manifest length, a JSON
//! manifest, then every tensor as little-endian `f64`s in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, RngState, Tensor};

pub const CHECKPOINT_FORMAT: &str = "vecformer-ckpt/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub rng: RngState,
    pub feat_dim: usize,
    pub num_classes: Option<usize>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    stage: Stage,
    config: TrainConfig,
    rng: RngState,
    feat_dim: usize,
    num_classes: Option<usize>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Format {
        file: "checkpoint".into(),
        line: 0,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(_, name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            stage: self.stage,
            config: self.config.clone(),
            rng: self.rng.clone(),
            feat_dim: self.feat_dim,
            num_classes: self.num_classes,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset * 8);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("truncated header"))?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| corrupt("truncated manifest"))?;
        // Check the version before the full schema so old files get a clear
        // message rather than a field error.
        let probe: serde_json::Value = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
        match probe.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => {
                return Err(corrupt(format!(
                    "checkpoint format {other:?}, expected {CHECKPOINT_FORMAT}"
                )))
            }
        }
        let manifest: Manifest = serde_json::from_value(probe).map_err(|e| corrupt(e.to_string()))?;
        let payload = &bytes[8 + len..];
        let mut params = ParamStore::new();
        for e in manifest.tensors {
            let count: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let raw = payload
                .get(start..start + count * 8)
                .ok_or_else(|| corrupt(format!("payload too short for {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.add(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok(Self {
            stage: manifest.stage,
            config: manifest.config,
            rng: manifest.rng,
            feat_dim: manifest.feat_dim,
            num_classes: manifest.num_classes,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn sample(seed: u64, count: usize) -> Checkpoint {
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        for k in 0..count {
            let (r, c) = (1 + rng.below(5), 1 + rng.below(5));
            let mut t = rng.normal_tensor(r, c, 1e3);
            t.data_mut()[0] = f64::MIN_POSITIVE * rng.uniform();
            params.add(format!("p{k}"), t).unwrap();
        }
        Checkpoint {
            stage: Stage::Stage1,
            config: TrainConfig::default(),
            rng: rng.state(),
            feat_dim: 7,
            num_classes: Some(3),
            params,
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let mut bytes = sample(0, 2).to_bytes();
        let pos = bytes.windows(4).position(|w| w == b"ckpt").unwrap();
        bytes[pos + 5] = b'9';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("expected vecformer-ckpt/1"), "{err}");
    }

    #[test]
    fn truncated_payload_is_detected() {
        let bytes = sample(1, 3).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample(2, 4);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), count in 0usize..6) {
            let ck = sample(seed, count);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            for ((_, a, ta), (_, b, tb)) in ck.params.iter().zip(back.params.iter()) {
                prop_assert_eq!(a, b);
                let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(back, ck);
        }
    }
}
