//! JSON checkpoints. Output is byte-stable: maps are ordered and floats are
//! written in shortest round-trip form.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TraitModel};
use crate::adapt::AdapterState;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

const MODEL_FORMAT: &str = "aes-model";
const ADAPTER_FORMAT: &str = "aes-adapter";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub model: TraitModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub version: u32,
    pub adapter: AdapterState,
}

impl ModelCheckpoint {
    pub fn new(model: TraitModel, encoder: Option<EncoderConfig>, train: Option<TrainConfig>) -> Self {
        ModelCheckpoint {
            format: MODEL_FORMAT.into(),
            version: VERSION,
            model,
            encoder,
            train,
            provenance: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Self = serde_json::from_slice(bytes)?;
        check_header(&c.format, c.version, MODEL_FORMAT)?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read(path.as_ref())?)
    }
}

impl AdapterCheckpoint {
    pub fn new(adapter: AdapterState) -> Self {
        AdapterCheckpoint {
            format: ADAPTER_FORMAT.into(),
            version: VERSION,
            adapter,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write(path.as_ref(), &serde_json::to_vec(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = parse(&read(path.as_ref())?)?;
        check_header(&c.format, c.version, ADAPTER_FORMAT)?;
        Ok(c)
    }
}

fn parse<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    Ok(serde_json::from_slice(bytes)?)
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Checkpoint(format!("expected `{expected}` checkpoint, found `{format}`")));
    }
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let model = TraitModel::new(
            ModelConfig {
                input_dim: 5,
                hidden: 3,
                head_hidden: 2,
                dropout: 0.1,
                traits: vec!["overall".into(), "content".into()],
            },
            9,
        )
        .unwrap();
        let ckpt = ModelCheckpoint::new(model, Some(EncoderConfig::default()), Some(TrainConfig::default()));
        let bytes = ckpt.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut wrong: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        wrong["format"] = "other".into();
        assert!(ModelCheckpoint::from_bytes(&serde_json::to_vec(&wrong).unwrap()).is_err());
    }
}
