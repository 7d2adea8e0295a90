use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    /// Row-major.
    pub values: Vec<f64>,
}

/// On-disk parameters plus whatever config the owner needs to rebuild itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        let tensors = store
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), TensorRecord { shape: t.shape.clone(), values: t.values.clone() }))
            .collect();
        Self { format_version: CHECKPOINT_VERSION, config, tensors }
    }

    /// Overwrites every tensor of `store` from this checkpoint. Names and
    /// shapes must match exactly, with no extras on either side.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &mut store.tensors {
            let rec = self
                .tensors
                .get(&t.name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks tensor `{}`", t.name)))?;
            if rec.shape != t.shape || rec.values.len() != t.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "`{}`: checkpoint shape {:?}, model shape {:?}",
                    t.name, rec.shape, t.shape
                )));
            }
            if rec.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { tensor: t.name.clone() });
            }
            t.values.copy_from_slice(&rec.values);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint format_version {}", ck.format_version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
