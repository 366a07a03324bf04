//! Versioned, self-describing checkpoint container.
//!
//! A checkpoint is a JSON document holding named parameter groups. Each group
//! maps parameter paths to a shape plus row-major values, optionally with the
//! Adam state of that group, and the document carries free-form string
//! metadata (the harness stores the run configuration there).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, OptimState, ParamSet, Scalar};

pub const CHECKPOINT_FORMAT: &str = "flare-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CheckpointGroup<T> {
    pub params: ParamSet<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimState<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub precision: String,
    pub meta: BTreeMap<String, String>,
    pub groups: BTreeMap<String, CheckpointGroup<T>>,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            precision: T::NAME.to_string(),
            meta: BTreeMap::new(),
            groups: BTreeMap::new(),
        }
    }

    pub fn add_group(&mut self, name: &str, params: ParamSet<T>, optim: Option<OptimState<T>>) {
        self.groups
            .insert(name.to_string(), CheckpointGroup { params, optim });
    }

    pub fn group(&self, name: &str) -> Result<&CheckpointGroup<T>, NnError> {
        self.groups
            .get(name)
            .ok_or_else(|| NnError::Format(format!("checkpoint has no group `{name}`")))
    }

    pub fn to_json(&self) -> Result<String, NnError> {
        serde_json::to_string(self).map_err(|e| NnError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let ck: Self = serde_json::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NnError::Format(format!(
                "not a checkpoint: format `{}`",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.precision != T::NAME {
            return Err(NnError::Format(format!(
                "checkpoint precision {} does not match {}",
                ck.precision,
                T::NAME
            )));
        }
        for (name, g) in &ck.groups {
            for (path, t) in g.params.iter() {
                if t.len() != t.shape().iter().product::<usize>() {
                    return Err(NnError::Format(format!(
                        "{name}/{path}: shape and data disagree"
                    )));
                }
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
