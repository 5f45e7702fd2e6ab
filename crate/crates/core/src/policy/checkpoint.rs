use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyError, PolicyParams};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON checkpoint. Arrays are row-major; finite values round-trip
/// bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub config: PolicyConfig,
    pub input_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub output_proj: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl PolicyCheckpoint {
    pub fn from_params(params: &PolicyParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: *params.config(),
            input_embed: params.input_embed().to_vec(),
            pos_embed: params.pos_embed().to_vec(),
            output_proj: params.output_proj().to_vec(),
            output_bias: params.output_bias().to_vec(),
        }
    }

    pub fn into_params(self) -> Result<PolicyParams, PolicyError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.config.validate()?;
        PolicyParams::from_parts(
            self.config,
            &self.input_embed,
            &self.pos_embed,
            &self.output_proj,
            &self.output_bias,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(s).map_err(|e| PolicyError::Checkpoint(e.to_string()))
    }
}

impl PolicyParams {
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        if !self.is_finite() {
            return Err(PolicyError::NonFinite("refusing to write non-finite checkpoint".into()));
        }
        fs::write(path, PolicyCheckpoint::from_params(self).to_json())
            .map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let s = fs::read_to_string(path).map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
        PolicyCheckpoint::from_json(&s)?.into_params()
    }
}
