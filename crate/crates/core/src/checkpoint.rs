//! Policy checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{json_hash, write_json, FileHeader};
use crate::policy::{MlpShape, PolicyParams, ACTION_DIM, OBS_DIM, OBS_LAYOUT_VERSION};

pub const CHECKPOINT_FORMAT: &str = "trackarena.checkpoint";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Random initialization, not trained.
    Init,
    Bc,
    SingleRl,
    MultiRl,
    MultiRlOpponent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub schema_version: u32,
    pub header: FileHeader,
    pub phase: Phase,
    pub obs_layout_version: u32,
    /// Dense layer sizes, input to output.
    pub layer_sizes: Vec<usize>,
    /// Every weight and bias, layer by layer (`W` row-major then `b`).
    pub weights: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, phase: Phase, header: FileHeader) -> Self {
        let off = params.shape.log_std_offset();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            header,
            phase,
            obs_layout_version: OBS_LAYOUT_VERSION,
            layer_sizes: params.shape.sizes.clone(),
            weights: params.data[..off].to_vec(),
            log_std: params.data[off..].to_vec(),
        }
    }

    pub fn retagged(&self, phase: Phase) -> Self {
        Self {
            phase,
            ..self.clone()
        }
    }

    pub fn params(&self) -> Result<PolicyParams> {
        if self.format != CHECKPOINT_FORMAT || self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Load(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.schema_version
            )));
        }
        if self.obs_layout_version != OBS_LAYOUT_VERSION {
            return Err(Error::Load(format!(
                "checkpoint observation layout v{} does not match v{OBS_LAYOUT_VERSION}",
                self.obs_layout_version
            )));
        }
        let n = self.layer_sizes.len();
        if n < 2 || self.layer_sizes[0] != OBS_DIM || self.layer_sizes[n - 1] != ACTION_DIM {
            return Err(Error::Load(format!("bad layer sizes {:?}", self.layer_sizes)));
        }
        let shape = MlpShape::new(&self.layer_sizes[1..n - 1]);
        if self.weights.len() != shape.log_std_offset() || self.log_std.len() != ACTION_DIM {
            return Err(Error::Load("checkpoint parameter count does not match its shape".into()));
        }
        let mut data = self.weights.clone();
        data.extend_from_slice(&self.log_std);
        let params = PolicyParams { shape, data };
        if !params.is_finite() {
            return Err(Error::Load("checkpoint holds non-finite parameters".into()));
        }
        Ok(params)
    }

    pub fn hash(&self) -> Result<String> {
        json_hash(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Load(format!("cannot read checkpoint {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Load(format!("cannot parse checkpoint {}: {e}", path.display())))
    }
}
