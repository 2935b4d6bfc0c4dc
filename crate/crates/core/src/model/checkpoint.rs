use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{check_params, init_params, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{io, NamedTensors};

/// Parameters plus the config and step that produced them. On disk:
/// `<name>.tfrx` holds the tensors, `<name>.json` the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NamedTensors<f32>,
    pub config: ModelConfig,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    step: u64,
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl Checkpoint {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&config, seed)?,
            config,
            step: 0,
        })
    }

    pub fn new(params: NamedTensors<f32>, config: ModelConfig, step: u64) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self {
            params,
            config,
            step,
        })
    }

    /// The BPE table used by both the subword encoder and the decoder.
    pub fn shared_bpe_embedding(&self) -> &crate::tensor::Tensor<f32> {
        self.params
            .get("embed/bpe")
            .expect("checked at construction")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save(path, &self.params)?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            step: self.step,
        };
        crate::corpus::write_json(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = io::load(path)?;
        let side = sidecar_path(path);
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let Sidecar { config, step } = serde_json::from_slice(&bytes)?;
        Self::new(params, config, step)
    }
}
