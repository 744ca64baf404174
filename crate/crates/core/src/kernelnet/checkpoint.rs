use serde::{Deserialize, Serialize};

use super::params::{KernelConfig, KernelParameters};
use super::KernelError;
use crate::numeric::Tensor;
use crate::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON document holding every tensor of one kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCheckpoint {
    pub format_version: u32,
    pub config: KernelConfig,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: String,
    pub tensors: Vec<NamedTensor>,
}

impl KernelCheckpoint {
    pub fn from_params<T: Scalar>(params: &KernelParameters<T>, config_hash: impl Into<String>) -> Self {
        let tensors = params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossless()).collect(),
            })
            .collect();
        KernelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config: params.config.clone(),
            config_hash: config_hash.into(),
            tensors,
        }
    }

    pub fn to_params<T: Scalar>(&self) -> Result<KernelParameters<T>, KernelError> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(KernelError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let layout = self.config.layout();
        if layout.len() != self.tensors.len() {
            return Err(KernelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, _), nt) in layout.iter().zip(&self.tensors) {
            if *name != nt.name {
                return Err(KernelError::Checkpoint(format!(
                    "expected tensor `{name}`, found `{}`",
                    nt.name
                )));
            }
            let data = nt.data.iter().map(|&v| T::of(v)).collect();
            let t = Tensor::new(nt.shape.clone(), data)
                .map_err(|e| KernelError::Checkpoint(format!("{name}: {e}")))?;
            tensors.push(t);
        }
        KernelParameters::from_tensors(self.config.clone(), tensors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, KernelError> {
        serde_json::from_str(s).map_err(|e| KernelError::Checkpoint(e.to_string()))
    }
}
