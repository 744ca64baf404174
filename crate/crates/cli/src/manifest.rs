//! Run manifests: everything a training run consumed, so it can be repeated.

use std::path::{Path, PathBuf};

use geokernel::irl::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const KERNEL_FILE: &str = "kernel.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Git-style object hash: SHA-256 over `"<kind> <len>\0"` and the bytes.
pub fn content_hash(kind: &str, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind} {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub hash: String,
}

impl InputFile {
    pub fn read(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let input = InputFile {
            path: path.to_path_buf(),
            hash: content_hash("blob", &bytes),
        };
        Ok((input, bytes))
    }

    /// Re-reads the file and checks it is unchanged.
    pub fn verify(&self) -> Result<Vec<u8>, CliError> {
        let (now, bytes) = InputFile::read(&self.path)?;
        if now.hash != self.hash {
            return Err(CliError::Usage(format!(
                "{} changed since the manifest was written ({} != {})",
                self.path.display(),
                now.hash,
                self.hash
            )));
        }
        Ok(bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub checkpoint: PathBuf,
    pub kernel: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub traces: Vec<InputFile>,
    pub resume: Option<InputFile>,
    pub outputs: Outputs,
    /// Hash of the config and every input; identical for reruns.
    pub input_hash: String,
}

impl RunManifest {
    pub fn new(config: TrainConfig, traces: Vec<InputFile>, resume: Option<InputFile>) -> Self {
        let input_hash = inputs_hash(&config, &traces, resume.as_ref());
        RunManifest {
            format_version: MANIFEST_VERSION,
            command: "train".into(),
            seed: config.seed,
            config,
            traces,
            resume,
            outputs: Outputs {
                checkpoint: CHECKPOINT_FILE.into(),
                kernel: KERNEL_FILE.into(),
                metrics: METRICS_FILE.into(),
            },
            input_hash,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(CliError::Usage(format!(
                "{}: manifest version {} is not {MANIFEST_VERSION}",
                path.display(),
                m.format_version
            )));
        }
        let expected = inputs_hash(&m.config, &m.traces, m.resume.as_ref());
        if expected != m.input_hash {
            return Err(CliError::Usage(format!("{}: input hash does not match its contents", path.display())));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Hash of the config plus the input hashes; paths do not take part, so
/// moved inputs still match.
fn inputs_hash(config: &TrainConfig, traces: &[InputFile], resume: Option<&InputFile>) -> String {
    #[derive(Serialize)]
    struct Inputs<'a> {
        config: &'a TrainConfig,
        traces: Vec<&'a str>,
        resume: Option<&'a str>,
    }
    let inputs = Inputs {
        config,
        traces: traces.iter().map(|t| t.hash.as_str()).collect(),
        resume: resume.map(|r| r.hash.as_str()),
    };
    content_hash("manifest", serde_json::to_string(&inputs).expect("inputs serialize").as_bytes())
}

/// Stable hash of a training config, stored in checkpoints.
pub fn config_hash(config: &TrainConfig) -> String {
    content_hash("config", serde_json::to_string(config).expect("config serializes").as_bytes())
}
