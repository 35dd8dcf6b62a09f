use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{SegEngine, SegError, ToyEngine, TransferEngine};

pub const SAM2_CHECKPOINT_ENV: &str = "RAMSEG_SAM2_CHECKPOINT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Directory with the exported SAM 2 graphs; falls back to `RAMSEG_SAM2_CHECKPOINT`.
    pub sam2_checkpoint: Option<PathBuf>,
}

/// Resolves `pretrained`, `toy:<seed>` or `transfer`.
pub fn load_engine(name: &str, config: &EngineConfig) -> Result<Arc<dyn SegEngine>, SegError> {
    match name {
        "transfer" => Ok(Arc::new(TransferEngine)),
        "pretrained" => load_pretrained(config),
        other => {
            let seed = other
                .strip_prefix("toy:")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| SegError::UnknownEngine(other.to_string()))?;
            Ok(Arc::new(ToyEngine::new(seed)))
        }
    }
}

fn checkpoint_dir(config: &EngineConfig) -> Result<PathBuf, SegError> {
    config
        .sam2_checkpoint
        .clone()
        .or_else(|| std::env::var_os(SAM2_CHECKPOINT_ENV).map(PathBuf::from))
        .ok_or_else(|| SegError::CheckpointMissing {
            path: "<unset>".into(),
            hint: format!("set {SAM2_CHECKPOINT_ENV} or `sam2_checkpoint` to the directory of exported SAM 2 graphs"),
        })
}

#[cfg(feature = "onnx")]
fn load_pretrained(config: &EngineConfig) -> Result<Arc<dyn SegEngine>, SegError> {
    let dir = checkpoint_dir(config)?;
    Ok(Arc::new(super::PretrainedEngine::load(&dir)?))
}

#[cfg(not(feature = "onnx"))]
fn load_pretrained(config: &EngineConfig) -> Result<Arc<dyn SegEngine>, SegError> {
    let dir = checkpoint_dir(config)?;
    Err(SegError::CheckpointMissing {
        path: dir.display().to_string(),
        hint: "this build lacks the `onnx` feature; rebuild ramseg-core with it enabled".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_resolve() {
        let cfg = EngineConfig::default();
        assert_eq!(load_engine("transfer", &cfg).unwrap().name(), "transfer");
        assert_eq!(load_engine("toy:3", &cfg).unwrap().name(), "toy:3");
        assert!(matches!(load_engine("toy:x", &cfg), Err(SegError::UnknownEngine(_))));
        assert!(matches!(load_engine("sam", &cfg), Err(SegError::UnknownEngine(_))));
    }

    #[test]
    fn pretrained_without_checkpoint_has_hint() {
        let cfg = EngineConfig {
            sam2_checkpoint: Some("/nonexistent/sam2".into()),
        };
        match load_engine("pretrained", &cfg) {
            Err(SegError::CheckpointMissing { path, hint }) => {
                assert!(path.contains("/nonexistent/sam2"));
                assert!(hint.contains(SAM2_CHECKPOINT_ENV));
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected CheckpointMissing"),
        }
    }
}
