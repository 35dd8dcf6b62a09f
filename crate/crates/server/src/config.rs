use std::path::PathBuf;

use ramseg_core::data::PreprocessSpec;
use ramseg_core::embedding::{BackboneConfig, DINO_VITS14_REG};
use ramseg_core::seg::EngineConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// Holds `base.json`, `journal.jsonl` and the `accepted/` spool.
    pub samples_dir: PathBuf,
    /// Binary index written at build time; defaults to `index.bin` in `samples_dir`.
    pub index_path: Option<PathBuf>,
    pub engine: String,
    pub backbone: String,
    pub default_k: usize,
    /// Concurrent inference requests before answering 503.
    pub max_inflight: usize,
    /// Request body limit in bytes.
    pub max_body_bytes: usize,
    pub preprocess: PreprocessSpec,
    pub engine_config: EngineConfig,
    pub backbone_config: BackboneConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            samples_dir: PathBuf::from("ramseg-data"),
            index_path: None,
            engine: "pretrained".into(),
            backbone: DINO_VITS14_REG.into(),
            default_k: 16,
            max_inflight: 4,
            max_body_bytes: 64 << 20,
            preprocess: PreprocessSpec::default(),
            engine_config: EngineConfig::default(),
            backbone_config: BackboneConfig::default(),
        }
    }
}
