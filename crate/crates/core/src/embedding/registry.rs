use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EmbedError, EmbeddingBackbone, TestBackbone, TokenMode, REFERENCE_DIM};

pub const DINO_VITS14_REG: &str = "dinov2-vits14-reg";
pub const DINO_CHECKPOINT_ENV: &str = "RAMSEG_DINO_CHECKPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// ONNX export of the DINOv2 backbone; falls back to `RAMSEG_DINO_CHECKPOINT`.
    pub dino_checkpoint: Option<PathBuf>,
    pub token_mode: TokenMode,
    pub embed_resolution: usize,
    pub registers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dino_checkpoint: None,
            token_mode: TokenMode::ClassToken,
            embed_resolution: 518,
            registers: 4,
        }
    }
}

impl BackboneConfig {
    fn resolved_checkpoint(&self) -> Option<PathBuf> {
        self.dino_checkpoint
            .clone()
            .or_else(|| std::env::var_os(DINO_CHECKPOINT_ENV).map(PathBuf::from))
    }
}

pub struct LoadedBackbone {
    pub backbone: Arc<dyn EmbeddingBackbone>,
    /// Set when the requested backbone could not be loaded and a fallback was used.
    pub diagnostic: Option<String>,
}

impl std::fmt::Debug for LoadedBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedBackbone")
            .field("backbone", &self.backbone.name())
            .field("diagnostic", &self.diagnostic)
            .finish()
    }
}

fn fallback(config: &BackboneConfig, diagnostic: String) -> LoadedBackbone {
    tracing::warn!("{diagnostic}");
    LoadedBackbone {
        backbone: Arc::new(TestBackbone::new(0, REFERENCE_DIM).with_resolution(config.embed_resolution)),
        diagnostic: Some(diagnostic),
    }
}

/// Resolves a backbone by registry name: `dinov2-vits14-reg` or `test:<seed>`.
///
/// A missing DINOv2 checkpoint degrades to `test:0` at 384 dims and the
/// returned diagnostic says why.
pub fn load_backbone(name: &str, config: &BackboneConfig) -> Result<LoadedBackbone, EmbedError> {
    if let Some(seed) = name.strip_prefix("test:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| EmbedError::UnknownBackbone(name.to_string()))?;
        return Ok(LoadedBackbone {
            backbone: Arc::new(TestBackbone::new(seed, REFERENCE_DIM).with_resolution(config.embed_resolution)),
            diagnostic: None,
        });
    }
    if name != DINO_VITS14_REG {
        return Err(EmbedError::UnknownBackbone(name.to_string()));
    }
    let Some(path) = config.resolved_checkpoint() else {
        return Ok(fallback(
            config,
            format!(
                "no checkpoint for `{DINO_VITS14_REG}`; set {DINO_CHECKPOINT_ENV} to its ONNX export. Using test:0 instead"
            ),
        ));
    };
    if !path.is_file() {
        return Ok(fallback(
            config,
            format!(
                "checkpoint {} for `{DINO_VITS14_REG}` not found; using test:0 instead",
                path.display()
            ),
        ));
    }
    load_dino(&path, config)
}

#[cfg(feature = "onnx")]
fn load_dino(path: &std::path::Path, config: &BackboneConfig) -> Result<LoadedBackbone, EmbedError> {
    let dino = super::DinoBackbone::load(
        path,
        config.embed_resolution,
        REFERENCE_DIM,
        config.registers,
        config.token_mode,
    )?;
    Ok(LoadedBackbone {
        backbone: Arc::new(dino),
        diagnostic: None,
    })
}

#[cfg(not(feature = "onnx"))]
fn load_dino(path: &std::path::Path, config: &BackboneConfig) -> Result<LoadedBackbone, EmbedError> {
    Ok(fallback(
        config,
        format!(
            "checkpoint {} present but this build lacks the `onnx` feature; using test:0 instead",
            path.display()
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_backbone_by_name() {
        let loaded = load_backbone("test:7", &BackboneConfig::default()).unwrap();
        assert_eq!(loaded.backbone.name(), "test:7");
        assert_eq!(loaded.backbone.dim(), 384);
        assert!(loaded.diagnostic.is_none());
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(matches!(
            load_backbone("resnet50", &BackboneConfig::default()),
            Err(EmbedError::UnknownBackbone(_))
        ));
        assert!(load_backbone("test:abc", &BackboneConfig::default()).is_err());
    }

    #[test]
    fn missing_checkpoint_degrades_with_diagnostic() {
        let config = BackboneConfig {
            dino_checkpoint: Some("/nonexistent/dino.onnx".into()),
            ..Default::default()
        };
        let loaded = load_backbone(DINO_VITS14_REG, &config).unwrap();
        assert!(!loaded.backbone.is_pretrained());
        assert_eq!(loaded.backbone.dim(), 384);
        assert!(loaded.diagnostic.unwrap().contains("not found"));
    }
}
