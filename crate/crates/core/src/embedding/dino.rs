use std::path::Path;

use ndarray::{ArrayView3, Axis, Ix3};

use super::{EmbedError, EmbeddingBackbone, TokenMode};
use crate::onnx::OnnxGraph;

/// DINOv2 ViT-S/14 with registers, executed from an ONNX export.
///
/// The graph takes `pixel_values: [1, 3, R, R]` and returns the last hidden
/// state `[1, 1 + registers + patches, D]`: class token first, then the
/// register tokens, then patch tokens.
#[derive(Debug)]
pub struct DinoBackbone {
    graph: OnnxGraph,
    dim: usize,
    resolution: usize,
    registers: usize,
    token_mode: TokenMode,
}

impl DinoBackbone {
    pub const DEFAULT_REGISTERS: usize = 4;

    pub fn load(
        path: &Path,
        resolution: usize,
        dim: usize,
        registers: usize,
        token_mode: TokenMode,
    ) -> Result<Self, EmbedError> {
        let graph = OnnxGraph::load(path).map_err(EmbedError::Runtime)?;
        Ok(Self {
            graph,
            dim,
            resolution,
            registers,
            token_mode,
        })
    }
}

impl EmbeddingBackbone for DinoBackbone {
    fn name(&self) -> &str {
        super::DINO_VITS14_REG
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn input_resolution(&self) -> usize {
        self.resolution
    }

    fn is_pretrained(&self) -> bool {
        true
    }

    fn forward(&self, input: ArrayView3<f32>) -> Result<Vec<f32>, EmbedError> {
        let batch = input.insert_axis(Axis(0)).to_owned().into_dyn();
        let out = self.graph.run(vec![batch]).map_err(EmbedError::Runtime)?;
        let hidden = out
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::Runtime("graph returned no outputs".into()))?;
        let hidden = hidden
            .into_dimensionality::<Ix3>()
            .map_err(|e| EmbedError::Runtime(format!("hidden state must be [1, T, D]: {e}")))?;
        let (_, tokens, width) = hidden.dim();
        if width != self.dim || tokens < 1 + self.registers + 1 {
            return Err(EmbedError::Runtime(format!(
                "hidden state [1, {tokens}, {width}] incompatible with dim {} and {} registers",
                self.dim, self.registers
            )));
        }
        let seq = hidden.index_axis(Axis(0), 0);
        Ok(match self.token_mode {
            TokenMode::ClassToken => seq.row(0).to_vec(),
            TokenMode::MeanPatch => seq
                .slice(ndarray::s![1 + self.registers.., ..])
                .mean_axis(Axis(0))
                .expect("at least one patch token")
                .to_vec(),
        })
    }
}
