//! Thin wrapper over `tract-onnx` used by the pretrained adapters.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::ArrayD;
use tract_onnx::prelude::*;

pub(crate) struct OnnxGraph {
    path: PathBuf,
    plan: Arc<TypedRunnableModel>,
}

impl std::fmt::Debug for OnnxGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxGraph").field("path", &self.path).finish()
    }
}

impl OnnxGraph {
    pub(crate) fn load(path: &Path) -> Result<Self, String> {
        let plan = tract_onnx::onnx()
            .model_for_path(path)
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| format!("{}: {e:#}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            plan,
        })
    }

    pub(crate) fn run(&self, inputs: Vec<ArrayD<f32>>) -> Result<Vec<ArrayD<f32>>, String> {
        let inputs: TVec<TValue> = inputs.into_iter().map(|a| Tensor::from(a).into_tvalue()).collect();
        let outputs = self
            .plan
            .run(inputs)
            .map_err(|e| format!("{}: {e:#}", self.path.display()))?;
        outputs
            .iter()
            .map(|t| {
                t.to_plain_array_view::<f32>()
                    .map(|v| v.to_owned())
                    .map_err(|e| format!("{}: output is not f32: {e}", self.path.display()))
            })
            .collect()
    }
}
