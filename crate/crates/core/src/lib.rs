//! Retrieval-augmented few-shot segmentation.
//!
//! A query image is embedded, the `k` most similar annotated exemplars are
//! pulled from a small flat index, each exemplar is encoded as a memory
//! (image features fused with its mask), and a promptless decoder conditioned
//! on those memories produces the mask.
//!
//! Module map:
//!
//! * [`data`]: images, label masks, manifests, volume slicing, preprocessing.
//! * [`embedding`]: backbone interface, unit-norm embeddings, seeded test backbone.
//! * [`index`]: exact squared-L2 flat index with persistence and random baseline.
//! * [`seg`]: memory encoding, memory attention and decoding engines plus the
//!   end-to-end pipeline.
//! * [`eval`]: Dice, protocol runner, ablations, stratification, benchmarking, reports.

pub mod data;
pub mod embedding;
pub mod eval;
pub mod index;
#[cfg(feature = "onnx")]
mod onnx;
pub mod seg;

pub use data::{
    DataError, DatasetManifest, ImageSlice, IntensityMode, LabelMask, PreprocessSpec, Provenance,
    SampleRecord,
};
pub use embedding::{EmbedError, Embedding, EmbeddingBackbone, TestBackbone};
pub use index::{FlatIndex, IndexError, RetrievalHit, SharedIndex};
pub use seg::{
    MemoryBank, MemoryEntry, Pipeline, RetrievalStrategy, SegEngine, SegError, SegmentOptions,
    SegmentationResult,
};
