//! Progressive vision-language alignment at desk scale.
//!
//! A two-stage curriculum aligns a toy "LLM embedder" text space with a
//! pretrained toy CLIP space: stage 1 distills the frozen CLIP text
//! teacher into an MLP projector over text only; stage 2 contrastively
//! tunes the image encoder and projector while an EMA self-distillation
//! regularizer anchors the image tower to its pretrained representation.
//! A from-scratch contrastive baseline, a synthetic paired-sample world
//! with held-out classes, and retrieval/zero-shot/drift evaluation
//! harnesses round out the pipeline.

pub mod checkpoint;
pub mod curriculum;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod optim;
pub mod seeds;

pub use embedding::{DistanceMatrix, EmbeddingBatch};
pub use error::{Error, Result};
pub use curriculum::{TrainConfig, TrainMode, TrainingSetup};
pub use losses::{LossValue, Reduction};
pub use models::{Activation, EmaTeacher, LinearLayer, MlpProjector, ToyEncoder};
