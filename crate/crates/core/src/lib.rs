//! Concept discovery and learning for concept bottleneck models.

pub mod ablation;
pub mod cbm;
pub mod concept_learning;
pub mod concept_pool;
pub mod corpus;
pub mod dataset;
pub mod embeddings;
pub mod mi;
pub mod packets;
pub mod pipeline;
pub mod protocol;
pub mod selection;
pub mod stats;
pub mod synth;
