//! Flat layer graphs, partition points, cost model and strategies.

pub mod checkpoint;
pub mod graph;
pub mod layer;
pub mod strategy;
pub mod zoo;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{compression_ratio, layer_prefix, param_name, ForwardCtx, ModelGraph};
pub use layer::{InplaceKind, LayerKind, LayerSpec};
pub use strategy::{Strategy, TechniqueId};
pub use zoo::{build_model, build_zoo, ArchDescriptor};
