pub mod config;
pub mod graph;
pub mod icc;
pub mod network;

pub use config::{Ablation, FusionInput, ModelConfig};
pub use graph::{GraphBuilder, GraphDescription, Layer, LayerKind, Tap};
pub use icc::{build_icc, vgg16_front_end};
pub use network::{init_parameters, Model, ParameterSet};
