//! Frozen transformer-encoder classifier with LoRA adapters on the query,
//! value and output projections of every layer.

mod adapter;
mod backbone;
mod checkpoint;
mod linearized;
mod network;

pub use adapter::{init_adapter, lora_forward, AdapterTarget, LoraAdapter, Projection, DEFAULT_ALPHA, DEFAULT_DROPOUT};
pub use backbone::{init_backbone, BackboneConfig, EncoderLayer, FrozenBackbone, Linear, NUM_CLASSES};
pub(crate) use checkpoint::{check_header, resolve_backbone};
pub use checkpoint::{load_model, save_model, ModelCheckpoint, CHECKPOINT_VERSION};
pub use linearized::{BlockLinearization, LinearBlock, LinearClassifier, LinearizedClassifier, LogitLinearization};
pub use network::{AdapterTrace, ForwardCache, LayerTrace, LoraModel, Mode};
