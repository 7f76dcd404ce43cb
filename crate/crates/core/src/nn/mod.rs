//! Minimal neural-network toolkit: a gradient tape, parameter storage, transformer
//! layers and the AdamW optimiser.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{causal_mask, sinusoidal_positions, Attention, CrossLayer, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear};
pub use optim::{global_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamRecord, ParamStore};
pub use tape::{Mat, Tape, Var};
