//! Model: parameter store, encoder building blocks, forward passes,
//! pseudo-vocoder, and the checkpoint container.

pub mod blocks;
pub mod checkpoint;
pub mod forward;
pub mod params;
pub mod vocoder;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use params::{Bound, ModelConfig, ParamGroup, ParamStore, COND_DIM, GROUPS};
