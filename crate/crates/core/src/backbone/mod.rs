//! Convolutional building blocks of the segmentation network.

pub mod block;
pub mod cbs;
pub mod path;
pub mod sampler;

pub use block::{AggBlock, BlockKind};
pub use cbs::{Cbs, CbsKind};
pub use path::{decoder_fuse, DcelanPath, DecoderStage};
pub use sampler::{DownSample, UpSample};
