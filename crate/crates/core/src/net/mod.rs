//! Convolutional encoder with hand-written reverse mode, and its checkpoint format.

mod checkpoint;
mod encoder;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    FORMAT_VERSION, MAGIC,
};
pub use encoder::{BlockConfig, BlockTrace, EncoderConfig, ForwardTrace, Network, Pool};
pub use tensor::{Gradients, ParamSet, Tensor};
