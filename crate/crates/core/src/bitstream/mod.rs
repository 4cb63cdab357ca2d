//! Bit-exact serialization: container format, checkpoint, byte packing.

pub mod byteio;
pub mod checkpoint;
pub mod format;

pub use checkpoint::{checkpoint_hash, read_checkpoint, write_checkpoint};
pub use format::{
    measure_bpp, read_sequence, write_sequence, FramePacket, LevelPayload, SequenceHeader,
};
