//! Complex convolution recurrent encoder/decoder shared by the enhancement
//! and keyword branches.

pub mod complex;
pub mod conv;
pub mod decoder;
pub mod encoder;
pub mod lstm;
pub mod reconstruct;

pub use complex::{spectrogram_batch, ComplexTensor};
pub use conv::{ComplexConv2d, ComplexConvBlock, ComplexConvSpec};
pub use decoder::{BottleneckConfig, Decoder};
pub use encoder::{frame_energy, Encoder, EncoderConfig, EncoderFeatureStack, EncoderState, LayerShape};
pub use lstm::{ComplexLinear, ComplexLstm, ComplexLstmState, Lstm, LstmState};
pub use reconstruct::{apply_mask, Reconstructor};
