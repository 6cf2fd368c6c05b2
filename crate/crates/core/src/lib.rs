//! Desk-scale DCCRN-KWS: a complex convolution recurrent enhancement
//! network whose encoder is shared with a dilated temporal convolution
//! keyword spotter, plus the simulation, training and evaluation pipeline
//! around it.

pub mod audio_dsp;
pub mod cli;
pub mod config;
pub mod context_bias;
pub mod dccrn;
pub mod error;
pub mod evaluate;
pub mod feature_merge;
pub mod kws_head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
