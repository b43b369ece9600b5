//! WaveSense: feed-forward spiking networks that realize dilated temporal
//! convolutions through synaptic time constants, with everything needed to
//! run them end to end: an audio-to-spikes frontend, a from-scratch BPTT
//! engine with surrogate gradients, training, and streaming detection
//! metrics.

// Validation deliberately writes `!(x > 0.0)` so NaN fails closed, and
// the simulation loops co-index several state arrays per neuron.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod audio;
pub mod autodiff;
pub mod data;
pub mod eval;
pub mod loss;
pub mod net;
pub mod neuron;
pub mod signal;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};
