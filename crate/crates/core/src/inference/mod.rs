//! Constant-memory recurrent decoding.
//!
//! A [`RecurrentState`] holds one head's `d × d` key-value summary.
//! [`Decoder`] runs a whole [`crate::model::Model`] token by token with the
//! same rotations, norms and gates as the parallel forward pass, so the two
//! produce the same logits.

mod decoder;
mod state;

pub use decoder::{argmax, decode, decode_with, teacher_forced_logits, DecodeOutput, Decoder, Sampler, DECODER_FORMAT};
pub use state::{Algorithm, RecurrentState};
