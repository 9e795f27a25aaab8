//! Personalized alignment at decoding time on a desk-scale token MDP.

pub mod artifact;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod mdp;
pub mod persrm;
pub mod pipeline;
pub mod theory;
pub mod toylm;
pub mod verify;

pub use error::{PadError, Result};
