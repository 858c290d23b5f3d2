//! Feedback synthesis for the prying-pedestrian surveillance-evasion game.
//!
//! The pipeline: retrograde characteristics produce open-loop optimal data
//! ([`characteristics`]), a small network learns value, gradient and feedback
//! from it ([`model`]), the learned feedback is run under sample-and-hold
//! ([`closed_loop`]) and the one-interval gain or loss of each player is
//! mapped over the game set ([`gain_loss`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characteristics;
pub mod closed_loop;
pub mod error;
pub mod feedback;
pub mod gain_loss;
pub mod game;
pub mod model;

pub use error::{Error, FormatError, Result};
pub use game::{Controls, GameParams, State};
