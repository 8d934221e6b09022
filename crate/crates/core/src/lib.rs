//! Vehicle re-identification with visual-spatio-temporal path proposals.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doctests of this crate.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod lstm;
pub mod mrf;
pub mod network;
pub mod numeric;
pub mod potential;
pub mod synth;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/camera-network.md")]
pub mod book_camera_network {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/chain-mrf.md")]
pub mod book_chain_mrf {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/proposals.md")]
pub mod book_proposals {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/potentials.md")]
pub mod book_potentials {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/path-lstm.md")]
pub mod book_path_lstm {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod book_evaluation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod book_experiments {}
