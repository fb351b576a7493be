//! Bounding-and-filling caption generation.
//!
//! A caption is first *bounded*: an autoregressive head predicts a short
//! sequence of typed phrase boxes (NP/VP/CP/OTHER, each with a word count).
//! The boxes are then *filled* by one shared decoder, either all at once
//! (non-autoregressive, NA) or one box per step (semi-autoregressive, SA).
//! A plain left-to-right (AR) decoder over the same weights serves as the
//! latency baseline.

pub mod boxes;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use error::{Error, ErrorKind, Result};
