//! Spiking-network training lab with cross-modal time-step mixup.
//!
//! The crate is organized around a small tape-based autodiff engine
//! ([`tensor`]), leaky integrate-and-fire dynamics with a rectangular
//! surrogate gradient ([`snn`]), a truncated-geometric sequence mixer
//! ([`mixup`]), the composite training objective ([`losses`]), event/frame
//! data handling ([`data`]), and the training driver behind the `tmkt`
//! binary ([`config`], [`train`]).

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod mixup;
pub mod snn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
