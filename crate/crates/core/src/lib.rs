//! Channel attention with cross-layer memory on a small autodiff core.
//!
//! The crate is organised bottom-up: [`tensor`] holds the dense tensor type
//! and the reverse-mode tape, [`attention`] the local gate modules, [`pkcam`]
//! the cross-layer module, [`backbone`] the residual networks that host them,
//! [`complexity`] the static cost analyser and [`harness`] the data, training
//! and evaluation plumbing used by the CLI.

pub mod attention;
pub mod backbone;
pub mod complexity;
pub mod error;
pub mod harness;
pub mod params;
pub mod pkcam;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
