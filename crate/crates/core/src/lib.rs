//! Hard visual attention classification: a restricted receptive-field patch
//! classifier, an attention cell that picks glimpse locations, the staged
//! training procedure, and evaluation tooling, all on a small
//! reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod params;
pub mod policies;
pub mod representation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
