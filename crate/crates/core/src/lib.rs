//! Desk-scale two-stream video action recognition with multi-stage feature
//! fusion and ordered temporal transformation modeling.
//!
//! The crate builds everything from the ground up on a small dense-tensor
//! engine with reverse-mode automatic differentiation, so every piece of the
//! model is checkable against finite differences:
//!
//! - [`tensor`]: tensors, the autodiff graph, SGD with momentum, grad checking
//! - [`params`]: named parameter storage shared by all model components
//! - [`backbone`]: small residual conv backbone exposing per-stage features
//! - [`fusion`]: per-stage fusion of appearance and motion features
//! - [`ttn`]: temporal transformation network over adjacent snippet pairs
//! - [`pipeline`]: segment sampling, two-stream assembly, consensus, predict
//! - [`io`]: frame/flow/motion-vector/checkpoint formats and the synthetic
//!   clip generator

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod io;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod ttn;

pub use error::{CoreError, Result};
pub use tensor::{Element, Graph, Tensor, Var};
