pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod mur;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod vd;

pub use autodiff::{grad_check, Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
