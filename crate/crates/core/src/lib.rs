#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autograd;
pub mod detok;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod tok;
pub mod tokenizer;
pub mod twopt;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use math::Real;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
