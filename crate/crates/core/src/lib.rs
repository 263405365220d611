pub mod autograd;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod error;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod progressive;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autograd::Var;
pub use error::{Error, Result};
pub use tensor::Tensor;
