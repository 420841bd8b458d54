//! Minimal dense tensor engine: fp64 tensors, a reverse-mode tape, a named
//! parameter store and an adaptive-moment optimizer.

mod optim;
mod store;
mod tape;
mod tensor;

pub use optim::Adam;
pub use store::{ParameterStore, Session};
pub use tape::{sign, softplus, Binary, Tape, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
