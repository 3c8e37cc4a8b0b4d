//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Every operation appends a
//! node that stores its value; [`Graph::backward`] walks the nodes in reverse
//! creation order. Trainable weights live in a [`ParamSet`] and are copied into
//! a graph with [`ParamSet::bind`].

mod conv;
mod graph;
mod nn;
mod optim;
mod tensor;

pub use conv::{reflect_index, ConvSpec, PadMode};
pub use graph::{Function, Gradients, Graph, Var};
pub use nn::{BoundParams, Conv2d, Init, ParamSet};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Tensor, TensorError};
