//! Convolutional network engine and the point proposal model.

pub mod io;
pub mod layers;
pub mod model;
pub mod tensor;

pub use io::{load, load_for_grid, save};
pub use model::{outputs_from_raw, sigmoid, Model, NetConfig, NetOutput, RawOutput, Tape, CONF_EPS};
pub use tensor::{Scalar, Tensor};
