//! Neural network machinery: a reverse-mode tape and the sheaf convolution
//! model built on it.

pub mod model;
pub mod tape;

pub use model::{
    compute_gradients, draw_noise, forward, Activation, Family, ForwardOutput, KlTerm, LayerSpec,
    NoiseBundle, ParameterStore, SheafModel, TapeBinding, TapePosterior, SHEAF_GROUP_PREFIX,
};
pub use tape::{Tape, ValueRef};
