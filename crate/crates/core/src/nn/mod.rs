//! Neural-network primitives on the tape: convolution, normalization,
//! interpolation, deformable sampling, losses, and the parameterized layers
//! built from them.

pub mod conv;
pub mod deform;
pub mod interp;
pub mod layers;
pub mod loss;
pub mod norm;

pub use layers::{Conv2d, Ffn, LayerNorm, Linear, Mhsa, LN_EPS};
