//! Reference implementation of the ViT-CoMer backbone: a plain ViT branch
//! and a convolutional pyramid branch joined by bidirectional deformable
//! fusion, on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod count;
pub mod cti;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod pyramid;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod verify;
pub mod vit;

pub use config::{CoMerConfig, Toggles, Variant};
pub use error::{Error, Result};
pub use model::{CoMer, Features};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
