pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod hypernet;
pub mod image;
pub mod nn;
pub mod prng;
pub mod repr;
pub mod sampling;
pub mod spectral;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use prng::Prng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
