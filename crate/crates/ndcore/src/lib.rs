//! Minimal dense-tensor math with a dynamic reverse-mode tape, an Adam
//! optimizer and seeded, splittable random streams.

pub mod error;
pub mod optim;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{NdError, Result};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::{seeded_rng, SeededRng};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
