pub mod amcm;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cshf;
pub mod error;
pub mod gbst;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod sciu;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wkv;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
