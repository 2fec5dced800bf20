pub mod autograd;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod flat;
pub mod gradcheck;
pub mod hcam;
pub mod hed;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod sara;
pub mod stubs;
pub mod trainer;

pub use error::{Error, Result};
