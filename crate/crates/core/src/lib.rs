pub mod autodiff;
pub mod classifier_head;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod mtff;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod sam_clip;
pub mod synth_data;

pub use error::{Error, Result};
