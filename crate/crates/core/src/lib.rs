//! Self-supervised domain adaptation of a small vision transformer, with
//! parameter-efficient tuning regimes, a supervised fine-tuning stage, test-time
//! training and label-free evaluation tools.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod optim;
pub mod peft;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{ParamStore, Tensor};
