//! Open-set recognition with contrastive learning and attribution-guided
//! mixing augmentation.

pub mod attribution;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod runner;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
