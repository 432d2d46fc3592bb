pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod head;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
pub use model::{Architecture, Segmenter};
