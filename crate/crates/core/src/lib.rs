pub mod alignment;
pub mod augmentation;
pub mod ckepe;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod nn;
pub mod scalar;
pub mod text;
pub(crate) mod util;
pub mod zeroshot;

pub use error::{MerlError, Result};
pub use scalar::Scalar;

pub type MerlModel32 = encoders::MerlModel<f32>;
pub type MerlModel64 = encoders::MerlModel<f64>;
pub type SimilarityMatrix32 = alignment::SimilarityMatrix<f32>;
pub type SimilarityMatrix64 = alignment::SimilarityMatrix<f64>;
