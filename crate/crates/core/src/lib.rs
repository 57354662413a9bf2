//! Memory-augmented neural networks under simulated fixed-point and binary
//! quantization, with dot-product and bounded Hamming-similarity addressing.

pub mod addressing;
pub mod data;
pub mod diag;
pub mod fxp;
pub mod model;
pub mod similarity;
pub mod train;

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Fxp(#[from] fxp::FxpError),
    #[error(transparent)]
    Similarity(#[from] similarity::SimilarityError),
    #[error(transparent)]
    Addressing(#[from] addressing::AddressingError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Diag(#[from] diag::DiagError),
}
