//! Training objective: cross-modal contrast between ECG and report
//! embeddings, plus uni-modal contrast between two dropout views of the
//! ECG embedding.

mod dropout;
mod loss;
mod pretrain;

pub use dropout::{
    latent_dropout_views, latent_dropout_views_with, uma_loss, uma_loss_with_grad, DropoutViewPair,
    DEFAULT_DROPOUT_RATIO,
};
pub use loss::{
    cma_loss, cma_loss_with_grad, diagonal_margin, similarity_matrix, total_loss, view_contrast_with_grad,
    DenominatorVariant, LossBreakdown, SimilarityMatrix, DEFAULT_TEMPERATURE,
};
pub use pretrain::{
    alignment_margin, batch_objective, pretrain, LogRecord, PretrainConfig, PretrainOutputs, PretrainReport, UmaMode,
};
