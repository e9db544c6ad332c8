//! Set-prediction supervision: matching cost, bipartite assignment and the
//! focal / L1 / GIoU losses summed over decoding stages.

mod criterion;
mod hungarian;

pub use criterion::{
    cost_matrix, focal_cost, set_criterion, sigmoid_focal_loss, LossBreakdown, LossWeights, StageLoss, Target,
};
pub use hungarian::{hungarian, Assignment};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("cost matrix holds non-finite entries")]
    NonFinite,
    #[error("{targets} ground-truth objects cannot be matched to {predictions} predictions")]
    TooFewPredictions { predictions: usize, targets: usize },
    #[error("shape error: {0}")]
    Shape(String),
}
