//! Classification over latent vectors: AdaBoost on decision stumps plus LDA
//! and single-tree baselines, and the evaluation harness.

mod lda;
mod metrics;
mod stump;
mod tree;

pub use lda::{predict_lda, train_lda, LdaModel};
pub use metrics::{
    evaluate, evaluate_seeded, loso_folds, project_latents_2d, silhouette, trial_votes, wilson_interval, Confusion,
    BaselineScore, EvalReport, Fold, FoldReport, LatencyStats, Level, Projection, QuantizedScore, Separation, TrialSummary,
    BOOTSTRAP_RESAMPLES, REPORT_SCHEMA_VERSION,
};
pub use stump::{
    alpha_for, select_rounds, train_adaboost, train_adaboost_traced, train_stump, Stump, StumpEnsemble, ALPHA_CAP,
    TIE_EPS,
};
pub use tree::{train_tree, Tree};

use thiserror::Error;

/// Round counts tried by cross-validation inside training folds.
pub const ROUND_GRID: [usize; 4] = [50, 100, 200, 400];
pub const DEFAULT_ROUNDS: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum BoostError {
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("covariance is singular")]
    Singular,
    #[error("leave-one-subject-out needs at least two subjects")]
    SingleSubject,
    #[error("shape mismatch: {0}")]
    Shape(String),
}
