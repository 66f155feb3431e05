//! Uncertainty-aware self-training at desk scale.
//!
//! The pipeline alternates two stages. Stage one trains a small MLP
//! classifier on labeled source data while an orthogonality-regularized
//! projection block extracts a set of Gaussian basis means from the feature
//! space. Stage two runs an adapted EM over all features: soft assignments
//! to the bases, Monte-Carlo pushforward of mixture samples through a
//! linear head to obtain pseudo-label distributions (mean, variance, scalar
//! uncertainty), and a combined labeled/uncertainty loss training that head.
//! Low-variance pseudo-labels are then selected per predicted class, given
//! sampled hard labels, and fed back into retraining with 1/variance
//! weights. Everything is seeded and bit-reproducible.

pub mod basis;
pub mod config;
pub mod data;
pub mod em;
pub mod error;
pub mod model;
pub mod numerics;
pub mod selftrain;

pub use basis::{
    att_project, basis_objective, basis_objective_grad, refine_basis, train_stage1, BasisSet,
    BasisObjectiveReport, Stage1Result,
};
pub use config::{HardLabelMode, LatentSampling, RoundConfig, SelectionPolicy};
pub use data::{
    gen_synthetic, load_csv, load_split_csv, write_csv, CsvFile, Dataset, Label, Shift,
    SplitData, SyntheticConfig, SyntheticKind,
};
pub use em::{
    combined_loss, e_step, m_step, pseudo_label_distribution, run_em, sample_latent, Assignment,
    EmState, LatentDraws, LinearHead, SoftPseudoLabel,
};
pub use error::{Error, Result};
pub use model::{
    evaluate_accuracy, nll_loss, AccuracyReport, Activation, ForwardPass, Gradients, Layer,
    LossSpec, MlpModel, Sgd,
};
pub use numerics::{
    finite_diff_grad, frobenius_norm, matmul, orthogonality_residual, row_softmax, DataMatrix,
    SeededRng,
};
pub use selftrain::{
    rank_consistency_ok, retrain, run_round, run_self_training, select_samples, KeptSample,
    RoundMetrics, RoundOutcome, RoundRecord, SelectionResult, SelfTrainingReport,
};
