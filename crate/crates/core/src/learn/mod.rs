//! Logistic classifiers, evaluation metrics, grouped folds, permutation
//! baselines and partial dependence.

pub mod folds;
pub mod logistic;
pub mod metrics;
pub mod pdp;

pub use folds::{make_folds_leave_batch_out, make_folds_leave_pair_out, FoldScheme, FoldSpec};
pub use logistic::{LogisticModel, SoftmaxObjective, TrainOptions};
pub use metrics::{accuracy, permute_columns, roc_auc};
pub use pdp::{partial_dependence, PdpCurve};
