//! Training-free policy-violation detection over LLM hidden states.
//!
//! In-policy activations of each layer are modeled by their mean and top-k
//! covariance eigenpairs. A response is scored by the Euclidean norm of its
//! PCA-whitened activation (the Mahalanobis distance restricted to the
//! leading subspace) and flagged when the score exceeds a threshold
//! calibrated with Youden's J on a held-out mixed split.
//!
//! * [`stats`] - means, covariance spectra, whitening and scoring
//! * [`calibration`] - splits, layer selection, threshold calibration
//! * [`runtime`] - class routing and online verdicts
//! * [`storage`] - activation record files and guard bundles

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod guard;
pub mod runtime;
pub mod stats;
pub mod storage;

pub use calibration::{fit_bundle, fit_guard, layer_auc_report, CalibrationConfig, WhiteningMode};
pub use dataset::{ActivationRecord, ActivationSource, Label, LabeledActivationSet, LayerActivations};
pub use error::{Error, Result, StorageError};
pub use guard::{GuardBundle, GuardProfile};
pub use runtime::{score_batch, score_online, select_class, ComplianceVerdict, Decision};
pub use storage::{load_bundle, read_activations, save_bundle, write_activations};
