//! Pseudo-label regularization for long-tailed partial-label learning.
//!
//! Every sample carries a candidate label set containing its true label.
//! Training alternates between a classifier step and a pseudo-label step that
//! redistributes each sample's mass over its candidates as
//! `w_ij ∝ S_ij f_ij^lambda r_j^-M`, damping classes the running class-prior
//! estimate `r` says are frequent.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod prior;
pub mod report;
pub mod rng;
pub mod selection;
pub mod sinkhorn;
pub mod solver;
pub mod textio;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use prior::{PriorEstimator, PriorRule};
pub use rng::Rng;
pub use selection::{select_reliable, SelectionConfig};
pub use sinkhorn::{solar_update, SinkhornConfig, SinkhornResult};
pub use solver::{kkt_residual, plr_objective, plr_update, proden_update, KktReport};
pub use trainer::{train, PseudoLabelMethod, TrainConfig};
pub use types::{
    clamp_prior, CandidateMatrix, ClassPrior, PlrHyperparams, PredictionMatrix, PseudoLabelMatrix,
};
