//! Decentralized collaborative learning with adaptive reference data for
//! on-device next-POI recommendation.
//!
//! Every simulated device owns a small recommender that learns from its private
//! check-ins and from the soft decisions its neighbors publish on a shared,
//! desensitized reference pool. Each device then prunes that pool down to an
//! adaptive subset, first by tracking per-instance distillation losses during
//! training and then by influence-function scoring against its held-out
//! validation check-in, and finally retrains on the pruned subset.
//!
//! Module map:
//!
//! - [`corpus`]: check-in data model, ingestion, filtering, splits, regions, synthetic corpora
//! - [`refgen`]: reference pool generation (suffix exchange and Markov category walks)
//! - [`recmodel`]: the local model interface, two reference models, gradients and Hessians
//! - [`topology`]: server-side neighbor selection
//! - [`collab`]: the collaborative training loop with loss tracking
//! - [`influence`]: influence estimates, harmful-set selection, leave-one-out oracle
//! - [`eval`]: in-region ranking tasks, HR@k and NDCG@k
//! - [`sim`]: the end-to-end fleet simulation

pub mod collab;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod influence;
pub mod linalg;
pub mod recmodel;
pub mod refgen;
pub mod seed;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
