//! Adversarial domain adaptation for unsupervised anomaly detection.
//!
//! Healthy-only data from a data-rich source unit and a data-poor target unit
//! are mapped into a shared feature space by a dense extractor trained against
//! a domain discriminator through a gradient-reversal layer, while a
//! multidimensional-scaling loss keeps intra-domain pairwise distances intact.
//! A one-class extreme learning machine then flags samples whose score drifts
//! from the healthy target value.
//!
//! Modules:
//!
//! * [`data`]: datasets, signal preprocessing, synthetic domain-shift data.
//! * [`distance`]: pairwise Euclidean and image Euclidean (IMED) distances.
//! * [`elm`]: ridge-solved ELM layers, the HELM detector, elbow sizing.
//! * [`adau`]: dense networks, MDS loss, gradient reversal, adversarial training.
//! * [`metrics`]: confusion counts, balanced accuracy, McNemar, GLM tests.
//! * [`harness`]: experiment orchestration, aggregation and reporting.

pub mod adau;
pub mod data;
pub mod distance;
pub mod elm;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod par;
mod serde_mat;

pub use error::{AdauError, Result};
