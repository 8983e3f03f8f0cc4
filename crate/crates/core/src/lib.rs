//! Identification of the directed interconnection structure of a dynamic
//! network from measured node signals.
//!
//! Every node `w_j` of the network obeys
//! `w_j(t) = sum_{i != j} G_ji(q) w_i(t) + H_j(q) e_j(t)`. The toolkit
//! rewrites each node as a multi-input single-output (MISO) regression on
//! the one-step-ahead predictor, places a TC-kernel Gaussian prior on the
//! truncated predictor impulse responses, fits the prior hyperparameters by
//! expectation-maximization and then searches for the set of incoming edges
//! that maximizes the marginal likelihood. Group-Lasso baselines and a
//! Monte-Carlo ROC harness are included for comparison.
//!
//! Nodes are indexed from zero throughout the API; the CSV interchange
//! format labels node `i` as column `w{i+1}`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::type_complexity)]

pub mod bayes;
pub mod error;
pub mod eval;
pub mod glasso;
pub mod kernel;
mod linalg;
pub mod model;
pub mod predictor;
pub mod search;

pub use error::{Error, Result};
pub use model::{DataSet, NetworkSystem, RationalTransfer, Topology};
pub use predictor::MisoProblem;
