//! Neural index policies for multi-action restless bandits with per-action
//! budgets.
//!
//! The pipeline: [`model`] defines and generates instances, [`oracle`] solves
//! the occupancy-measure LP for an upper bound and oracle policy, [`net`]
//! predicts per-arm action indices, [`transport`] turns indices into
//! budget-feasible assignments (entropic and exact), [`train`] fits the
//! network, and [`eval`] simulates policies and reports the reward gap.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod net;
pub mod oracle;
pub mod seeding;
pub mod simplex;
pub mod sweep;
pub mod textfmt;
pub mod train;
pub mod transport;

pub use error::{Error, Result};
