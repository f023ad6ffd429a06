//! Distributionally robust offline reinforcement learning for tabular
//! non-Markovian decision processes.

pub mod ambiguity;
pub mod diagnostics;
pub mod duals;
pub mod error;
pub mod harness;
pub mod instances;
pub mod learner;
pub mod oracle;
pub mod process;
pub mod psr;
pub mod robust;

pub use ambiguity::{Divergence, SetKind, SimplexGrid, UncertaintySpec};
pub use error::{Error, Result};
pub use process::{Policy, RewardSpec, Shape, TabularModel, Trajectory};
