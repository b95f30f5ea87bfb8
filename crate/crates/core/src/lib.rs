//! Structured pruning of linear, convolutional and attention layers by
//! best-subset selection over weight groups.
//!
//! Each layer is reduced to a quadratic problem in its weights (see
//! [`problem`]); pruning a group forces its rows to zero, and the remaining
//! rows are refit optimally. [`update::PruneState`] tracks the refit solution
//! under group removals and restorations in time quadratic in `d₁`, and
//! [`search`] drives it with a schedule of swap steps.

pub mod bench;
pub mod builders;
pub mod bundle;
pub mod chain;
pub mod error;
pub mod io;
pub mod matrix;
pub mod oracle;
pub mod problem;
pub mod reference;
pub mod rng;
pub mod search;
pub mod update;

pub use error::{Error, Result};
pub use matrix::{IndexSet, Matrix, SymMatrix};
pub use problem::{solve_direct, GroupPartition, PartitionKind, PruneSelection, QuadraticProblem};
pub use search::{PruneReport, SchedulePreset, SearchOptions, SelectionDirection};
pub use update::{DeltaSigns, EngineOptions, PruneState};
