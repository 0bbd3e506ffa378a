//! Long-term open-pit production scheduling under geological uncertainty.
//!
//! The crate covers the block model, grade scenario generation, spatially
//! aware uncertainty multipliers, the two-stage schedule objective, and three
//! optimizers: a hybrid genetic/neighbourhood-search/annealing metaheuristic,
//! column generation over mining sequences, and an exact branch-and-bound
//! baseline used inside a sample-average-approximation harness.

pub mod blockmodel;
pub mod colgen;
pub mod control;
pub mod error;
pub mod evaluate;
pub mod lp;
pub mod metaheuristic;
pub mod rl;
pub mod rng;
pub mod saa;
pub mod scenario;
pub mod uncertainty;

pub use error::{Error, Result, ValidationError};
