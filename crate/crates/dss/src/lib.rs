//! Decision-support tooling around the `pitplan` scheduler: run configuration,
//! a persistent run store, a steerable worker pool behind an HTTP API, and
//! report figures.

pub mod config;
pub mod error;
pub mod execute;
pub mod plots;
pub mod service;
pub mod store;

pub use config::{Method, Overrides, RunConfig, SaaSettings};
pub use error::{DssError, DssResult};
pub use execute::{execute, RunOutput, RunResult};
pub use service::{router, Command, Manager};
pub use store::{RunRecord, RunStatus, Store};
