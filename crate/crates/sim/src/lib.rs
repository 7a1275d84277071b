//! Actors, services and a deterministic simulator for the data market.
//!
//! [`simulate`] wires an issuer, owners with sensing devices, the market,
//! storage, a triple dealer, three compute nodes and a consumer into one
//! process and runs a [`Scenario`] to completion.

pub mod actors;
pub mod client;
pub mod deploy;
pub mod error;
pub mod report;
pub mod scenario;
pub mod serve;
pub mod services;
pub mod simulator;
pub mod stats;

pub use error::AppError;
pub use report::{NodeReport, Report};
pub use scenario::{AdversaryConfig, Scenario};
pub use simulator::{run_scenario, simulate, Run};
