//! Deterministic discrete-event simulation of a whole cluster plus the
//! tooling that checks it: a reference file system, a census with
//! invariant checks, and trace replay.

pub mod census;
pub mod cluster;
mod model;
mod run;
pub mod scenarios;
pub mod script;
mod sim;
mod transport;

pub use model::{error_class, ModelFs, Outcome, Snapshot};
pub use run::{client_snapshot, random_faults, diff_snapshots, exec, run, run_on, run_text, run_with, OpRecord, RunConfig, TraceGen, TraceResult};
pub use sim::*;
pub use transport::SimTransport;
