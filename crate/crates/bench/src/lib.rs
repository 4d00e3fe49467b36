//! Metadata and file workloads for benchmarking a cluster, run either in
//! the simulator or against a TCP deployment.

pub mod report;
pub mod runner;
pub mod workload;

pub use runner::{run_sim, run_tcp, run_workload, BenchError, BenchResult, SimTarget, Target, Verdict};
pub use workload::{WorkloadKind, WorkloadSpec};
