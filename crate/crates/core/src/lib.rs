pub mod blkio;
pub mod completion;
pub mod config;
pub mod device;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod runner;
pub mod sampling;
pub mod sim;
pub mod swapcache;
pub mod trace;
pub mod vmm;
pub mod workload;
