//! Probe-driven text-to-SQL agent engine.
//!
//! A planner decomposes a question into probes, a test-case generator
//! answers each probe with executed SQL, and a proposer writes the final
//! query from that evidence. The crate also ships the execution-accuracy
//! harness and the Monte Carlo latency model used to compare parallel and
//! sequential orchestration.

pub mod agent;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod evidence;
pub mod executor;
pub mod gateway;
pub mod latency;
pub mod generator;
pub mod par;
pub mod planner;
pub mod prompts;
pub mod scheduler;
pub mod proposer;
pub mod transcript;
pub mod types;
pub mod verifier;
