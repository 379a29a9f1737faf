//! Detection and measurement of in-browser cryptocurrency miners: visit
//! telemetry, CPU-profile analysis, Wasm and wallet forensics, fingerprints,
//! revenue estimation, code similarity and blacklist comparison.

pub mod blacklist;
pub mod collector;
pub mod config;
pub mod economics;
pub mod fingerprint;
pub mod pool;
pub mod profile;
pub mod report;
pub mod similarity;
pub mod telemetry;
pub mod testbed;
pub mod wallet;
pub mod wasm;
