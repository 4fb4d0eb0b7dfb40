//! File formats, benchmarking and workflows around [`dpsarnn_core`].

pub use dpsarnn_core as core;

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod wav;
