//! File formats, experiment plumbing and the command line around
//! `alignrefine-core`.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod report;
