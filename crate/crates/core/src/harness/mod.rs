//! Command-line facing pieces: tokenizer, corpora, run configuration,
//! checkpoints, sweeps and their reports.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod report;
pub mod sweep;
pub mod tokenize;
