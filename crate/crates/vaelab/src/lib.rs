//! Experiment runner around `vaelab-core`: configuration, corpus files,
//! checkpoints, CSV artifacts and the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod pool;
pub mod table;
