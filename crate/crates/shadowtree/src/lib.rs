//! File formats, a thread-pool runner, report generation and the command
//! line for `shadowtree-core`.

pub mod cli;
pub mod formats;
pub mod pipeline;
pub mod report;
pub mod runner;
