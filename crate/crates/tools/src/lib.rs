//! Standard-library companion to `ssc-core`: binary containers, the
//! configuration text format, JSON and table reports, and the ablation
//! driver used by the `ssc` command.

pub mod ablate;
pub mod config_io;
pub mod formats;
pub mod report;
