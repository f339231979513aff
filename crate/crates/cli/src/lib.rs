//! File formats, reports and subcommands behind the `svfreg` binary.

pub mod commands;
pub mod error;
pub mod report;
pub mod volume_file;

pub use error::{CliError, CliResult};
pub use volume_file::{Dtype, Header, Kind, VolumeFile};
