pub mod check;
pub mod eval;
pub mod maps;
pub mod train;

use std::path::Path;

use crate::config::RunConfig;
use crate::CliError;

/// Loads the config file, or the defaults when none is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::from_file(p).map_err(CliError::Usage),
        None => Ok(RunConfig::default()),
    }
}
