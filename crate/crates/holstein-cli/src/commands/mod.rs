pub mod climate;
pub mod gen_data;
pub mod rollout;
pub mod simulate;
pub mod train;

use std::path::Path;

use holstein::datagen::Dataset;

use crate::CliError;

/// Load a dataset directory, classifying a missing path as a usage error.
pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.exists() {
        return Err(CliError::Usage(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    Ok(holstein::datagen::read_dataset(dir)?)
}
