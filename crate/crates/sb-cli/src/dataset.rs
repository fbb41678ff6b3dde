//! Resolving a data section into loaded train/test splits.

use std::path::PathBuf;

use sb_core::data::{load_dataset, stratified_subsample, synthetic_digits, Dataset};
use sb_core::Rng;

use crate::config::DataConfig;
use crate::error::{CliError, CliResult};

/// Environment variable consulted when an IDX config has no explicit root.
pub const DATA_ROOT_ENV: &str = "SB_DATA_ROOT";

/// Loads the configured corpus. `seed` drives the synthetic generator and
/// the subsampling draw; the same (config, seed) pair always yields the same
/// examples. Subsampling applies to the training split only; the test split
/// is the fixed yardstick.
pub fn resolve(data: &DataConfig, seed: u64) -> CliResult<(Dataset, Dataset)> {
    let (train, test) = match data {
        DataConfig::Idx { root, .. } => {
            let root: PathBuf = match root {
                Some(r) => r.clone(),
                None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or_else(|| {
                    CliError::Data(format!(
                        "IDX data source has no root configured and {DATA_ROOT_ENV} is unset"
                    ))
                })?,
            };
            load_dataset(&root).map_err(|e| CliError::Data(e.to_string()))?
        }
        DataConfig::Synthetic { n_train, n_test, .. } => (
            synthetic_digits(*n_train, seed, "train"),
            synthetic_digits(*n_test, seed, "test"),
        ),
    };
    let fraction = data.fraction();
    let train = if fraction < 1.0 {
        let mut rng = Rng::new(seed).fork("subsample");
        stratified_subsample(&train, fraction, &mut rng)
            .map_err(|e| CliError::Data(e.to_string()))?
    } else {
        train
    };
    Ok((train, test))
}
