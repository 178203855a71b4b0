//! Experiment config files: TOML with one table per section and flat keys.

use std::path::{Path, PathBuf};

use sislink_core::ExperimentConfig;

use crate::error::{CliError, CliResult};

/// Environment variable naming the default artifact directory.
pub const OUTPUT_DIR_ENV: &str = "SISLINK_OUTPUT_DIR";

pub fn parse_config(text: &str, origin: &str) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
    cfg.validate().map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    Ok(cfg)
}

/// Read and validate a config file. Unknown keys are errors.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

/// Artifact directory: the flag, then the config, then the environment,
/// then `./out`. The choice is written back into `cfg` so echoes are complete.
pub fn resolve_output_dir(cfg: &mut ExperimentConfig, flag: Option<&Path>) -> CliResult<PathBuf> {
    let dir = match (flag, &cfg.output.directory) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    cfg.output.directory = Some(dir.clone());
    Ok(dir)
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serialises")
}

/// Every default, as a ready-to-edit config.
pub fn default_config_text() -> String {
    let mut s = String::from(
        "# sislink experiment config. Every key below shows its default value.\n\
         # training.master_seed has no default; 1 is filled in as an example.\n\
         # Optional keys not shown: geometry.layer_spacing (defaults to\n\
         # sis_thickness / (layers_per_sis - 1)), channel.noise.override_noise_power_dbm,\n\
         # output.directory (defaults to $SISLINK_OUTPUT_DIR, then ./out).\n\
         # Lengths are in wavelengths except link_distance (m); powers in dBm.\n\n",
    );
    s.push_str(&to_toml(&ExperimentConfig::with_seed(1)));
    s
}

pub fn write(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
