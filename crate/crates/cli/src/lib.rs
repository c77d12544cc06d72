//! Library side of the `splitreason` command: each subcommand is a function
//! over loaded inputs, so tests can drive it without spawning processes.

pub mod annotate;
pub mod config;
pub mod io;
pub mod plotdata;
pub mod reward;
pub mod run;
pub mod simulate;

use std::path::{Path, PathBuf};

use config::LoadedConfig;

/// Output directory: the flag, else the config's `out_dir`, else `out`.
pub fn resolve_out_dir(flag: Option<&Path>, loaded: &LoadedConfig) -> PathBuf {
    match (flag, &loaded.tool.out_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => loaded.base_dir.join(p),
        (None, None) => PathBuf::from("out"),
    }
}
