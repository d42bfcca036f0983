//! The `run.toml` reproducibility header written next to every artifact.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub const HEADER_FILE: &str = "run.toml";

#[derive(Serialize)]
struct Run<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Header<'a, C: Serialize> {
    run: Run<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a C>,
}

/// Writes the header. It records the resolved configuration but no
/// timestamps or paths, so equivalent runs produce identical files.
pub fn write<C: Serialize>(dir: &Path, command: &str, seed: Option<u64>, config: Option<&C>) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let header = Header {
        run: Run {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
        },
        config,
    };
    let text = toml::to_string(&header).context("serialising run header")?;
    let path = dir.join(HEADER_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
