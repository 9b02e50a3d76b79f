//! `<command>.meta.json` sidecars.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: BTreeMap<&'static str, String>,
    /// Files written by the command, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunMeta {
    pub fn new(command: &str, seed: u64, cfg: &RunConfig, outputs: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config_hash: cfg.hash(),
            config: cfg.to_pairs(),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(format!("{}.meta.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
