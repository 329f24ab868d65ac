//! Per-run record of what was executed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub versions: Versions,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Versions {
    pub anchornet: &'static str,
    pub weight_format: &'static str,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: Versions {
                anchornet: env!("CARGO_PKG_VERSION"),
                weight_format: super::weights::MAGIC,
            },
        }
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(p.into());
        self
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(p.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
