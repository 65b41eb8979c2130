use std::io::Write;
use std::path::Path;

use granite::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("GRANITE_BUILD_ID"))
}

/// Common wrapper around every report the CLI writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<C, R> {
    pub schema_version: u32,
    pub build_id: String,
    pub command: String,
    pub config: C,
    pub seed: Option<u64>,
    pub report: R,
}

impl<C: Serialize, R: Serialize> Envelope<C, R> {
    pub fn new(command: &str, config: C, seed: Option<u64>, report: R) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            build_id: build_id(),
            command: command.to_string(),
            config,
            seed,
            report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.into()))?;
        s.push('\n');
        Ok(s)
    }
}

/// Writes `body` to `path`, or to `stdout` when no path is given.
pub fn emit(body: &str, path: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    if body.trim().is_empty() {
        return Err(Error::Config("refusing to write an empty report".into()));
    }
    match path {
        Some(p) => std::fs::write(p, body)?,
        None => stdout.write_all(body.as_bytes())?,
    }
    Ok(())
}
