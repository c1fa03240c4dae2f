//! Command configuration: a flat TOML table whose keys are the long flag
//! names in snake_case. Precedence is flag, then environment
//! (`MXFPQ_SEED`, `MXFPQ_THREADS`), then config file, then built-in default.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Flags shared by every command.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct Common {
    /// TOML file with defaults for this command's flags
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<PathBuf>,
    /// Append JSON-lines records here instead of printing them
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Random seed [default: 0]
    #[arg(long, env = "MXFPQ_SEED")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long, env = "MXFPQ_THREADS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// A subcommand's flags, all optional until [`resolve`] fills defaults.
pub trait CommandConfig: Args + Serialize + DeserializeOwned {
    fn common(&self) -> &Common;
    fn common_mut(&mut self) -> &mut Common;
    /// Fills unset keys and checks required ones.
    fn finish(&mut self) -> Result<()>;
}

/// Every key a config file may set for `T`.
pub fn known_keys<T: Args>() -> BTreeSet<String> {
    T::augment_args(clap::Command::new("probe"))
        .get_arguments()
        .map(|a| a.get_id().as_str().to_owned())
        .filter(|id| id != "config")
        .collect()
}

fn load_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Rejects unknown keys, listing all of them.
pub fn check_keys(table: &toml::Table, known: &BTreeSet<String>) -> Result<()> {
    let unknown: Vec<&str> = table
        .keys()
        .filter(|k| !known.contains(k.as_str()))
        .map(String::as_str)
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "unknown config keys: {}; allowed: {}",
            unknown.join(", "),
            known.iter().cloned().collect::<Vec<_>>().join(", ")
        )))
    }
}

/// Overlays flags on the config file and fills defaults.
pub fn resolve<T: CommandConfig>(args: T) -> Result<T> {
    let mut merged = Map::new();
    let config_path = args.common().config.clone();
    if let Some(path) = &config_path {
        let table = load_table(path)?;
        check_keys(&table, &known_keys::<T>())?;
        let mut bad = Vec::new();
        for (k, v) in table {
            match serde_json::to_value(v) {
                Ok(v) => {
                    merged.insert(k, v);
                }
                Err(_) => bad.push(k),
            }
        }
        if !bad.is_empty() {
            return Err(Error::config(format!("unsupported values for keys: {}", bad.join(", "))));
        }
    }
    let flags = serde_json::to_value(&args).map_err(|e| Error::config(e.to_string()))?;
    if let Value::Object(flags) = flags {
        merged.extend(flags.into_iter().filter(|(_, v)| !v.is_null()));
    }
    let mut out = typed::<T>(merged)?;
    out.common_mut().config = config_path;
    out.finish()?;
    Ok(out)
}

/// Deserializes, and on failure names every key whose value has the wrong type.
fn typed<T: DeserializeOwned>(merged: Map<String, Value>) -> Result<T> {
    match serde_json::from_value::<T>(Value::Object(merged.clone())) {
        Ok(t) => Ok(t),
        Err(first) => {
            // every field is optional, so each key can be checked on its own
            let bad: Vec<String> = merged
                .iter()
                .filter(|(k, v)| {
                    let one = Map::from_iter([((*k).clone(), (*v).clone())]);
                    serde_json::from_value::<T>(Value::Object(one)).is_err()
                })
                .map(|(k, _)| k.clone())
                .collect();
            if bad.is_empty() {
                Err(Error::config(first.to_string()))
            } else {
                Err(Error::config(format!("invalid values for keys: {} ({first})", bad.join(", "))))
            }
        }
    }
}

pub fn required<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::config(format!("missing required key `{key}`")))
}

pub fn default<T>(slot: &mut Option<T>, v: T) {
    slot.get_or_insert(v);
}
