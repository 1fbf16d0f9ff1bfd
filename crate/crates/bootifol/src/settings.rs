//! TOML run configuration. A file may set any subset of fields; the rest
//! come from the profile it names (desk unless stated).

use std::path::Path;

use bootifol_core::config::{Profile, RunConfig};

use crate::error::{Error, Result};

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `text` layered over `fallback`, or over the profile named in the file.
pub fn from_toml(text: &str, fallback: Profile) -> Result<RunConfig> {
    let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let profile = match over.get("profile") {
        Some(v) => v
            .as_str()
            .ok_or_else(|| Error::Config("profile must be a string".into()))?
            .parse()
            .map_err(|e: bootifol_core::Error| Error::Config(e.to_string()))?,
        None => fallback,
    };
    let mut base = toml::Value::try_from(RunConfig::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, over);
    let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load(path: &Path, fallback: Profile) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_toml(&text, fallback)
}
