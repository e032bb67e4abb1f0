//! JSON or TOML config files, chosen by extension (`.toml` is TOML,
//! anything else is parsed as JSON).

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub fn parse_config<T: DeserializeOwned>(
    text: &str,
    toml_format: bool,
) -> std::result::Result<T, String> {
    if toml_format {
        toml::from_str(text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    parse_config(&text, is_toml).map_err(|m| Error::Config(format!("{}: {m}", path.display())))
}
