//! Loading of TOML/JSON configuration files.

use serde::de::DeserializeOwned;
use std::path::Path;

/// Parse `path` as JSON when its extension is `.json`, TOML otherwise.
pub fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_str(&raw, path.extension().and_then(|e| e.to_str()) == Some("json"))
        .map_err(|e| format!("{}: {e}", path.display()))
}

pub fn parse_str<T: DeserializeOwned>(raw: &str, json: bool) -> Result<T, String> {
    if json {
        serde_json::from_str(raw).map_err(|e| e.to_string())
    } else {
        toml::from_str(raw).map_err(|e| e.to_string())
    }
}
