use std::path::Path;

use serde::de::DeserializeOwned;
use tumorcal::PipelineConfig;

use crate::failure::{CliResult, Failure};

/// Parse JSON into `T`, reporting the key path of the first offending entry.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let kind = if e.inner().to_string().starts_with("unknown field") { "UnknownKey" } else { "InvalidConfig" };
        Failure::validation(kind, &format!("{origin}: at `{path}`: {}", e.inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::validation("Io", &format!("{}: {e}", path.display())))?;
    parse_json(&text, &path.display().to_string())
}

pub fn load(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let cfg: PipelineConfig = match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}
