//! Layering of command-line flags over a TOML config file.
//!
//! Each subcommand reads the table with its own name, e.g. `[fit]`. Keys use
//! the long flag names (`alpha-c`, `multistart`, ...).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub fn load(path: Option<&Path>) -> Result<toml::Table, CliError> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Flags given on the command line win; missing ones come from `[section]`.
pub fn merge<T: Serialize + DeserializeOwned>(cli: &T, file: &toml::Table, section: &str) -> Result<T, CliError> {
    let mut merged = match file.get(section) {
        Some(toml::Value::Table(t)) => serde_json::to_value(t).map_err(|e| CliError::Usage(e.to_string()))?,
        Some(_) => return Err(CliError::Usage(format!("config entry '{section}' must be a table"))),
        None => Value::Object(Default::default()),
    };
    let Value::Object(overrides) = serde_json::to_value(cli).map_err(|e| CliError::Usage(e.to_string()))? else {
        return Err(CliError::Usage("arguments did not serialize to a map".into()));
    };
    let Value::Object(target) = &mut merged else {
        unreachable!()
    };
    if let Some(bad) = target.keys().find(|k| !overrides.contains_key(*k)) {
        return Err(CliError::Usage(format!("config [{section}]: unknown key '{bad}'")));
    }
    for (k, v) in overrides {
        if !v.is_null() {
            target.insert(k, v);
        }
    }
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config [{section}]: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(rename_all = "kebab-case")]
    struct Args {
        alpha_c: Option<f64>,
        seed: Option<u64>,
        out: Option<String>,
    }

    #[test]
    fn cli_beats_file_beats_default() {
        let file: toml::Table = "[fit]\nalpha-c = 0.5\nseed = 3\n".parse().unwrap();
        let cli = Args { alpha_c: None, seed: Some(9), out: None };
        let got = merge(&cli, &file, "fit").unwrap();
        assert_eq!(got, Args { alpha_c: Some(0.5), seed: Some(9), out: None });
        assert_eq!(got.out.unwrap_or_else(|| "default".into()), "default");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file: toml::Table = "[fit]\nalpha = 1\n".parse().unwrap();
        let cli = Args { alpha_c: None, seed: None, out: None };
        assert!(merge(&cli, &file, "fit").is_err());
    }
}
