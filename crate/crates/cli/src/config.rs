//! `--config` files: `key = value` lines that stand in for long flags.
//!
//! Keys are flag names without the leading dashes (`lambda`, `oracle_hi`).
//! Flags given on the command line win. `true` turns on a switch, `false`
//! leaves it off; list flags take comma-separated values.

use std::ffi::OsString;
use std::path::Path;

use crate::CliError;

/// Parses a config file into `(flag, value)` pairs in file order.
pub fn parse(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::usage(format!("{}:{}: expected key = value", path.display(), n + 1))
        })?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::usage(format!("{}:{}: invalid key", path.display(), n + 1)));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.push((key, value.to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn has_flag(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{}", key);
    let prefix = format!("--{}=", key);
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&prefix)
    })
}

/// Appends flags from the `--config` file that the command line leaves unset.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("{}: {}", path.display(), e)))?;
    let mut out = args.clone();
    for (key, value) in parse(&text, path)? {
        if has_flag(&args, &key) {
            continue;
        }
        match value.as_str() {
            "true" => out.push(format!("--{}", key).into()),
            "false" => {}
            _ => out.push(format!("--{}={}", key, value).into()),
        }
    }
    Ok(out)
}
