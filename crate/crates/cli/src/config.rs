//! Flat `key = value` experiment files.
//!
//! Keys are the long flag names of the subcommand (`-` and `_` are
//! interchangeable). Blank lines and `#` comments are ignored. A flag given on
//! the command line wins over the same key in the file.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};

use crate::CliError;

/// `(key, value)` pairs in file order.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::input(format!("config line {}: expected `key = value`", n + 1))
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::input(format!("config line {}: empty key", n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Extra arguments contributed by the config file: entries whose flag was
/// not given on the command line.
pub fn config_args(
    path: &Path,
    sub: &Command,
    matches: &ArgMatches,
) -> Result<Vec<OsString>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
    let mut extra = Vec::new();
    for (key, value) in parse_config(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| {
                CliError::input(format!(
                    "unknown config key `{key}` for `{}`",
                    sub.get_name()
                ))
            })?;
        let id = arg.get_id().as_str();
        if matches.value_source(id) == Some(ValueSource::CommandLine) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                _ => {
                    return Err(CliError::input(format!(
                        "config key `{key}` expects true or false"
                    )))
                }
            },
            _ => {
                extra.push(format!("--{key}").into());
                extra.push(value.into());
            }
        }
    }
    Ok(extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalises_keys() {
        let kv = parse_config("# header\nnoise_model = gaussian # inline\n\n a=0.01\n").unwrap();
        assert_eq!(
            kv,
            [
                ("noise-model".into(), "gaussian".into()),
                ("a".into(), "0.01".into())
            ]
        );
        assert!(parse_config("just words\n").is_err());
        assert!(parse_config(" = 3\n").is_err());
    }
}
