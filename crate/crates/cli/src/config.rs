//! `key=value` settings files layered under command-line flags.
//!
//! Keys are long flag names without the dashes (`epochs = 200`, `no-attention = true`).
//! A key that no subcommand knows is an error; a key that only other subcommands
//! use is skipped, so one file can serve a whole pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};
use serde::Serialize;

/// Minimal `key=value` reader: `#` starts a comment, blank lines are ignored and
/// values may be quoted.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got `{}`", i + 1, raw.trim());
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if !seen.insert(key.clone()) {
            bail!("line {}: duplicate key `{key}`", i + 1);
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Where a setting's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub source: Source,
}

fn long_names(cmd: &Command) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = cmd.get_arguments().filter_map(|a| a.get_long().map(String::from)).collect();
    for sub in cmd.get_subcommands() {
        out.extend(long_names(sub));
    }
    out
}

/// Extra arguments to append to `argv` so that file values apply wherever the
/// command line and environment are silent.
pub fn injected_args(cmd: &Command, matches: &ArgMatches, file: &[(String, String)]) -> Result<Vec<String>> {
    let known = long_names(cmd);
    let (sub_name, sub_matches) = match matches.subcommand() {
        Some(s) => s,
        None => return Ok(Vec::new()),
    };
    let sub = cmd.find_subcommand(sub_name).expect("parsed subcommand exists");
    let mut out = Vec::new();
    for (key, value) in file {
        if !known.contains(key) {
            bail!("unknown config key `{key}`");
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg else {
            log::debug!("config key `{key}` does not apply to `{sub_name}`");
            continue;
        };
        let id = arg.get_id().as_str();
        let source = sub_matches.value_source(id).or_else(|| matches.value_source(id));
        if matches!(source, Some(ValueSource::CommandLine | ValueSource::EnvVariable)) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" | "1" | "yes" => out.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                other => bail!("config key `{key}` expects true or false, got `{other}`"),
            },
            ArgAction::Append => {
                for v in value.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                    out.push(format!("--{key}={v}"));
                }
            }
            _ => out.push(format!("--{key}={value}")),
        }
    }
    Ok(out)
}

/// Looks for `--config FILE` or `--config=FILE` in raw arguments.
pub fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    parse(&text).with_context(|| format!("config file {}", path.display()))
}

/// Every named setting of the chosen subcommand with its final value and origin.
pub fn provenance(cmd: &Command, matches: &ArgMatches, from_file: &BTreeSet<String>) -> Vec<Setting> {
    let mut out = BTreeMap::new();
    let mut collect = |cmd: &Command, m: &ArgMatches| {
        for arg in cmd.get_arguments() {
            let (Some(long), id) = (arg.get_long(), arg.get_id().as_str()) else {
                continue;
            };
            if long == "help" || long == "version" {
                continue;
            }
            let Ok(Some(values)) = m.try_get_raw(id) else {
                continue;
            };
            let value = values.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(",");
            let source = if from_file.contains(long) {
                Source::File
            } else {
                match m.value_source(id) {
                    Some(ValueSource::CommandLine) => Source::Flag,
                    Some(ValueSource::EnvVariable) => Source::Env,
                    _ => Source::Default,
                }
            };
            out.insert(long.to_string(), Setting { key: long.to_string(), value, source });
        }
    };
    collect(cmd, matches);
    if let Some((name, sub)) = matches.subcommand() {
        collect(cmd.find_subcommand(name).expect("parsed subcommand exists"), sub);
    }
    out.into_values().collect()
}
