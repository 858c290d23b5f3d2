//! Flat `key = value` run files.
//!
//! Keys are long flag names (`tau-max` or `tau_max`). Entries are spliced
//! into the argument list ahead of the user's own flags, so anything given on
//! the command line wins. Keys that belong to another subcommand are skipped,
//! which lets one file describe a whole pipeline.

use clap::{CommandFactory, Parser};

use crate::Cli;

#[derive(Debug)]
pub enum ParseError {
    Clap(clap::Error),
    Usage(String),
}

pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", n + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_with_config(argv: &[String]) -> Result<Cli, ParseError> {
    let cli = Cli::try_parse_from(argv).map_err(ParseError::Clap)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        ParseError::Usage(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let entries = parse_file(&text).map_err(ParseError::Usage)?;
    let merged = merge(argv, cli.cmd.name(), &entries).map_err(ParseError::Usage)?;
    Cli::try_parse_from(merged).map_err(ParseError::Clap)
}

/// Whether `cmd` has a long flag `key`, and if so whether it takes a value.
fn lookup(cmd: &clap::Command, key: &str) -> Option<bool> {
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(key))
        .map(|a| a.get_action().takes_values())
}

fn as_flag(key: &str, value: &str, takes_value: bool) -> Result<Option<String>, String> {
    if takes_value {
        return Ok(Some(format!("--{key}={value}")));
    }
    match value {
        "true" => Ok(Some(format!("--{key}"))),
        "false" => Ok(None),
        other => Err(format!(
            "config key `{key}` expects true or false, got `{other}`"
        )),
    }
}

fn merge(argv: &[String], sub: &str, entries: &[(String, String)]) -> Result<Vec<String>, String> {
    let root = Cli::command();
    let sc = root
        .find_subcommand(sub)
        .ok_or_else(|| format!("unknown subcommand `{sub}`"))?;
    let (mut global, mut local) = (Vec::new(), Vec::new());
    for (k, v) in entries {
        if k == "config" {
            return Err("config files cannot include other config files".into());
        }
        if let Some(tv) = lookup(&root, k) {
            global.extend(as_flag(k, v, tv)?);
        } else if let Some(tv) = lookup(sc, k) {
            local.extend(as_flag(k, v, tv)?);
        } else if !root.get_subcommands().any(|c| lookup(c, k).is_some()) {
            return Err(format!("unknown config key `{k}`"));
        }
    }
    let mut idx = None;
    let mut i = 1;
    while i < argv.len() {
        match argv[i].as_str() {
            "--config" | "--out" => i += 2,
            t if t == sub => {
                idx = Some(i);
                break;
            }
            _ => i += 1,
        }
    }
    let idx = idx.ok_or_else(|| format!("subcommand `{sub}` not found in arguments"))?;
    let mut out = vec![argv[0].clone()];
    out.extend(global);
    out.extend_from_slice(&argv[1..=idx]);
    out.extend(local);
    out.extend_from_slice(&argv[idx + 1..]);
    Ok(out)
}
