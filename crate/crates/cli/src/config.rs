//! `key=value` config files and the resolved-config dump.
//!
//! Keys are long flag names without the dashes. File entries are spliced into
//! the argument list right after the subcommand, skipping any key that is
//! also given on the command line, so flags always win.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

const SUBCOMMANDS: &[&str] = &["gen-data", "train-decomposer", "train-classifier", "decompose", "eval", "ablate"];
const GLOBAL_VALUE_FLAGS: &[&str] = &["--seed", "--threads", "--config"];

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got `{line}`", i + 1);
        };
        let key = key.trim();
        if key.is_empty() || key.starts_with('-') {
            bail!("config line {}: bad key `{key}`", i + 1);
        }
        if key == "config" {
            bail!("config line {}: config files cannot include other config files", i + 1);
        }
        entries.push((key.to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn flag_value<'a>(args: &'a [String], flag: &str) -> Option<&'a str> {
    let eq = format!("{flag}=");
    args.iter().enumerate().find_map(|(i, a)| {
        if a == flag {
            args.get(i + 1).map(String::as_str)
        } else {
            a.strip_prefix(&eq)
        }
    })
}

fn mentions(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    let eq = format!("{flag}=");
    args.iter().any(|a| *a == flag || a.starts_with(&eq))
}

/// Index just past the subcommand tokens (`ablate` takes a second one).
fn subcommand_end(args: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].as_str();
        if GLOBAL_VALUE_FLAGS.contains(&a) {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&a) {
            if a == "ablate" {
                let next = args[i + 1..].iter().position(|t| !t.starts_with('-'))?;
                return Some(i + 1 + next + 1);
            }
            return Some(i + 1);
        }
        i += 1;
    }
    None
}

/// Splice the `--config` file (if any) into `args`.
pub fn merge_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = flag_value(&args, "--config") else {
        return Ok(args);
    };
    let text = fs::read_to_string(Path::new(path)).with_context(|| format!("reading config file {path}"))?;
    let entries = parse_config(&text).with_context(|| format!("in config file {path}"))?;
    let Some(at) = subcommand_end(&args) else {
        return Ok(args);
    };
    let mut extra = Vec::new();
    for (key, value) in entries {
        if mentions(&args, &key) || (key == "verbose" && args.iter().any(|a| a == "-v")) {
            continue;
        }
        if key == "verbose" {
            match value.as_str() {
                "true" | "on" | "1" => extra.push("--verbose".to_string()),
                "false" | "off" | "0" => {}
                _ => bail!("config key verbose: expected true or false, got `{value}`"),
            }
            continue;
        }
        extra.push(format!("--{key}"));
        extra.push(value);
    }
    let mut merged = args[..at].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[at..]);
    Ok(merged)
}

/// Flatten a serialized argument struct into sorted `key=value` lines.
pub fn resolved_lines(value: &Value) -> Vec<String> {
    let mut lines = Vec::new();
    if let Value::Object(map) = value {
        for (k, v) in map {
            let text = match v {
                Value::Null => continue,
                Value::String(s) => s.clone(),
                Value::Array(items) => {
                    items.iter().map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string())).collect::<Vec<_>>().join(",")
                }
                Value::Object(_) => {
                    lines.extend(resolved_lines(v));
                    continue;
                }
                other => other.to_string(),
            };
            lines.push(format!("{k}={text}"));
        }
    }
    lines.sort();
    lines
}
