//! `key=value` settings gathered from a config file, `--set` flags and dedicated flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub type Pairs = Vec<(String, String)>;

pub fn parse_text(text: &str, origin: &str) -> Result<Pairs> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(split_pair(line).with_context(|| format!("{origin}:{}", n + 1))?);
    }
    Ok(out)
}

fn split_pair(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => bail!("expected key=value, got {s:?}"),
    }
}

/// Config file first, then `--set` in order, then dedicated flags; later entries win.
pub fn collect(config: Option<&Path>, sets: &[String], flags: Vec<(&str, Option<String>)>) -> Result<Pairs> {
    let mut pairs = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_text(&text, &p.display().to_string())?
        }
        None => Vec::new(),
    };
    for s in sets {
        pairs.push(split_pair(s).context("--set")?);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    }
    Ok(pairs)
}

/// Feeds every pair to `accept`; a key no sink claims is an error.
pub fn apply(pairs: &[(String, String)], command: &str, mut accept: impl FnMut(&str, &str) -> Result<bool>) -> Result<()> {
    for (k, v) in pairs {
        if !accept(k, v)? {
            bail!("unknown key {k:?} for {command}");
        }
    }
    Ok(())
}

pub fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("invalid value {value:?} for key {key}"))
}

/// Comma-separated list of positive integers; empty means none.
pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items: Vec<usize> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.contains(&0) {
        bail!("{key} entries must be positive, got {value:?}");
    }
    Ok(items)
}

pub fn join_list(items: &[usize]) -> String {
    items.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes the effective settings to `out/config.txt` and prints them.
pub fn echo(out: &Path, command: &str, entries: &[(&str, String)]) -> Result<()> {
    let mut text = format!("# vdiff {command}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    print!("{text}");
    let path = out.join("config.txt");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
