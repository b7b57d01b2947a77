//! Layered settings: an optional `key = value` file, then `--set key=value`
//! pairs, then explicit flags. Keys are the subcommand's long flag names.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Flags that configure the layering itself rather than the run.
pub const META_FLAGS: &[&str] = &["config", "set", "help"];

/// Long flags of `cmd` usable as settings keys.
pub fn valid_keys(cmd: &clap::Command) -> Vec<String> {
    let mut keys: Vec<String> = cmd
        .get_arguments()
        .filter_map(|a| a.get_long())
        .filter(|l| !META_FLAGS.contains(l))
        .map(str::to_string)
        .collect();
    keys.sort();
    keys.dedup();
    keys
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(split_pair(line).with_context(|| format!("line {}", i + 1))?);
    }
    Ok(out)
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    let k = k.trim().trim_start_matches("--").replace('_', "-");
    if k.is_empty() {
        bail!("empty key in {s:?}");
    }
    Ok((k, v.trim().to_string()))
}

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    /// Final value of every key read so far, for fingerprints.
    resolved: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct UnknownKey(pub String);

impl std::fmt::Display for UnknownKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UnknownKey {}

impl Settings {
    pub fn load(config: Option<&Path>, sets: &[String], valid: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(p) = config {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            pairs.extend(parse_config(&text).with_context(|| format!("in config {}", p.display()))?);
        }
        for s in sets {
            pairs.push(split_pair(s).context("in --set")?);
        }
        let mut values = BTreeMap::new();
        for (k, v) in pairs {
            if !valid.iter().any(|x| *x == k) {
                return Err(UnknownKey(format!("unknown key {k:?}; valid keys: {}", valid.join(", "))).into());
            }
            values.insert(k, v);
        }
        Ok(Settings { values, resolved: BTreeMap::new() })
    }

    /// The flag when given, else the layered value, else `None`.
    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.values.get(key) {
                Some(s) => Some(s.parse::<T>().map_err(|e| anyhow!("invalid value {s:?} for {key}: {e}"))?),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys() -> Vec<String> {
        vec!["epochs".into(), "lr".into()]
    }

    #[test]
    fn flags_win_over_set_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# sweep\nepochs = 3\nlr=0.5 # trailing\n").unwrap();
        let mut s = Settings::load(Some(&p), &["lr=0.25".into()], &keys()).unwrap();
        assert_eq!(s.get("epochs", None, 5usize).unwrap(), 3);
        assert_eq!(s.get("lr", None, 1.0f64).unwrap(), 0.25);
        assert_eq!(s.get("lr", Some(2.0), 1.0).unwrap(), 2.0);
        assert_eq!(s.resolved()["lr"], "2");
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = Settings::load(None, &["epoch=3".into()], &keys()).unwrap_err();
        let msg = e.to_string();
        assert!(e.downcast_ref::<UnknownKey>().is_some());
        assert!(msg.contains("epochs, lr"), "{msg}");
    }

    #[test]
    fn bad_values_and_lines() {
        let mut s = Settings::load(None, &["epochs=x".into()], &keys()).unwrap();
        assert!(s.get("epochs", None, 1usize).is_err());
        assert!(parse_config("just words").is_err());
    }
}
