//! Plain-text `key = value` job configs with flag overrides.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Each
//! subcommand declares its keys and defaults; anything else is rejected.
//! Flags and `--set` overrides win over the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// A bad flag, config key or value; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// (key, default, description). An empty default means unset.
pub type KeySpec = (&'static str, &'static str, &'static str);

pub fn parse_pairs(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("config line {}: expected key = value", n + 1)));
        };
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(
        keys: &[KeySpec],
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> anyhow::Result<Self> {
        let mut values: BTreeMap<String, String> =
            keys.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("reading config {}: {e}", path.display())))?;
            pairs.extend(parse_pairs(&text)?);
        }
        pairs.extend(overrides.iter().cloned());
        for (k, v) in pairs {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => {
                    let known: Vec<&str> = keys.iter().map(|(k, _, _)| *k).collect();
                    return Err(usage(format!("unknown config key {k:?}; known keys: {}", known.join(", "))));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|v| !v.is_empty())
    }

    pub fn required(&self, key: &str) -> anyhow::Result<&str> {
        self.opt(key).ok_or_else(|| usage(format!("missing required setting `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.str(key);
        raw.parse().map_err(|e| usage(format!("bad value {raw:?} for `{key}`: {e}")))
    }

    pub fn opt_get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.opt(key) {
            None | Some("none") => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    /// `key = value` lines, sorted by key.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
