//! Flat `key = value` configuration files.
//!
//! Values are looked up by long flag name; `-` and `_` are interchangeable.
//! Command-line flags win over the file, the file wins over built-in defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{source} line {}: expected key = value", k + 1))?;
            let key = normalize(key);
            if key.is_empty() {
                bail!("{source} line {}: empty key", k + 1);
            }
            if entries.insert(key.clone(), (value.trim().to_string(), k + 1)).is_some() {
                bail!("{source} line {}: duplicate key {key:?}", k + 1);
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    fn lookup<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let key = normalize(key);
        let Some((value, line)) = self.entries.get(&key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.clone());
        value
            .parse()
            .map(Some)
            .map_err(|e| anyhow!("{} line {line}: invalid value for {key}: {e}", self.source))
    }

    /// Flag if given, else the file entry.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let from_file = self.lookup(key)?;
        Ok(flag.or(from_file))
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| anyhow!("missing required setting --{key}"))
    }

    /// Checks an optional `mode` entry and warns about keys nobody read.
    pub fn finish(&self, mode: &str) -> Result<()> {
        if let Some(m) = self.lookup::<String>("mode")? {
            if m != mode {
                bail!("{}: mode = {m} but the {mode} subcommand was invoked", self.source);
            }
        }
        let used = self.used.borrow();
        for key in self.entries.keys().filter(|k| !used.contains(*k)) {
            log::warn!("{}: key {key:?} is not used by {mode}", self.source);
        }
        Ok(())
    }
}
