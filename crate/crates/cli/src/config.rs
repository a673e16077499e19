//! Option resolution: command-line flag, then environment, then the
//! `--config` file, then the built-in default.
//!
//! The config file holds `key = value` lines. Keys are long flag names
//! (`snr-db` or `snr_db`); `#` starts a comment.

use std::any::Any;
use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::ArgMatches;

use crate::CliError;

pub fn parse_config(text: &str, known: &[String]) -> Result<HashMap<String, String>, CliError> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Input(format!("config line {}: expected key = value", i + 1)));
        };
        let key = k.trim().replace('-', "_");
        if !known.contains(&key) {
            return Err(CliError::Input(format!("config line {}: unknown key {:?}", i + 1, k.trim())));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load_config(path: &Path, known: &[String]) -> Result<HashMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, known)
}

/// Resolves options for one subcommand and records where each came from.
pub struct Resolver<'a> {
    matches: &'a ArgMatches,
    file: &'a HashMap<String, String>,
    log: std::cell::RefCell<Vec<(String, String, &'static str)>>,
}

impl<'a> Resolver<'a> {
    pub fn new(matches: &'a ArgMatches, file: &'a HashMap<String, String>) -> Self {
        Self {
            matches,
            file,
            log: Default::default(),
        }
    }

    fn cli_value<T: Clone + Send + Sync + Any + 'static>(&self, id: &str) -> Option<(T, &'static str)> {
        let src = match self.matches.value_source(id)? {
            ValueSource::CommandLine => "flag",
            ValueSource::EnvVariable => "env",
            _ => return None,
        };
        self.matches.get_one::<T>(id).cloned().map(|v| (v, src))
    }

    /// Value of `id`, or `None` if no source sets it.
    pub fn opt<T>(&self, id: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display + Clone + Send + Sync + Any + 'static,
        T::Err: Display,
    {
        let found = match self.cli_value::<T>(id) {
            Some(v) => Some(v),
            None => match self.file.get(id) {
                Some(s) => Some((
                    s.parse::<T>()
                        .map_err(|e| CliError::Input(format!("config key {}: {e}", id.replace('_', "-"))))?,
                    "file",
                )),
                None => None,
            },
        };
        if let Some((v, src)) = &found {
            self.log.borrow_mut().push((id.replace('_', "-"), v.to_string(), src));
        }
        Ok(found.map(|(v, _)| v))
    }

    /// Like [`Resolver::opt`], falling back to the option's declared default.
    pub fn get<T>(&self, id: &str) -> Result<T, CliError>
    where
        T: FromStr + Display + Clone + Send + Sync + Any + 'static,
        T::Err: Display,
    {
        if let Some(v) = self.opt(id)? {
            return Ok(v);
        }
        let v = self
            .matches
            .get_one::<T>(id)
            .cloned()
            .ok_or_else(|| CliError::Input(format!("--{} is required", id.replace('_', "-"))))?;
        self.log.borrow_mut().push((id.replace('_', "-"), v.to_string(), "default"));
        Ok(v)
    }

    pub fn flag(&self, id: &str) -> Result<bool, CliError> {
        let v = match self.matches.value_source(id) {
            Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable) => (self.matches.get_flag(id), "flag"),
            _ => match self.file.get(id) {
                Some(s) => (
                    s.parse::<bool>()
                        .map_err(|e| CliError::Input(format!("config key {}: {e}", id.replace('_', "-"))))?,
                    "file",
                ),
                None => (false, "default"),
            },
        };
        self.log.borrow_mut().push((id.replace('_', "-"), v.0.to_string(), v.1));
        Ok(v.0)
    }

    pub fn require<T>(&self, id: &str) -> Result<T, CliError>
    where
        T: FromStr + Display + Clone + Send + Sync + Any + 'static,
        T::Err: Display,
    {
        self.opt(id)?
            .ok_or_else(|| CliError::Input(format!("--{} is required", id.replace('_', "-"))))
    }

    pub fn print(&self) {
        for (k, v, src) in self.log.borrow().iter() {
            eprintln!("config {k} = {v} ({src})");
        }
    }
}
