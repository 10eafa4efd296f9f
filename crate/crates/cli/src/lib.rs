//! Config driven front end of the `vishape` library. Each command reads a
//! TOML configuration, runs one computation and returns the files to write
//! together with a JSON summary and a one-line report.

pub mod commands;
pub mod config;
pub mod demos;

use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use vishape::io::fmt_f64;

pub use config::Config;

/// Commands that take a configuration file.
pub const COMMANDS: &[&str] = &[
    "solve-vi",
    "rate-sweep",
    "material-derivative",
    "shape-derivative",
    "damage-run",
    "derivative-check",
    "shape-descent",
];

#[derive(Debug)]
pub enum CliError {
    /// Unreadable, malformed or invalid configuration.
    Config { key: Option<String>, message: String },
    /// Failure inside the library, with the module that raised it.
    Solver { context: &'static str, source: vishape::Error },
    /// File system failure.
    Io { path: String, message: String },
}

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config { key: Some(key.to_string()), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Io { .. } => 2,
            CliError::Solver { .. } => 3,
        }
    }

    /// Single-line JSON description of the error.
    pub fn json_line(&self) -> String {
        let mut m = Map::new();
        match self {
            CliError::Config { key, message } => {
                m.insert("error".into(), "config".into());
                if let Some(k) = key {
                    m.insert("key".into(), k.clone().into());
                }
                m.insert("message".into(), message.clone().into());
            }
            CliError::Solver { context, source } => {
                m.insert("error".into(), "solver".into());
                m.insert("module".into(), (*context).into());
                m.insert("message".into(), source.to_string().into());
            }
            CliError::Io { path, message } => {
                m.insert("error".into(), "io".into());
                m.insert("path".into(), path.clone().into());
                m.insert("message".into(), message.clone().into());
            }
        }
        Value::Object(m).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { key: Some(k), message } => write!(f, "config error in `{k}`: {message}"),
            CliError::Config { key: None, message } => write!(f, "config error: {message}"),
            CliError::Solver { context, source } => write!(f, "{context}: {source}"),
            CliError::Io { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Attaches the module name to library errors.
pub trait Context<T> {
    fn ctx(self, module: &'static str) -> Result<T, CliError>;
    /// Library error caused by a configuration value.
    fn key(self, key: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for vishape::Result<T> {
    fn ctx(self, module: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Solver { context: module, source })
    }
    fn key(self, key: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::config(key, e.to_string()))
    }
}

/// JSON number printed with 17 significant digits; non-finite values become
/// strings.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        Value::Number(fmt_f64(v).parse().expect("formatted float is a JSON number"))
    } else {
        Value::String(fmt_f64(v))
    }
}

pub fn nums(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| num(x)).collect())
}

/// Result of a command.
#[derive(Debug, Clone)]
pub struct Output {
    pub command: String,
    /// `(file name, contents)`; `summary.json` is added on write.
    pub files: Vec<(String, String)>,
    pub summary: Value,
    /// One-line report printed on success.
    pub line: String,
}

impl Output {
    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serialises");
        s.push('\n');
        s
    }

    /// Looks up a summary entry by a `/`-separated path.
    pub fn get(&self, path: &str) -> Option<&Value> {
        self.summary.pointer(&format!("/{path}"))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let io = |p: &Path, e: std::io::Error| CliError::Io { path: p.display().to_string(), message: e.to_string() };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, contents) in
            self.files.iter().chain(std::iter::once(&("summary.json".to_string(), self.summary_json())))
        {
            let p = dir.join(name);
            std::fs::write(&p, contents).map_err(|e| io(&p, e))?;
        }
        Ok(())
    }
}

/// Runs a configuration. `command` overrides nothing: when both the caller
/// and the file name a command they must agree. Returns the output and the
/// output directory requested by the file, if any.
pub fn run_config(command: Option<&str>, text: &str) -> Result<(Output, Option<PathBuf>), CliError> {
    let cfg = Config::parse(text)?;
    let named = cfg.command()?;
    let command = match (command, named.as_deref()) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::config("command", format!("file is for `{b}` but `{a}` was requested")))
        }
        (Some(a), _) => a.to_string(),
        (None, Some(b)) => b.to_string(),
        (None, None) => return Err(CliError::config("command", "missing required key")),
    };
    let dir = cfg.has_section("output").then(|| cfg.str("output", "dir")).transpose()?.map(PathBuf::from);
    let out = commands::run(&command, &cfg)?;
    Ok((out, dir))
}

/// Reads `VISHAPE_THREADS` (default 1) and applies it.
pub fn configure_threads() -> Result<usize, CliError> {
    let n =
        match std::env::var("VISHAPE_THREADS") {
            Ok(s) => s.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::config("VISHAPE_THREADS", format!("expected a positive integer, got `{s}`"))
            })?,
            Err(_) => 1,
        };
    vishape::parallel::set_threads(n);
    Ok(n)
}
