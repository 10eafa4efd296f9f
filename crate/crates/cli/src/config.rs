//! Run configuration: a TOML file with flat `[section]` tables of scalar,
//! string or array values. Every key that a command reads is recorded so that
//! misspelt or unused keys can be rejected.

use std::cell::RefCell;
use std::collections::BTreeSet;

use toml::{Table, Value};

use crate::CliError;

#[derive(Debug)]
pub struct Config {
    table: Table,
    used: RefCell<BTreeSet<String>>,
}

fn type_error(key: &str, want: &str) -> CliError {
    CliError::config(key, format!("expected {want}"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1));
            let msg = e.message().to_string();
            match line {
                Some(l) => CliError::Config { key: None, message: format!("parse error at line {l}: {msg}") },
                None => CliError::Config { key: None, message: format!("parse error: {msg}") },
            }
        })?;
        for (k, v) in &table {
            if !matches!(v, Value::Table(_)) && k != "command" {
                return Err(CliError::config(k, "top-level keys other than `command` must be sections"));
            }
            if let Value::Table(t) = v {
                if let Some((inner, _)) = t.iter().find(|(_, v)| matches!(v, Value::Table(_))) {
                    return Err(CliError::config(&format!("{k}.{inner}"), "nested sections are not supported"));
                }
            }
        }
        Ok(Config { table, used: RefCell::new(BTreeSet::new()) })
    }

    pub fn command(&self) -> Result<Option<String>, CliError> {
        self.used.borrow_mut().insert("command".into());
        match self.table.get("command") {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(type_error("command", "a string")),
        }
    }

    pub fn has_section(&self, section: &str) -> bool {
        matches!(self.table.get(section), Some(Value::Table(_)))
    }

    fn get(&self, section: &str, key: &str) -> Option<&Value> {
        let name = format!("{section}.{key}");
        let v = self.table.get(section)?.as_table()?.get(key)?;
        self.used.borrow_mut().insert(name);
        Some(v)
    }

    fn require(&self, section: &str, key: &str) -> Result<&Value, CliError> {
        self.get(section, key).ok_or_else(|| CliError::config(&format!("{section}.{key}"), "missing required key"))
    }

    fn as_f64(v: &Value, key: &str) -> Result<f64, CliError> {
        match v {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(type_error(key, "a number")),
        }
    }

    pub fn f64(&self, section: &str, key: &str) -> Result<f64, CliError> {
        Self::as_f64(self.require(section, key)?, &format!("{section}.{key}"))
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, CliError> {
        match self.get(section, key) {
            Some(v) => Self::as_f64(v, &format!("{section}.{key}")),
            None => Ok(default),
        }
    }

    pub fn f64_opt(&self, section: &str, key: &str) -> Result<Option<f64>, CliError> {
        self.get(section, key).map(|v| Self::as_f64(v, &format!("{section}.{key}"))).transpose()
    }

    /// Number that must satisfy `pred`; `what` describes the valid range.
    pub fn f64_checked(
        &self,
        section: &str,
        key: &str,
        default: Option<f64>,
        pred: impl Fn(f64) -> bool,
        what: &str,
    ) -> Result<f64, CliError> {
        let v = match default {
            Some(d) => self.f64_or(section, key, d)?,
            None => self.f64(section, key)?,
        };
        if !(v.is_finite() && pred(v)) {
            return Err(CliError::config(&format!("{section}.{key}"), format!("must be {what} (got {v})")));
        }
        Ok(v)
    }

    pub fn usize_or(&self, section: &str, key: &str, default: Option<usize>) -> Result<usize, CliError> {
        let name = format!("{section}.{key}");
        match (self.get(section, key), default) {
            (Some(Value::Integer(i)), _) if *i >= 0 => Ok(*i as usize),
            (Some(_), _) => Err(type_error(&name, "a nonnegative integer")),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(CliError::config(&name, "missing required key")),
        }
    }

    pub fn str(&self, section: &str, key: &str) -> Result<String, CliError> {
        match self.require(section, key)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(type_error(&format!("{section}.{key}"), "a string")),
        }
    }

    pub fn str_or(&self, section: &str, key: &str, default: &str) -> Result<String, CliError> {
        match self.get(section, key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(type_error(&format!("{section}.{key}"), "a string")),
            None => Ok(default.to_string()),
        }
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(section, key) {
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(type_error(&format!("{section}.{key}"), "a boolean")),
            None => Ok(default),
        }
    }

    /// A number or an array of numbers.
    pub fn f64_list_or(&self, section: &str, key: &str, default: Option<Vec<f64>>) -> Result<Vec<f64>, CliError> {
        let name = format!("{section}.{key}");
        match (self.get(section, key), default) {
            (Some(Value::Array(a)), _) => a.iter().map(|v| Self::as_f64(v, &name)).collect(),
            (Some(v), _) => Ok(vec![Self::as_f64(v, &name)?]),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(CliError::config(&name, "missing required key")),
        }
    }

    /// Array of exactly `N` numbers.
    pub fn f64_array<const N: usize>(
        &self,
        section: &str,
        key: &str,
        default: Option<[f64; N]>,
    ) -> Result<[f64; N], CliError> {
        let name = format!("{section}.{key}");
        let v = self.f64_list_or(section, key, default.map(|d| d.to_vec()))?;
        v.try_into().map_err(|_| type_error(&name, &format!("an array of {N} numbers")))
    }

    /// Array of exactly two strings (vector field components).
    pub fn str_pair_or(&self, section: &str, key: &str, default: Option<[&str; 2]>) -> Result<[String; 2], CliError> {
        let name = format!("{section}.{key}");
        match (self.get(section, key), default) {
            (Some(Value::Array(a)), _) if a.len() == 2 => {
                let s: Vec<String> = a
                    .iter()
                    .map(|v| v.as_str().map(str::to_string).ok_or_else(|| type_error(&name, "two strings")))
                    .collect::<Result<_, _>>()?;
                Ok([s[0].clone(), s[1].clone()])
            }
            (Some(_), _) => Err(type_error(&name, "an array of two expression strings")),
            (None, Some(d)) => Ok([d[0].to_string(), d[1].to_string()]),
            (None, None) => Err(CliError::config(&name, "missing required key")),
        }
    }

    /// Rejects keys that no part of the command looked at.
    pub fn check_unused(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        for (section, v) in &self.table {
            match v {
                Value::Table(t) => {
                    for k in t.keys() {
                        let name = format!("{section}.{k}");
                        if !used.contains(&name) {
                            return Err(CliError::config(&name, "unknown key for this command"));
                        }
                    }
                }
                _ if used.contains(section) => {}
                _ => return Err(CliError::config(section, "unknown key for this command")),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_report_the_line() {
        let e = Config::parse("[mesh]\nn = 8\nkind = \n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn typed_access_and_unused_keys() {
        let c = Config::parse("[problem]\nlambda = 2\nts = [0.1, 0.01]\nextra = 1\n").unwrap();
        assert_eq!(c.f64("problem", "lambda").unwrap(), 2.0);
        assert_eq!(c.f64_list_or("problem", "ts", None).unwrap(), vec![0.1, 0.01]);
        assert!(c.f64("problem", "p").unwrap_err().to_string().contains("problem.p"));
        assert!(c.check_unused().unwrap_err().to_string().contains("problem.extra"));
    }
}
