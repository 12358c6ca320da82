//! Flat key-value config files.
//!
//! ```text
//! # two-type cluster
//! M = 2
//! gamma = 0.5, 0.5
//! C = 1/5, 9/5
//! d = 2, 2
//! lambda = 0.9
//! mu = 1.0
//! ```
//!
//! Values may be plain numbers, `a/b` fractions, or comma-separated lists.
//! Extra keys are kept so the same file can carry experiment settings; the
//! cluster extractor only validates its own keys. Errors carry the line the
//! offending key was defined on (line 0 means a command-line override).

use std::collections::BTreeMap;
use std::fmt;

use crate::cluster::{ClusterSpec, SpecError};

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}", self.line, self.message)
        } else {
            write!(f, "{}", self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

/// A parsed key-value file: values plus the line each key was defined on.
#[derive(Debug, Default, Clone)]
pub struct KvMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected `key = value`, got `{raw}`")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(err(lineno, "empty key"));
            }
            if entries.contains_key(&key) {
                return Err(err(lineno, format!("duplicate key `{key}`")));
            }
            entries.insert(key, (value.trim().to_string(), lineno));
        }
        Ok(Self { entries })
    }

    /// Applies a `key=value` override (reported as line 0 in errors).
    pub fn set_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| err(0, format!("override `{assignment}` is not key=value")))?;
        self.entries
            .insert(key.trim().to_string(), (value.trim().to_string(), 0));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|&(_, l)| l).unwrap_or(0)
    }

    fn required(&self, key: &str) -> Result<(&str, usize), ConfigError> {
        self.entries
            .get(key)
            .map(|(v, l)| (v.as_str(), *l))
            .ok_or_else(|| err(0, format!("missing required key `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, l)) => parse_number(v).map(Some).map_err(|m| err(*l, m)),
        }
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, l)) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| err(*l, format!("`{key}` must be a nonnegative integer"))),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, l)) => parse_list(v).map(Some).map_err(|m| err(*l, m)),
        }
    }

    /// Builds and validates a [`ClusterSpec`] from the `M`, `gamma`, `C`, `d`,
    /// `lambda`, `mu` keys.
    pub fn cluster_spec(&self) -> Result<ClusterSpec, ConfigError> {
        let (m_str, m_line) = self.required("M")?;
        let m: usize = m_str
            .parse()
            .map_err(|_| err(m_line, "`M` must be a positive integer"))?;

        let (gamma_str, gamma_line) = self.required("gamma")?;
        let gamma = parse_list(gamma_str).map_err(|msg| err(gamma_line, msg))?;
        let (c_str, c_line) = self.required("C")?;
        let capacity = parse_list(c_str).map_err(|msg| err(c_line, msg))?;
        let (d_str, d_line) = self.required("d")?;
        let d_raw = parse_list(d_str).map_err(|msg| err(d_line, msg))?;

        for (key, line, list) in [
            ("gamma", gamma_line, &gamma),
            ("C", c_line, &capacity),
            ("d", d_line, &d_raw),
        ] {
            if list.len() != m {
                return Err(err(line, format!("`{key}` must list M={m} values")));
            }
        }
        let samples = d_raw
            .iter()
            .map(|&x| {
                if x >= 1.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(err(d_line, "`d` entries must be integers >= 1"))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;

        let lambda = self
            .f64("lambda")?
            .ok_or_else(|| err(0, "missing required key `lambda`"))?;
        let mu = self
            .f64("mu")?
            .ok_or_else(|| err(0, "missing required key `mu`"))?;

        ClusterSpec::new(gamma, capacity, samples, lambda, mu).map_err(|e| {
            let line = match &e {
                SpecError::GammaSum(_) | SpecError::GammaNonPositive(_) => gamma_line,
                SpecError::CapacityOrder(_) => c_line,
                SpecError::SampleCount(_) => d_line,
                SpecError::Lambda => self.line_of("lambda"),
                SpecError::Mu => self.line_of("mu"),
                _ => m_line,
            };
            err(line, e.to_string())
        })
    }
}

/// Parses `1.5`, `3`, or an exact fraction `a/b`.
fn parse_number(token: &str) -> Result<f64, String> {
    let t = token.trim();
    if let Some((num, den)) = t.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| format!("bad numerator in `{t}`"))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| format!("bad denominator in `{t}`"))?;
        if d == 0.0 {
            return Err(format!("division by zero in `{t}`"));
        }
        Ok(n / d)
    } else {
        t.parse().map_err(|_| format!("`{t}` is not a number"))
    }
}

fn parse_list(value: &str) -> Result<Vec<f64>, String> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(parse_number)
        .collect()
}

pub fn parse_cluster_spec(text: &str) -> Result<ClusterSpec, ConfigError> {
    KvMap::parse(text)?.cluster_spec()
}
