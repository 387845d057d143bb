//! Flat `key = value` run configuration with `[section]` headers.
//!
//! ```text
//! # comments start with '#'
//! [run]
//! command = pde-fit
//! seed = 3
//!
//! [train]
//! epochs = 200
//! ```
//!
//! Every key is addressed as `section.key` and must appear in [`KEYS`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{}unknown key `{key}`", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    UnknownKey { line: Option<usize>, key: String },
    #[error("line {line}: `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("{}`{key}` = `{value}`: expected {expected}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    BadValue {
        line: Option<usize>,
        key: String,
        value: String,
        expected: String,
    },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Text,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn check(self, value: &str) -> Result<(), String> {
        let ok = match self {
            Kind::Int => value.parse::<u64>().is_ok(),
            Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
            Kind::Text => !value.is_empty(),
            Kind::Choice(opts) => opts.contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(match self {
                Kind::Int => "a non-negative integer".into(),
                Kind::Float => "a finite number".into(),
                Kind::Text => "a non-empty string".into(),
                Kind::Choice(opts) => format!("one of {}", opts.join(", ")),
            })
        }
    }
}

pub const COMMANDS: &[&str] = &[
    "demo-burgers",
    "demo-intersect",
    "pde-fit",
    "timeseries",
    "toy-classify",
    "cnf2d",
    "gradcheck",
    "solve",
];

/// Every recognised key with its type and meaning.
pub const KEYS: &[(&str, Kind, &str)] = &[
    ("run.command", Kind::Choice(COMMANDS), "experiment to run"),
    ("run.seed", Kind::Int, "seed for data, initialisation and batching"),
    ("run.out", Kind::Text, "parent directory of the run directory"),
    ("run.parallel", Kind::Int, "worker threads; 1 runs serially"),
    ("task.kind", Kind::Choice(&["annuli", "reflection", "two_point"]), "toy-classify dataset"),
    ("task.n_train", Kind::Int, "training points"),
    ("task.n_test", Kind::Int, "test points (per window for timeseries)"),
    ("task.windows", Kind::Int, "timeseries test windows [n, n+1]"),
    ("task.sigma", Kind::Float, "timeseries noise scale"),
    ("task.profile", Kind::Choice(&["zero", "identity", "decreasing", "bump"]), "Burgers initial profile"),
    ("task.horizon", Kind::Float, "Burgers characteristic horizon"),
    ("task.samples", Kind::Int, "vertices per characteristic polyline"),
    ("task.dynamics", Kind::Choice(&["decay", "oscillator", "logistic"]), "solve: built-in system"),
    ("task.t", Kind::Float, "solve: end time"),
    ("model.kind", Kind::Choice(&["node", "cnode"]), "model family"),
    ("model.k", Kind::Int, "characteristic dimension"),
    ("model.hidden", Kind::Int, "hidden width"),
    ("model.balance", Kind::Choice(&["u_only", "full"]), "inputs of the learned Jacobian"),
    ("train.epochs", Kind::Int, "passes over the training set"),
    ("train.batch_size", Kind::Int, "samples per update"),
    ("train.lr", Kind::Float, "Adam learning rate"),
    ("train.grad_mode", Kind::Choice(&["adjoint", "discrete"]), "gradient method"),
    ("train.trace", Kind::Choice(&["exact", "hutchinson"]), "cnf2d trace computation"),
    ("train.probes", Kind::Int, "Hutchinson probes per evaluation"),
    ("train.instances", Kind::Int, "gradcheck instances per primitive"),
    ("solver.method", Kind::Choice(&["euler", "rk4", "dopri5"]), "integrator"),
    ("solver.h", Kind::Float, "fixed step length"),
    ("solver.rtol", Kind::Float, "dopri5 relative tolerance"),
    ("solver.atol", Kind::Float, "dopri5 absolute tolerance"),
    ("solver.max_steps", Kind::Int, "step budget per solve"),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, kind, _)| *kind)
}

/// Parsed configuration: explicitly set keys plus a record of every value a
/// run resolved, defaults included.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    msg: format!("unterminated section header `{body}`"),
                })?;
                let name = name.trim();
                if !KEYS.iter().any(|(k, _, _)| k.split('.').next() == Some(name)) {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!("unknown section `[{name}]`"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, found `{body}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let Some(sec) = &section else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("`{k}` appears before any [section]"),
                });
            };
            let key = format!("{sec}.{k}");
            let kind = kind_of(&key).ok_or_else(|| ConfigError::UnknownKey {
                line: Some(line),
                key: key.clone(),
            })?;
            kind.check(v).map_err(|expected| ConfigError::BadValue {
                line: Some(line),
                key: key.clone(),
                value: v.to_string(),
                expected,
            })?;
            if values.insert(key.clone(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate { line, key });
            }
        }
        Ok(Self { values })
    }

    /// Sets `key` from a command-line override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let kind = kind_of(key).ok_or_else(|| ConfigError::UnknownKey {
            line: None,
            key: key.to_string(),
        })?;
        kind.check(value).map_err(|expected| ConfigError::BadValue {
            line: None,
            key: key.to_string(),
            value: value.to_string(),
            expected,
        })?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Value of `key`, or `default` recorded as the resolved value.
    pub fn get<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        debug_assert!(kind_of(key).is_some(), "undeclared key {key}");
        match self.values.get(key) {
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                line: None,
                key: key.to_string(),
                value: v.clone(),
                expected: std::any::type_name::<T>().to_string(),
            }),
            None => {
                self.values.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let v = self
            .values
            .get(key)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))?;
        v.parse().map_err(|_| ConfigError::BadValue {
            line: None,
            key: key.to_string(),
            value: v.clone(),
            expected: std::any::type_name::<T>().to_string(),
        })
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// The configuration in the text format, grouped by section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in &self.values {
            let (sec, name) = key.split_once('.').expect("keys are dotted");
            if sec != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                current = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# a pde run
[run]
command = pde-fit
seed = 3   # trailing comment

[train]
epochs = 20
lr = 5e-3

[solver]
method = rk4
";

    #[test]
    fn minimal_config_fills_defaults() {
        let mut cfg = RunConfig::parse("[run]\nseed = 1\n").unwrap();
        assert_eq!(cfg.get("run.seed", 0u64).unwrap(), 1);
        assert_eq!(cfg.get("train.epochs", 100usize).unwrap(), 100);
        assert_eq!(cfg.entries().get("train.epochs").map(String::as_str), Some("100"));
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = RunConfig::parse("[train]\nephochs = 3\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: Some(2),
                key: "train.ephochs".into()
            }
        );
        assert!(err.to_string().contains("ephochs"));
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.entries().get("solver.method").map(String::as_str), Some("rk4"));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        for (text, line) in [
            ("[run]\nseed\n", 2),
            ("seed = 1\n", 1),
            ("[run\n", 1),
            ("[nope]\n", 1),
            ("[run]\nseed = 1\nseed = 2\n", 3),
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.to_string().starts_with(&format!("line {line}:")), "{err}");
        }
    }

    #[test]
    fn values_are_type_checked() {
        let err = RunConfig::parse("[solver]\nmethod = heun\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: Some(2), .. }));
        assert!(err.to_string().contains("dopri5"));
        assert!(RunConfig::parse("[train]\nlr = nan\n").is_err());
        assert!(RunConfig::parse("[run]\nseed = -1\n").is_err());
    }

    #[test]
    fn missing_required_key_is_named() {
        let cfg = RunConfig::default();
        let err = cfg.require::<String>("task.dynamics").unwrap_err();
        assert_eq!(err.to_string(), "missing required key `task.dynamics`");
    }

    #[test]
    fn overrides_are_checked() {
        let mut cfg = RunConfig::default();
        cfg.set("model.k", "4").unwrap();
        assert!(cfg.set("model.kk", "4").is_err());
        assert!(cfg.set("model.k", "four").is_err());
    }
}
