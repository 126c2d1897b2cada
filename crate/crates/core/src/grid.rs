//! Experiment grids: a small key/value config format, cross-product
//! expansion into run manifests, and per-run directories with scripts.
//!
//! ```text
//! # lines before any section belong to [base]
//! [base]
//! command = train
//! preset = mnist-fc64
//! epochs = 5
//!
//! [grid]
//! lr = [0.1, 0.01]
//! seed = +range(3)
//! ```
//!
//! Scalars are integers, floats, `true`/`false`, or strings (bare or in double
//! quotes). A grid axis is a `[..]` list, a single scalar, or an evaluated
//! value: `+range(a)`, `+range(a, b)`, `+range(a, b, step)` or `+[v1, v2, ..]`.
//! Axes expand in declaration order with the last axis varying fastest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("grid axis `{0}` has no values")]
    EmptyAxis(String),

    #[error("grid axis `{0}` is declared twice")]
    DuplicateAxis(String),

    #[error("base setting `{0}` is declared twice")]
    DuplicateKey(String),

    #[error("axis `{axis}`: cannot evaluate `{value}`: {reason}")]
    MalformedEval {
        axis: String,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    fn parse_scalar(s: &str) -> Option<Value> {
        let s = s.trim();
        if s.is_empty() {
            return None;
        }
        if let Some(inner) = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
            return Some(Value::Str(inner.to_string()));
        }
        if s.contains(['"', '[', ']', ',']) {
            return None;
        }
        Some(match s {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => {
                if let Ok(i) = s.parse::<i64>() {
                    Value::Int(i)
                } else if let Ok(f) = s.parse::<f64>() {
                    Value::Float(f)
                } else {
                    Value::Str(s.to_string())
                }
            }
        })
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "bool",
            Value::Int(_) | Value::Float(_) => "number",
            Value::Str(_) => "string",
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self {
            Value::Int(i) => u64::try_from(*i).ok(),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub base: Vec<(String, Value)>,
    pub axes: Vec<(String, Vec<Value>)>,
    /// The config text exactly as read.
    pub source: String,
}

fn split_list(inner: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut quoted = false;
    for (i, c) in inner.char_indices() {
        match c {
            '"' => quoted = !quoted,
            ',' if !quoted => {
                parts.push(&inner[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&inner[start..]);
    parts
}

fn parse_list(axis: &str, raw: &str, line: usize) -> std::result::Result<Vec<Value>, GridError> {
    let inner = raw
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| GridError::Syntax {
            line,
            message: format!("unterminated list for `{axis}`"),
        })?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    split_list(inner)
        .into_iter()
        .map(|item| {
            Value::parse_scalar(item).ok_or_else(|| GridError::Syntax {
                line,
                message: format!("bad list item `{}` for `{axis}`", item.trim()),
            })
        })
        .collect()
}

fn malformed(axis: &str, value: &str, reason: impl Into<String>) -> GridError {
    GridError::MalformedEval {
        axis: axis.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

/// Evaluates `+range(..)` or `+[..]`.
fn eval_prefixed(axis: &str, raw: &str) -> std::result::Result<Vec<Value>, GridError> {
    let body = &raw[1..];
    let values = if let Some(args) = body
        .strip_prefix("range(")
        .and_then(|r| r.strip_suffix(')'))
    {
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<i64>, _>>()
            .map_err(|_| malformed(axis, raw, "range arguments must be integers"))?;
        let (start, stop, step) = match nums.as_slice() {
            [b] => (0, *b, 1),
            [a, b] => (*a, *b, 1),
            [a, b, s] => (*a, *b, *s),
            _ => return Err(malformed(axis, raw, "range takes one to three arguments")),
        };
        if step == 0 {
            return Err(malformed(axis, raw, "range step must not be zero"));
        }
        let mut v = Vec::new();
        let mut i = start;
        while (step > 0 && i < stop) || (step < 0 && i > stop) {
            v.push(Value::Int(i));
            i += step;
        }
        v
    } else if body.starts_with('[') {
        let list =
            parse_list(axis, body, 0).map_err(|_| malformed(axis, raw, "bad list literal"))?;
        if let Some(first) = list.first() {
            if list.iter().any(|v| v.kind() != first.kind()) {
                return Err(malformed(axis, raw, "list mixes value kinds"));
            }
        }
        list
    } else {
        return Err(malformed(
            axis,
            raw,
            "only +range(..) and +[..] are supported",
        ));
    };
    Ok(values)
}

impl GridConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, GridError> {
        #[derive(PartialEq)]
        enum Section {
            Base,
            Grid,
        }
        let mut section = Section::Base;
        let mut base: Vec<(String, Value)> = Vec::new();
        let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw_line).trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && !line.contains('=') {
                section = match line {
                    "[base]" => Section::Base,
                    "[grid]" => Section::Grid,
                    other => {
                        return Err(GridError::Syntax {
                            line: line_no,
                            message: format!("unknown section {other}"),
                        })
                    }
                };
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GridError::Syntax {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(GridError::Syntax {
                    line: line_no,
                    message: format!("bad key `{key}`"),
                });
            }
            match section {
                Section::Base => {
                    if base.iter().any(|(k, _)| k == key) {
                        return Err(GridError::DuplicateKey(key.into()));
                    }
                    let v = Value::parse_scalar(value).ok_or_else(|| GridError::Syntax {
                        line: line_no,
                        message: format!("base setting `{key}` must be a single scalar"),
                    })?;
                    base.push((key.into(), v));
                }
                Section::Grid => {
                    if axes.iter().any(|(k, _)| k == key) {
                        return Err(GridError::DuplicateAxis(key.into()));
                    }
                    let values = if value.starts_with('+') {
                        eval_prefixed(key, value)?
                    } else if value.starts_with('[') {
                        parse_list(key, value, line_no)?
                    } else {
                        vec![Value::parse_scalar(value).ok_or_else(|| GridError::Syntax {
                            line: line_no,
                            message: format!("bad value for `{key}`"),
                        })?]
                    };
                    if values.is_empty() {
                        return Err(GridError::EmptyAxis(key.into()));
                    }
                    axes.push((key.into(), values));
                }
            }
        }
        Ok(GridConfig {
            base,
            axes,
            source: text.to_string(),
        })
    }

    /// Number of runs the grid expands to.
    pub fn size(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

/// One fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub settings: BTreeMap<String, Value>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config_snapshot: String,
}

/// Cross product of the grid axes over the base settings.
pub fn expand_grid(cfg: &GridConfig, out_root: &Path) -> Vec<RunManifest> {
    let total = cfg.size();
    (0..total)
        .map(|n| {
            let mut settings: BTreeMap<String, Value> = cfg.base.iter().cloned().collect();
            let mut rest = n;
            for (name, values) in cfg.axes.iter().rev() {
                settings.insert(name.clone(), values[rest % values.len()].clone());
                rest /= values.len();
            }
            let run_id = format!("run-{n:04}");
            RunManifest {
                seed: settings.get("seed").and_then(Value::as_u64).unwrap_or(0),
                out_dir: out_root.join(&run_id),
                run_id,
                settings,
                config_snapshot: cfg.source.clone(),
            }
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const SCRIPT_FILE: &str = "run.sh";

/// Creates each run directory with its manifest, a byte copy of the config
/// and a `run.sh` that calls `<exe> run-manifest`.
pub fn write_runs(manifests: &[RunManifest], config_bytes: &[u8], exe: &str) -> Result<()> {
    for m in manifests {
        let dir = &m.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        std::fs::write(&manifest_path, serde_json::to_string_pretty(m)?)
            .map_err(|e| Error::io(&manifest_path, e))?;
        let snap = dir.join(SNAPSHOT_FILE);
        std::fs::write(&snap, config_bytes).map_err(|e| Error::io(&snap, e))?;
        let script = dir.join(SCRIPT_FILE);
        let body = format!(
            "#!/bin/sh\nset -e\nexec '{}' run-manifest '{}'\n",
            exe.replace('\'', "'\\''"),
            manifest_path.display().to_string().replace('\'', "'\\''")
        );
        std::fs::write(&script, body).map_err(|e| Error::io(&script, e))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755))
                .map_err(|e| Error::io(&script, e))?;
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `--key value` arguments for a manifest's settings. `command` selects the
/// subcommand (default `train`); `true` becomes a bare flag and `false` is
/// dropped. `--out` is set to the run directory unless a setting names it.
pub fn manifest_argv(m: &RunManifest) -> Vec<String> {
    let command = match m.settings.get("command") {
        Some(Value::Str(s)) => s.clone(),
        _ => "train".into(),
    };
    let mut argv = vec!["prunelab".to_string(), command];
    for (k, v) in &m.settings {
        if k == "command" {
            continue;
        }
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            Value::Bool(true) => argv.push(flag),
            Value::Bool(false) => {}
            other => {
                argv.push(flag);
                argv.push(other.to_string());
            }
        }
    }
    if !m.settings.contains_key("out") {
        argv.push("--out".into());
        argv.push(m.out_dir.display().to_string());
    }
    argv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three() {
        let cfg = GridConfig::parse("[grid]\nlr = [0.1, 0.01]\nseed = [1, 2, 3]\n").unwrap();
        let runs = expand_grid(&cfg, Path::new("out"));
        assert_eq!(runs.len(), 6);
        // last axis fastest
        assert_eq!(runs[0].settings["seed"], Value::Int(1));
        assert_eq!(runs[1].settings["seed"], Value::Int(2));
        assert_eq!(runs[3].settings["lr"], Value::Float(0.01));
        assert_eq!(runs[5].seed, 3);
    }

    #[test]
    fn evaluated_range() {
        let cfg = GridConfig::parse("[grid]\nseed = +range(5)\n").unwrap();
        let seeds: Vec<u64> = expand_grid(&cfg, Path::new("o"))
            .iter()
            .map(|m| m.seed)
            .collect();
        assert_eq!(seeds, vec![0, 1, 2, 3, 4]);
        let cfg = GridConfig::parse("[grid]\nx = +range(10, 0, -3)\ny = +[a, b]\n").unwrap();
        assert_eq!(
            cfg.axes[0].1,
            vec![Value::Int(10), Value::Int(7), Value::Int(4), Value::Int(1)]
        );
        assert_eq!(cfg.size(), 8);
    }

    #[test]
    fn no_axes_is_one_run() {
        let cfg = GridConfig::parse("preset = tiny\nepochs = 2\n").unwrap();
        let runs = expand_grid(&cfg, Path::new("o"));
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].settings["preset"], Value::Str("tiny".into()));
    }

    #[test]
    fn distinct_errors() {
        assert_eq!(
            GridConfig::parse("[grid]\na = []\n").unwrap_err(),
            GridError::EmptyAxis("a".into())
        );
        assert_eq!(
            GridConfig::parse("[grid]\na = +range(0)\n").unwrap_err(),
            GridError::EmptyAxis("a".into())
        );
        assert_eq!(
            GridConfig::parse("[grid]\na = [1]\na = [2]\n").unwrap_err(),
            GridError::DuplicateAxis("a".into())
        );
        for bad in [
            "+range(x)",
            "+eval(1)",
            "+range(1,2,0)",
            "+[1, a]",
            "+range(1,2,3,4)",
        ] {
            assert!(
                matches!(
                    GridConfig::parse(&format!("[grid]\na = {bad}\n")),
                    Err(GridError::MalformedEval { .. })
                ),
                "{bad}"
            );
        }
        assert!(matches!(
            GridConfig::parse("just words\n"),
            Err(GridError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            GridConfig::parse("[other]\n"),
            Err(GridError::Syntax { .. })
        ));
    }

    #[test]
    fn quoted_strings_and_comments() {
        let cfg =
            GridConfig::parse("name = \"a # b\" # trailing\n[grid]\nt = [\"x,y\", z]\n").unwrap();
        assert_eq!(cfg.base[0].1, Value::Str("a # b".into()));
        assert_eq!(
            cfg.axes[0].1,
            vec![Value::Str("x,y".into()), Value::Str("z".into())]
        );
    }

    #[test]
    fn argv_from_manifest() {
        let cfg = GridConfig::parse(
            "command = train\nbias_propagation = true\nquiet = false\n[grid]\nlr = [0.5]\n",
        )
        .unwrap();
        let m = &expand_grid(&cfg, Path::new("root"))[0];
        assert_eq!(
            manifest_argv(m),
            vec![
                "prunelab",
                "train",
                "--bias-propagation",
                "--lr",
                "0.5",
                "--out",
                "root/run-0000"
            ]
        );
    }
}
