//! `key=value` config files and the flag > file > default merge.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Every key a config file may set. Keys are the long flag names.
pub const KNOWN_KEYS: &[&str] = &[
    "batch",
    "checkpoint-every",
    "count",
    "depth",
    "desk",
    "eval-every",
    "holdout",
    "lr",
    "momentum",
    "narrow",
    "no-plus",
    "samples",
    "samples-per-image",
    "seed",
    "seeds",
    "sigma",
    "size",
    "steps",
    "stride",
    "tile",
    "wide",
];

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit code 1.
    Usage(String),
    /// The command ran and failed: exit code 2.
    Runtime(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<deepunet::Error> for CliError {
    fn from(e: deepunet::Error) -> Self {
        // the library's messages already name their cause
        CliError::Runtime(anyhow::anyhow!(e.to_string()))
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Clone, Debug, Default)]
pub struct FileConfig {
    path: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = FileConfig {
            path: Some(path.to_path_buf()),
            values: BTreeMap::new(),
        };
        cfg.values = parse(&text).map_err(|msg| usage(format!("{}: {msg}", path.display())))?;
        Ok(cfg)
    }

    /// Value of `key`, parsed.
    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse().map_err(|e| {
                    let file = self.path.as_ref().map_or("config".into(), |p| p.display().to_string());
                    usage(format!("{file}: bad value `{v}` for `{key}`: {e}"))
                })
            })
            .transpose()
    }

    /// Boolean switch: true if set on the command line or in the file.
    pub fn switch(&self, flag: bool, key: &str) -> CliResult<bool> {
        Ok(flag || self.get::<bool>(key)?.unwrap_or(false))
    }

    /// The command-line value if given, else the file's.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

pub fn parse(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut values = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN_KEYS.contains(&key) {
            return Err(format!("line {}: unknown key `{key}`", n + 1));
        }
        if values.insert(key.to_string(), value.to_string()).is_some() {
            return Err(format!("line {}: `{key}` set twice", n + 1));
        }
    }
    Ok(values)
}

/// Resolved settings in config-file syntax, for logs and output headers.
#[derive(Clone, Debug, Default)]
pub struct Resolved(pub Vec<(String, String)>);

impl Resolved {
    pub fn push(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    pub fn line(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn file(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// `HxW` image extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Extent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Extent {
            height: num(h)?,
            width: num(w)?,
        })
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}
