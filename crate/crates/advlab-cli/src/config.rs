//! Flat key=value run configuration: file loading, flag-over-file
//! merging, and the resolved echo every command writes next to its
//! outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Keys any command may carry without consuming; a config file written
/// for one command stays usable where some globals are irrelevant.
const GLOBAL_KEYS: [&str; 5] = ["seed", "threads", "out", "data-dir", "profile"];

pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                idx + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Merges one command's flag values over the config file and records
/// every resolved key for the echo file. File keys the command never
/// asks for are rejected by [`Resolver::finish`], so a typo fails
/// loudly instead of being ignored.
pub struct Resolver {
    file: BTreeMap<String, String>,
    asked: BTreeSet<String>,
    echo: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: BTreeMap<String, String>) -> Resolver {
        Resolver {
            file,
            asked: GLOBAL_KEYS.iter().map(|k| k.to_string()).collect(),
            echo: BTreeMap::new(),
        }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e: T::Err| {
                CliError::Usage(format!("config key `{key}`: {e} (got `{raw}`)"))
            }),
        }
    }

    /// Resolve one key: flag, then file, then default. No default means
    /// the key is required.
    pub fn take<T>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.asked.insert(key.to_string());
        let value = match flag {
            Some(v) => v,
            None => match self.file_value(key)? {
                Some(v) => v,
                None => default
                    .ok_or_else(|| CliError::Usage(format!("missing required option --{key}")))?,
            },
        };
        self.echo.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Resolver::take`] but absent is fine; echoed only when set.
    pub fn take_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.asked.insert(key.to_string());
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.echo.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn take_path(
        &mut self,
        key: &str,
        flag: Option<PathBuf>,
        required: bool,
    ) -> Result<Option<PathBuf>, CliError> {
        self.asked.insert(key.to_string());
        let value = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(PathBuf::from),
        };
        match &value {
            Some(v) => {
                self.echo.insert(key.to_string(), v.display().to_string());
            }
            None if required => {
                return Err(CliError::Usage(format!("missing required option --{key}")));
            }
            None => {}
        }
        Ok(value)
    }

    /// Path list, comma-separated in the file, repeatable as a flag.
    pub fn take_paths(&mut self, key: &str, flag: Vec<PathBuf>) -> Result<Vec<PathBuf>, CliError> {
        self.asked.insert(key.to_string());
        let value: Vec<PathBuf> = if flag.is_empty() {
            match self.file.get(key) {
                Some(raw) => raw.split(',').map(|p| PathBuf::from(p.trim())).collect(),
                None => Vec::new(),
            }
        } else {
            flag
        };
        if value.is_empty() {
            return Err(CliError::Usage(format!("missing required option --{key}")));
        }
        let joined = value
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.echo.insert(key.to_string(), joined);
        Ok(value)
    }

    /// Reject leftover file keys and return the echo body.
    pub fn finish(self) -> Result<String, CliError> {
        for key in self.file.keys() {
            if !self.asked.contains(key) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
        }
        let mut body = String::new();
        for (k, v) in &self.echo {
            body.push_str(k);
            body.push('=');
            body.push_str(v);
            body.push('\n');
        }
        Ok(body)
    }
}

/// Parse an epsilon grid: either `start:stop:step` with an inclusive
/// stop, or a comma list. Values must be finite, non-negative, and
/// strictly ascending.
pub fn parse_grid(text: &str) -> Result<Vec<f32>, CliError> {
    let text = text.trim();
    let bad = |msg: String| Err(CliError::Usage(format!("grid `{text}`: {msg}")));

    let points: Vec<f32> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return bad("ranges are start:stop:step".to_string());
        }
        let mut nums = [0.0f64; 3];
        for (slot, part) in nums.iter_mut().zip(&parts) {
            *slot = match part.trim().parse() {
                Ok(v) => v,
                Err(e) => return bad(format!("{e} (got `{part}`)")),
            };
        }
        let [start, stop, step] = nums;
        if !step.is_finite() || step <= 0.0 {
            return bad("step must be positive".to_string());
        }
        if stop < start {
            return bad("stop is below start".to_string());
        }
        let n = ((stop - start) / step).round() as usize;
        if (start + n as f64 * step - stop).abs() > 1e-6 {
            return bad("step does not land on stop".to_string());
        }
        (0..=n).map(|i| (start + i as f64 * step) as f32).collect()
    } else {
        text.split(',')
            .map(|part| {
                part.trim()
                    .parse()
                    .map_err(|e| CliError::Usage(format!("grid `{text}`: {e} (got `{part}`)")))
            })
            .collect::<Result<_, _>>()?
    };

    if points.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return bad("values must be finite and non-negative".to_string());
    }
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return bad("values must be strictly ascending".to_string());
    }
    Ok(points)
}
