//! TOML run configuration. Every command-line flag overrides the matching
//! file entry; relative paths in a file are resolved against its directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use jmls_core::{Convention, EmConfig, Freeze, UNBOUNDED};
use serde::{Deserialize, Deserializer};

use crate::error::{CliError, CliResult};

/// Components kept per mode; `inf` disables reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget(pub usize);

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "inf" | "exact" => Ok(Budget(UNBOUNDED)),
            t => match t.parse::<usize>() {
                Ok(0) => Err("budget must be at least 1".into()),
                Ok(n) => Ok(Budget(n)),
                Err(_) => Err(format!("invalid budget {t:?} (expected a positive integer or \"inf\")")),
            },
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == UNBOUNDED {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(i64),
            Word(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Count(n) => n.to_string(),
            Raw::Word(w) => w,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub filter: Option<Budget>,
    pub bif: Option<Budget>,
    pub smoother: Option<Budget>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmSection {
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub patience: Option<usize>,
    pub stage_transition: Option<bool>,
    pub transition_delta: Option<f64>,
    pub transition_patience: Option<usize>,
    pub transition_floor: Option<f64>,
    pub freeze: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub steps: Option<usize>,
    pub input: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodeSection {
    pub points: Option<usize>,
}

/// Contents of a configuration file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub convention: Option<Convention>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub bode: BodeSection,
}

impl FileConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Reads a file, resolving its relative paths against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.model, &mut cfg.paths.dataset, &mut cfg.paths.output_dir, &mut cfg.paths.reference].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(input) = &mut cfg.simulate.input {
            if !matches!(input.as_str(), "normal" | "zero") && Path::new(input.as_str()).is_relative() {
                *input = base.join(input.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn load_optional(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Parses freeze names: `gamma`, `pi`, `transition`, `prior`, `all`.
pub fn parse_freeze(names: &[String]) -> CliResult<Freeze> {
    let mut f = Freeze::default();
    for n in names {
        match n.trim() {
            "gamma" => f.gamma = true,
            "pi" => f.pi = true,
            "transition" => f.transition = true,
            "prior" => f.prior = true,
            "all" => f = Freeze::all(),
            "" => {}
            other => return Err(CliError::Config(format!("unknown frozen parameter group {other:?}"))),
        }
    }
    Ok(f)
}

/// Command-line overrides for the EM settings.
#[derive(Debug, Default, Clone)]
pub struct EmOverrides {
    pub budget: Option<Budget>,
    pub filter_budget: Option<Budget>,
    pub bif_budget: Option<Budget>,
    pub smoother_budget: Option<Budget>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub patience: Option<usize>,
    pub stage_transition: Option<bool>,
    pub transition_delta: Option<f64>,
    pub transition_patience: Option<usize>,
    pub transition_floor: Option<f64>,
    pub freeze: Option<Vec<String>>,
}

/// Resolved settings for `identify`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub em: EmConfig,
    pub convention: Option<Convention>,
}

fn required(value: Option<PathBuf>, what: &str, flag: &str) -> CliResult<PathBuf> {
    value.ok_or_else(|| CliError::Config(format!("no {what} given (use {flag} or set it in the config file)")))
}

impl RunConfig {
    pub fn resolve(
        file: FileConfig,
        model: Option<PathBuf>,
        dataset: Option<PathBuf>,
        output_dir: Option<PathBuf>,
        convention: Option<Convention>,
        o: &EmOverrides,
    ) -> CliResult<Self> {
        let d = EmConfig::default();
        let b = &file.budgets;
        let e = &file.em;
        let pick = |flag: Option<Budget>, entry: Option<Budget>, default: usize| flag.or(o.budget).or(entry).map_or(default, |b| b.0);
        let freeze = match o.freeze.as_ref().or(e.freeze.as_ref()) {
            Some(names) => parse_freeze(names)?,
            None => d.freeze,
        };
        let em = EmConfig {
            filter_budget: pick(o.filter_budget, b.filter, d.filter_budget),
            bif_budget: pick(o.bif_budget, b.bif, d.bif_budget),
            smoother_budget: pick(o.smoother_budget, b.smoother, d.smoother_budget),
            max_iter: o.max_iter.or(e.max_iter).unwrap_or(d.max_iter),
            tol: o.tol.or(e.tol).unwrap_or(d.tol),
            patience: o.patience.or(e.patience).unwrap_or(d.patience),
            stage_transition: o.stage_transition.or(e.stage_transition).unwrap_or(d.stage_transition),
            transition_delta: o.transition_delta.or(e.transition_delta).unwrap_or(d.transition_delta),
            transition_patience: o.transition_patience.or(e.transition_patience).unwrap_or(d.transition_patience),
            freeze,
            transition_floor: o.transition_floor.or(e.transition_floor).unwrap_or(d.transition_floor),
        };
        if !(em.tol > 0.0) {
            return Err(CliError::Config(format!("tol must be positive, got {}", em.tol)));
        }
        if em.max_iter == 0 {
            return Err(CliError::Config("max_iter must be at least 1".into()));
        }
        if !(em.transition_delta >= 0.0) || !(0.0..1.0).contains(&em.transition_floor) {
            return Err(CliError::Config("transition_delta must be non-negative and transition_floor in [0, 1)".into()));
        }
        Ok(RunConfig {
            model: required(model.or(file.paths.model), "model file", "--model")?,
            dataset: required(dataset.or(file.paths.dataset), "dataset", "--data")?,
            output_dir: required(output_dir.or(file.paths.output_dir), "output directory", "--out-dir")?,
            em,
            convention: convention.or(file.convention),
        })
    }
}
