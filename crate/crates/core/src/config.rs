//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown or repeated keys are
//! errors. [`RunConfig::to_config_string`] writes every key with defaults
//! resolved, and parsing that text yields the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{ContributorSource, Schema, SplitSpec};
use crate::dividends::{Mode, TransformSpec};
use crate::influence::{SolverConfig, DEFAULT_SAMPLE_SIZE};
use crate::model::ModelSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, String),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}`: {message}")]
    Value { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub mode: Mode,
    pub transform: Option<TransformSpec>,
}

impl Scenario {
    /// File-name friendly identifier, e.g. `per_observation_shift`.
    pub fn name(&self) -> String {
        match &self.transform {
            Some(t) => format!("{}_{}", self.mode.name(), t.name()),
            None => self.mode.name().to_string(),
        }
    }

    fn token(&self) -> String {
        match &self.transform {
            Some(t) => format!("{}:{}", self.mode.name(), t.name()),
            None => self.mode.name().to_string(),
        }
    }

    /// Key used to group disparity reports by transform.
    pub fn transform_key(&self) -> String {
        match &self.transform {
            Some(t) => t.name().to_string(),
            None => self.mode.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pool {
    /// One currency unit per contributor, so the mean dividend is 1.
    PerContributor,
    Amount(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub schema: Schema,
    pub model: ModelSpec,
    pub solver: SolverConfig,
    pub test_fraction: f64,
    pub scenarios: Vec<Scenario>,
    pub binning_quantile: f64,
    pub binning_weight: f64,
    pub pool: Pool,
    pub audit: Vec<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub sample_size: usize,
}

impl RunConfig {
    pub fn new(dataset_path: impl Into<PathBuf>, schema: Schema) -> Self {
        let binning = TransformSpec::MEDIAN_BINNING;
        RunConfig {
            dataset_path: dataset_path.into(),
            schema,
            model: ModelSpec::default(),
            solver: SolverConfig::default(),
            test_fraction: SplitSpec::default().test_fraction,
            scenarios: [
                TransformSpec::Shift,
                TransformSpec::AbsoluteValue,
                TransformSpec::Clipping,
                binning,
            ]
            .into_iter()
            .map(|t| Scenario {
                mode: Mode::PerObservation,
                transform: Some(t),
            })
            .collect(),
            binning_quantile: 0.5,
            binning_weight: 2.0,
            pool: Pool::PerContributor,
            audit: Vec::new(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            sample_size: DEFAULT_SAMPLE_SIZE,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e.to_string()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.dataset_path.is_relative() {
            cfg.dataset_path = base.join(&cfg.dataset_path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("expected `key = value`, found {line:?}"),
                });
            };
            let key = k.trim().to_string();
            if entries.iter().any(|(_, existing, _)| *existing == key) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
            entries.push((i + 1, key, v.trim().to_string()));
        }

        let get = |key: &str| entries.iter().find(|(_, k, _)| k == key).map(|(_, _, v)| v.as_str());
        let path = get("dataset.path").ok_or(ConfigError::Missing("dataset.path"))?;
        let label = get("dataset.label").ok_or(ConfigError::Missing("dataset.label"))?;
        let contributor = match get("dataset.contributor").unwrap_or("row_index") {
            "row_index" => ContributorSource::RowIndex,
            col => ContributorSource::Column(col.to_string()),
        };
        let mut cfg = RunConfig::new(path, Schema::new(label, contributor));

        for (line, key, value) in &entries {
            let bad = |message: String| ConfigError::Value {
                key: key.clone(),
                message,
            };
            match key.as_str() {
                "dataset.path" | "dataset.label" | "dataset.contributor" => {}
                "dataset.demographic" => cfg.schema.demographics = list(value),
                "dataset.drop" => cfg.schema.drop = list(value),
                "dataset.exclude_demographics" => cfg.schema.exclude_demographics = parse_bool(value).map_err(bad)?,
                "dataset.standardize" => cfg.schema.standardize = parse_bool(value).map_err(bad)?,
                "split.test_fraction" => cfg.test_fraction = parse_num(value).map_err(bad)?,
                "model.loss" => cfg.model.loss = value.parse().map_err(bad)?,
                "model.l2" => cfg.model.l2_strength = parse_num(value).map_err(bad)?,
                "model.hinge_temperature" => cfg.model.hinge_temperature = parse_num(value).map_err(bad)?,
                "model.tolerance" => cfg.model.optimizer_tolerance = parse_num(value).map_err(bad)?,
                "model.max_iterations" => cfg.model.max_iterations = parse_num(value).map_err(bad)?,
                "solver.cg_tolerance" => cfg.solver.cg_tolerance = parse_num(value).map_err(bad)?,
                "solver.cg_max_iterations" => {
                    cfg.solver.cg_max_iterations = match value.as_str() {
                        "auto" => None,
                        v => Some(parse_num(v).map_err(bad)?),
                    }
                }
                "solver.damping" => cfg.solver.damping = parse_num(value).map_err(bad)?,
                "scenarios" => {}
                "binning.quantile" => cfg.binning_quantile = parse_num(value).map_err(bad)?,
                "binning.weight" => cfg.binning_weight = parse_num(value).map_err(bad)?,
                "pool" => {
                    cfg.pool = match value.as_str() {
                        "contributors" => Pool::PerContributor,
                        v => Pool::Amount(parse_num(v).map_err(bad)?),
                    }
                }
                "audit" => cfg.audit = list(value),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "seed" => cfg.seed = parse_num(value).map_err(bad)?,
                "validate.sample_size" => cfg.sample_size = parse_num(value).map_err(bad)?,
                other => {
                    return Err(ConfigError::Syntax {
                        line: *line,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        if let Some(s) = get("scenarios") {
            cfg.scenarios = list(s)
                .iter()
                .map(|tok| cfg.parse_scenario(tok))
                .collect::<Result<_, _>>()?;
        } else {
            // Default scenarios pick up the configured binning parameters.
            let binning = cfg.binning();
            for s in &mut cfg.scenarios {
                if let Some(TransformSpec::Binning { .. }) = s.transform {
                    s.transform = Some(binning);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn binning(&self) -> TransformSpec {
        TransformSpec::Binning {
            quantile: self.binning_quantile,
            weight: self.binning_weight,
        }
    }

    fn parse_scenario(&self, token: &str) -> Result<Scenario, ConfigError> {
        let bad = |message: String| ConfigError::Value {
            key: "scenarios".into(),
            message,
        };
        let (mode, transform) = match token.split_once(':') {
            Some((m, t)) => (m, Some(t)),
            None => (token, None),
        };
        let mode: Mode = mode.parse().map_err(bad)?;
        let transform = match (mode.is_fixed(), transform) {
            (true, None) => None,
            (true, Some(_)) => return Err(bad(format!("`{token}`: fixed modes take no transform"))),
            (false, None) => return Err(bad(format!("`{token}`: mode needs a `:transform` suffix"))),
            (false, Some(t)) => Some(match t {
                "shift" => TransformSpec::Shift,
                "absolute_value" => TransformSpec::AbsoluteValue,
                "clipping" => TransformSpec::Clipping,
                "binning" => self.binning(),
                other => return Err(bad(format!("unknown transform `{other}`"))),
            }),
        };
        Ok(Scenario { mode, transform })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: String| ConfigError::Value {
            key: key.into(),
            message,
        };
        self.model.validate().map_err(|e| bad("model", e.to_string()))?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(bad("split.test_fraction", "must lie in (0, 1)".into()));
        }
        if self.solver.cg_tolerance.is_nan()
            || self.solver.cg_tolerance <= 0.0
            || self.solver.damping.is_nan()
            || self.solver.damping < 0.0
        {
            return Err(bad(
                "solver",
                "cg_tolerance must be positive and damping non-negative".into(),
            ));
        }
        if self.solver.cg_max_iterations == Some(0) {
            return Err(bad("solver.cg_max_iterations", "must be positive".into()));
        }
        self.binning().validate().map_err(|e| bad("binning", e.to_string()))?;
        if self.scenarios.is_empty() {
            return Err(bad("scenarios", "at least one scenario is required".into()));
        }
        let mut names: Vec<String> = self.scenarios.iter().map(Scenario::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.scenarios.len() {
            return Err(bad("scenarios", "scenarios must be distinct".into()));
        }
        if let Pool::Amount(p) = self.pool {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(bad("pool", format!("must be non-negative, got {p}")));
            }
        }
        if self.sample_size == 0 {
            return Err(bad("validate.sample_size", "must be positive".into()));
        }
        for a in &self.audit {
            if !self.schema.demographics.contains(a) {
                return Err(bad("audit", format!("`{a}` is not listed in dataset.demographic")));
            }
        }
        Ok(())
    }

    /// Every key, defaults included, in a form [`RunConfig::parse`] accepts.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset.path", self.dataset_path.display().to_string());
        kv("dataset.label", self.schema.label.clone());
        kv(
            "dataset.contributor",
            match &self.schema.contributor {
                ContributorSource::RowIndex => "row_index".to_string(),
                ContributorSource::Column(c) => c.clone(),
            },
        );
        kv("dataset.demographic", self.schema.demographics.join(","));
        kv("dataset.drop", self.schema.drop.join(","));
        kv(
            "dataset.exclude_demographics",
            self.schema.exclude_demographics.to_string(),
        );
        kv("dataset.standardize", self.schema.standardize.to_string());
        kv("split.test_fraction", self.test_fraction.to_string());
        kv("model.loss", self.model.loss.name().to_string());
        kv("model.l2", self.model.l2_strength.to_string());
        kv("model.hinge_temperature", self.model.hinge_temperature.to_string());
        kv("model.tolerance", self.model.optimizer_tolerance.to_string());
        kv("model.max_iterations", self.model.max_iterations.to_string());
        kv("solver.cg_tolerance", self.solver.cg_tolerance.to_string());
        kv(
            "solver.cg_max_iterations",
            self.solver
                .cg_max_iterations
                .map_or("auto".to_string(), |m| m.to_string()),
        );
        kv("solver.damping", self.solver.damping.to_string());
        kv(
            "scenarios",
            self.scenarios.iter().map(Scenario::token).collect::<Vec<_>>().join(","),
        );
        kv("binning.quantile", self.binning_quantile.to_string());
        kv("binning.weight", self.binning_weight.to_string());
        kv(
            "pool",
            match self.pool {
                Pool::PerContributor => "contributors".to_string(),
                Pool::Amount(p) => p.to_string(),
            },
        );
        kv("audit", self.audit.join(","));
        kv("output_dir", self.output_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("validate.sample_size", self.sample_size.to_string());
        s
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected a boolean, found {other:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse {value:?}: {e}"))
}
