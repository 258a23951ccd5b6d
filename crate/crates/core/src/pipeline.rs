//! Config-driven simulation, validation and report rendering.
//!
//! Every artifact is rendered in memory first and only then written, so a
//! failing run leaves nothing behind and a successful one is a pure function
//! of the configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, Pool, RunConfig, Scenario};
use crate::dataset::{build_contributor_index, load_dataset, split_train_test, DatasetError, ObservationTable};
use crate::dividends::{
    allocate, read_allocation_csv, to_currency, write_allocation_csv, DividendAllocation, DividendError,
};
use crate::influence::{estimate_loo_deltas, train_model, validate_influence, InfluenceError, ValuationVector};
use crate::metrics::{
    disparity_report, gini, group_medians, mean_ratio_summary, write_disparity_csv, DisparityReport, MetricsError,
    EIGHTY_PERCENT_RULE, FINLAND_GINI, US_GINI,
};
use crate::model::{mean_loss, LossFamily, ModelError};

pub const HISTOGRAM_BINS: usize = 50;
pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("valuation error: {0}")]
    Influence(#[from] InfluenceError),
    #[error("scenario `{scenario}`: {source}")]
    Dividend {
        scenario: String,
        #[source]
        source: DividendError,
    },
    #[error("scenario `{scenario}`: {source}")]
    Metrics {
        scenario: String,
        #[source]
        source: MetricsError,
    },
    #[error("report input: {0}")]
    Report(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl PipelineError {
    /// 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Model(e) => model_code(e),
            PipelineError::Influence(e) => influence_code(e),
            _ => 3,
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Spec(_) => 2,
        _ => 3,
    }
}

fn influence_code(e: &InfluenceError) -> i32 {
    match e {
        InfluenceError::Model(m) => model_code(m),
        e if e.is_numerical() => 4,
        _ => 3,
    }
}

/// File name to contents, written atomically as a set.
pub type Artifacts = BTreeMap<String, Vec<u8>>;

fn csv_bytes<F>(render: F) -> Vec<u8>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>,
{
    let mut buf = Vec::new();
    render(&mut buf).expect("writing csv to memory");
    buf
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut buf = serde_json::to_vec_pretty(value).expect("serializing report");
    buf.push(b'\n');
    buf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_start: f64,
    pub bin_end: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the last bin is closed. A constant
/// input gets unit-wide bins starting at its value.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = span / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            bin_start: lo + k as f64 * width,
            bin_end: if k + 1 == bins {
                lo + span
            } else {
                lo + (k + 1) as f64 * width
            },
            count,
        })
        .collect()
}

fn histogram_csv(values: &[f64]) -> Vec<u8> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["bin_start", "bin_end", "count"])?;
        for b in histogram(values, HISTOGRAM_BINS) {
            w.write_record([b.bin_start.to_string(), b.bin_end.to_string(), b.count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub mode: String,
    pub transform: Option<crate::dividends::TransformSpec>,
    pub pool: f64,
    pub fallback: bool,
    pub gini: f64,
    pub n_contributors: usize,
    pub mean_amount: f64,
    pub disparity: Vec<DisparityReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub allocation: DividendAllocation,
    pub report: ScenarioReport,
}

/// Allocation, currency conversion, Gini and audits for one scenario.
pub fn evaluate_scenario(
    scenario: &Scenario,
    valuation: &ValuationVector,
    train: &ObservationTable,
    pool: Pool,
    audit: &[String],
) -> Result<ScenarioResult, PipelineError> {
    let name = scenario.name();
    let index = build_contributor_index(train);
    let pool_amount = match pool {
        Pool::PerContributor => index.n_contributors() as f64,
        Pool::Amount(p) => p,
    };
    let dividend_err = |source| PipelineError::Dividend {
        scenario: name.clone(),
        source,
    };
    let metrics_err = |source| PipelineError::Metrics {
        scenario: name.clone(),
        source,
    };
    let transform = scenario.transform.unwrap_or(crate::dividends::TransformSpec::Shift);
    let allocation = allocate(valuation, &index, scenario.mode, &transform).map_err(dividend_err)?;
    let allocation = to_currency(&allocation, pool_amount).map_err(dividend_err)?;

    let fractions: Vec<f64> = allocation.fractions.values().copied().collect();
    let g = gini(&fractions).map_err(metrics_err)?;
    let disparity = audit
        .iter()
        .map(|attr| {
            let medians = group_medians(&allocation, train, attr)?;
            disparity_report(attr, &medians, EIGHTY_PERCENT_RULE)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(metrics_err)?;
    let amounts = allocation.payouts();
    let report = ScenarioReport {
        scenario: name.clone(),
        mode: scenario.mode.name().to_string(),
        transform: scenario.transform,
        pool: pool_amount,
        fallback: allocation.fallback,
        gini: g.value,
        n_contributors: allocation.n_contributors(),
        mean_amount: amounts.iter().sum::<f64>() / amounts.len() as f64,
        disparity,
    };
    Ok(ScenarioResult {
        scenario: *scenario,
        allocation,
        report,
    })
}

fn summary_csv(reports: &[ScenarioReport]) -> Vec<u8> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["scenario", "mode", "transform", "gini", "fallback"])?;
        for r in reports {
            let transform = r.transform.map(|t| t.name()).unwrap_or("");
            w.write_record([
                r.scenario.as_str(),
                r.mode.as_str(),
                transform,
                &r.gini.to_string(),
                &r.fallback.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Scenario Gini points plus the two country baselines as vertical lines.
fn gini_plot_csv(reports: &[ScenarioReport]) -> Vec<u8> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["series", "label", "x", "y"])?;
        for (i, r) in reports.iter().enumerate() {
            w.write_record(["scenario", r.scenario.as_str(), &r.gini.to_string(), &i.to_string()])?;
        }
        let top = reports.len().saturating_sub(1).to_string();
        for (label, x) in [("us_2016", US_GINI), ("finland_2016", FINLAND_GINI)] {
            for y in ["0", top.as_str()] {
                w.write_record(["baseline", label, &x.to_string(), y])?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

/// Renders every output of a simulation run without touching the disk.
pub fn simulate_artifacts(cfg: &RunConfig) -> Result<Artifacts, PipelineError> {
    cfg.validate()?;
    let table = load_dataset(&cfg.dataset_path, &cfg.schema)?;
    let (train, test) = split_train_test(&table, cfg.split_spec())?;
    let model = train_model(&cfg.model, &train)?;
    let valuation = estimate_loo_deltas(&model, &train, &test, &cfg.solver)?;
    let index = build_contributor_index(&train);

    let results = cfg
        .scenarios
        .par_iter()
        .map(|s| evaluate_scenario(s, &valuation, &train, cfg.pool, &cfg.audit))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Artifacts::new();
    out.insert(EFFECTIVE_CONFIG.into(), cfg.to_config_string().into_bytes());
    out.insert(
        "deltas.csv".into(),
        csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["position", "row_id", "contributor_id", "delta"])?;
            for (i, d) in valuation.deltas.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    train.row_ids()[i].to_string(),
                    train.contributor_ids()[i].clone(),
                    d.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        }),
    );
    out.insert("histogram_deltas.csv".into(), histogram_csv(&valuation.deltas));
    out.insert(
        "valuation.json".into(),
        json_bytes(&json!({
            "method": valuation.method,
            "model_fingerprint": valuation.model_fingerprint,
            "solver_diagnostics": valuation.diagnostics,
            "model": {
                "loss": model.spec.loss,
                "theta": model.theta,
                "converged": model.converged,
                "final_gradient_norm": model.final_gradient_norm,
                "iterations": model.iterations,
            },
            "n_train": train.len(),
            "n_test": test.len(),
            "n_contributors": index.n_contributors(),
            "cardinality": index.cardinality(),
            "test_loss": mean_loss(&model.spec, &model.theta, &test),
        })),
    );

    let mut grouped: BTreeMap<String, Vec<DisparityReport>> = BTreeMap::new();
    for r in &results {
        let name = r.scenario.name();
        let mut alloc_csv = Vec::new();
        write_allocation_csv(&r.allocation, &mut alloc_csv).expect("writing csv to memory");
        out.insert(format!("allocation_{name}.csv"), alloc_csv);
        out.insert(format!("report_{name}.json"), json_bytes(&r.report));
        out.insert(format!("histogram_{name}.csv"), histogram_csv(&r.allocation.payouts()));
        if !cfg.audit.is_empty() {
            out.insert(
                format!("disparity_{name}.csv"),
                csv_bytes(|buf| write_disparity_csv(&r.report.disparity, buf)),
            );
            grouped
                .entry(r.scenario.transform_key())
                .or_default()
                .extend(r.report.disparity.iter().cloned());
        }
    }
    let reports: Vec<ScenarioReport> = results.into_iter().map(|r| r.report).collect();
    out.insert("summary.csv".into(), summary_csv(&reports));
    out.insert("gini_plot.csv".into(), gini_plot_csv(&reports));
    if !grouped.is_empty() {
        let means = mean_ratio_summary(&grouped).map_err(|source| PipelineError::Metrics {
            scenario: "summary".into(),
            source,
        })?;
        out.insert(
            "disparity_summary.csv".into(),
            csv_bytes(|buf| {
                let mut w = csv::Writer::from_writer(buf);
                w.write_record(["transform", "mean_ratio"])?;
                for (t, m) in &means {
                    w.write_record([t.as_str(), &m.to_string()])?;
                }
                w.flush()?;
                Ok(())
            }),
        );
    }
    Ok(out)
}

/// Writes all artifacts into `dir`, removing anything already written if a
/// later write fails.
pub fn write_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<Vec<PathBuf>, PipelineError> {
    let io = |path: &Path, e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    for (name, bytes) in artifacts {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, bytes) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(io(&path, e));
        }
        written.push(path);
    }
    Ok(written)
}

pub fn run_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let artifacts = simulate_artifacts(cfg)?;
    write_artifacts(&cfg.output_dir, &artifacts)
}

pub const VALIDATION_REPORT: &str = "validation.json";

/// Influence-vs-retraining check on `min(sample_size, n_train)` points.
pub fn validate_artifacts(cfg: &RunConfig) -> Result<Artifacts, PipelineError> {
    cfg.validate()?;
    let table = load_dataset(&cfg.dataset_path, &cfg.schema)?;
    let (train, test) = split_train_test(&table, cfg.split_spec())?;
    let sample_size = cfg.sample_size.min(train.len());
    let sample_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut report = validate_influence(&cfg.model, &train, &test, sample_size, sample_seed, &cfg.solver)?;
    if cfg.model.loss == LossFamily::SmoothHinge {
        report.note = Some(
            "smooth-hinge (SVM) influence estimates are typically less accurate than logistic ones; \
             expect a lower correlation than for logistic regression"
                .into(),
        );
    }
    let mut out = Artifacts::new();
    out.insert(EFFECTIVE_CONFIG.into(), cfg.to_config_string().into_bytes());
    out.insert(VALIDATION_REPORT.into(), json_bytes(&report));
    Ok(out)
}

pub fn run_validate(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    let artifacts = validate_artifacts(cfg)?;
    write_artifacts(&cfg.output_dir, &artifacts)?;
    Ok(cfg.output_dir.join(VALIDATION_REPORT))
}

/// Re-renders `summary.csv`, `gini_plot.csv` and the per-scenario
/// histograms from the stored allocations and reports in `dir`.
pub fn run_report(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let io = |path: &Path, e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let entries = std::fs::read_dir(dir).map_err(|e| io(dir, e))?;
    let mut report_files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    report_files.sort();
    if report_files.is_empty() {
        return Err(PipelineError::Report(format!(
            "no report_*.json files in {}",
            dir.display()
        )));
    }
    let effective = dir.join(EFFECTIVE_CONFIG);
    let order: Vec<String> = match std::fs::read_to_string(&effective) {
        Ok(text) => RunConfig::parse(&text)?.scenarios.iter().map(Scenario::name).collect(),
        Err(_) => Vec::new(),
    };

    let mut reports = Vec::new();
    let mut out = Artifacts::new();
    for path in &report_files {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let mut report: ScenarioReport =
            serde_json::from_str(&text).map_err(|e| PipelineError::Report(format!("{}: {e}", path.display())))?;
        let alloc_path = dir.join(format!("allocation_{}.csv", report.scenario));
        let file = std::fs::File::open(&alloc_path).map_err(|e| io(&alloc_path, e))?;
        let rows =
            read_allocation_csv(file).map_err(|e| PipelineError::Report(format!("{}: {e}", alloc_path.display())))?;
        let fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
        report.gini = gini(&fractions)
            .map_err(|source| PipelineError::Metrics {
                scenario: report.scenario.clone(),
                source,
            })?
            .value;
        let amounts: Vec<f64> = rows.iter().map(|r| r.amount.unwrap_or(r.fraction)).collect();
        out.insert(format!("histogram_{}.csv", report.scenario), histogram_csv(&amounts));
        reports.push(report);
    }
    // Keep the configured scenario order when it is known.
    reports.sort_by_key(|r| order.iter().position(|s| *s == r.scenario).unwrap_or(usize::MAX));
    out.insert("summary.csv".into(), summary_csv(&reports));
    out.insert("gini_plot.csv".into(), gini_plot_csv(&reports));
    write_artifacts(dir, &out)
}
