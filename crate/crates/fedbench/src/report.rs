//! Report emission (CSV, JSONL, plot-ready TSV) and client comparisons.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{bytes_per_sec_to_mb_per_sec, ModelError, ScenarioSpec, WindowSummary};
use crate::stats::{self, SampleSet, WelchResult};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serialization(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ReportError {
    ReportError::Io { path: path.to_path_buf(), source }
}

/// One row per scenario in campaign summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario_id: String,
    pub endpoint_role: String,
    pub client: String,
    pub size_label: String,
    pub streams: u32,
    pub rate_bytes_per_sec: f64,
    pub completed: u64,
    pub failed: u64,
    pub window_seconds: f64,
    /// Flattened `key=value` pairs joined with `;`.
    pub labels: String,
}

pub fn flatten_labels(labels: &BTreeMap<String, String>) -> String {
    labels
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

impl ReportRow {
    pub fn from_summary(summary: &WindowSummary) -> ReportRow {
        let scenario = &summary.scenario;
        ReportRow {
            scenario_id: scenario.scenario_id.clone(),
            endpoint_role: scenario.endpoint.role.to_string(),
            client: scenario.client.to_string(),
            size_label: scenario.size.label().to_string(),
            streams: scenario.streams,
            rate_bytes_per_sec: summary.rate_bytes_per_sec,
            completed: summary.completed,
            failed: summary.failed,
            window_seconds: summary.elapsed_seconds,
            labels: flatten_labels(&scenario.endpoint.labels),
        }
    }

    pub fn failed_scenario(scenario: &ScenarioSpec, error: &str) -> ReportRow {
        let mut labels = scenario.endpoint.labels.clone();
        labels.insert("error".to_string(), error.replace([',', '\n', ';'], " "));
        ReportRow {
            scenario_id: scenario.scenario_id.clone(),
            endpoint_role: scenario.endpoint.role.to_string(),
            client: scenario.client.to_string(),
            size_label: scenario.size.label().to_string(),
            streams: scenario.streams,
            rate_bytes_per_sec: 0.0,
            completed: 0,
            failed: 0,
            window_seconds: scenario.window(),
            labels: flatten_labels(&labels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
    PlotTsv,
}

impl ReportFormat {
    pub fn parse(name: &str) -> Result<Self, ModelError> {
        match name.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            "plot_tsv" | "tsv" => Ok(ReportFormat::PlotTsv),
            other => Err(ModelError::field(
                "format",
                format!("unknown format `{other}`; valid: csv, jsonl, plot_tsv"),
            )),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Jsonl => "report.jsonl",
            ReportFormat::PlotTsv => "report.tsv",
        }
    }
}

/// Write summaries in the requested format; returns the output path.
pub fn emit_report(
    summaries: &[WindowSummary],
    format: ReportFormat,
    out_dir: &Path,
) -> Result<PathBuf, ReportError> {
    if summaries.is_empty() {
        return Err(ModelError::field("summaries", "nothing to report").into());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let path = out_dir.join(format.file_name());
    let rows: Vec<ReportRow> = summaries.iter().map(ReportRow::from_summary).collect();
    match format {
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_path(&path).map_err(|e| {
                ReportError::Serialization(e.to_string())
            })?;
            for row in &rows {
                writer.serialize(row).map_err(|e| ReportError::Serialization(e.to_string()))?;
            }
            writer.flush().map_err(|e| io_err(&path, e))?;
        }
        ReportFormat::Jsonl => {
            let mut file = std::io::BufWriter::new(
                std::fs::File::create(&path).map_err(|e| io_err(&path, e))?,
            );
            for row in &rows {
                let line = serde_json::to_string(row)
                    .map_err(|e| ReportError::Serialization(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| io_err(&path, e))?;
            }
            file.flush().map_err(|e| io_err(&path, e))?;
        }
        ReportFormat::PlotTsv => {
            std::fs::write(&path, plot_tsv(&rows)).map_err(|e| io_err(&path, e))?;
        }
    }
    Ok(path)
}

/// One blank-line-separated block per size label, columns (streams, rate in
/// decimal MB/s), streams ascending. The shape external plotters expect for
/// size-by-streams throughput figures.
pub fn plot_tsv(rows: &[ReportRow]) -> String {
    let mut by_size: BTreeMap<(u64, String), Vec<&ReportRow>> = BTreeMap::new();
    for row in rows {
        let bytes = crate::model::classify_size(&row.size_label)
            .map(|c| c.bytes())
            .unwrap_or(u64::MAX);
        by_size.entry((bytes, row.size_label.clone())).or_default().push(row);
    }
    let mut out = String::new();
    let mut first = true;
    for ((_, size_label), mut rows) in by_size {
        if !first {
            out.push('\n');
        }
        first = false;
        rows.sort_by_key(|r| r.streams);
        out.push_str(&format!("# size={size_label}\n"));
        out.push_str("streams\trate_mb_per_sec\n");
        for row in rows {
            out.push_str(&format!(
                "{}\t{:.3}\n",
                row.streams,
                bytes_per_sec_to_mb_per_sec(row.rate_bytes_per_sec)
            ));
        }
    }
    out
}

pub fn read_report_rows_csv(path: &Path) -> Result<Vec<ReportRow>, ReportError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| ReportError::Serialization(e.to_string()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<ReportRow>, _>>()
        .map_err(|e| ReportError::Serialization(e.to_string()))
}

pub fn read_report_rows_jsonl(path: &Path) -> Result<Vec<ReportRow>, ReportError> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ReportError::Serialization(e.to_string())))
        .collect()
}

pub const NO_DIFFERENCE_VERDICT: &str = "no significant difference";
pub const SIGNIFICANT_VERDICT: &str = "significant difference";
pub const INSUFFICIENT_VERDICT: &str = "insufficient samples";

#[derive(Debug, Clone, Serialize)]
pub struct ClientComparison {
    pub client_a: String,
    pub client_b: String,
    pub result: Option<WelchResult>,
    pub verdict: String,
}

/// All pairwise Welch comparisons between per-client rate groups.
pub fn compare_clients(
    groups: &BTreeMap<String, Vec<f64>>,
    alpha: f64,
) -> Result<Vec<ClientComparison>, ModelError> {
    let clients: Vec<&String> = groups.keys().collect();
    if clients.len() < 2 {
        return Err(ModelError::field("groups", "need at least two client groups"));
    }
    let mut comparisons = Vec::new();
    for i in 0..clients.len() {
        for j in (i + 1)..clients.len() {
            let (name_a, name_b) = (clients[i], clients[j]);
            let (values_a, values_b) = (&groups[name_a], &groups[name_b]);
            if values_a.len() < 2 || values_b.len() < 2 {
                comparisons.push(ClientComparison {
                    client_a: name_a.clone(),
                    client_b: name_b.clone(),
                    result: None,
                    verdict: INSUFFICIENT_VERDICT.to_string(),
                });
                continue;
            }
            let set_a = SampleSet::new(name_a.clone(), values_a.clone())?;
            let set_b = SampleSet::new(name_b.clone(), values_b.clone())?;
            let result = stats::welch_t(&set_a, &set_b, alpha)?;
            let verdict = if result.p_two_sided >= alpha {
                NO_DIFFERENCE_VERDICT.to_string()
            } else {
                SIGNIFICANT_VERDICT.to_string()
            };
            comparisons.push(ClientComparison {
                client_a: name_a.clone(),
                client_b: name_b.clone(),
                result: Some(result),
                verdict,
            });
        }
    }
    Ok(comparisons)
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Strict JSON config loading: unknown fields are rejected so a misspelled
/// dimension cannot silently vanish from a campaign.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let content = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&content)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
}
