//! Campaign matrices: expand a campaign spec into an ordered scenario list,
//! run scenarios strictly sequentially with resume support, and run soak
//! tests with log scanning.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::CorpusManifest;
use crate::engine::{self, WindowOptions};
use crate::model::{
    ClientKind, EndpointDescriptor, ModelError, ScenarioSpec, SizeClass, StreamPlan, WindowSummary,
};
use crate::report::{self, ReportRow};

#[derive(Debug, thiserror::Error)]
pub enum MatrixError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report error: {0}")]
    Report(String),
}

fn io_err(path: &Path, source: std::io::Error) -> MatrixError {
    MatrixError::Io { path: path.to_path_buf(), source }
}

/// Optional sweep dimensions; each one multiplies scenarios as label
/// variants appended after the base ordering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweeps {
    #[serde(default)]
    pub worker_counts: Vec<u32>,
    #[serde(default)]
    pub auth_modes: Vec<String>,
    #[serde(default)]
    pub storage_roots: Vec<String>,
    #[serde(default)]
    pub via_redirector: bool,
    #[serde(default)]
    pub tpc: bool,
}

/// One campaign: the cross product of sizes, stream counts, endpoints, and
/// clients, plus sweep label variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub sizes: Vec<String>,
    pub streams: Vec<u32>,
    #[serde(default)]
    pub n_max: Option<u32>,
    pub endpoints: Vec<EndpointDescriptor>,
    pub clients: Vec<String>,
    #[serde(default)]
    pub window_seconds: Option<f64>,
    #[serde(default)]
    pub sweeps: Option<Sweeps>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub impact: Option<u8>,
    #[serde(default)]
    pub complexity: Option<u8>,
}

/// Stable id from the cell coordinates; identical cells always get the same
/// id across runs, which is what makes campaigns resumable.
fn scenario_id(
    endpoint: &EndpointDescriptor,
    client: ClientKind,
    size: SizeClass,
    streams: u32,
    labels: &BTreeMap<String, String>,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(endpoint.base_url.as_bytes());
    hasher.update([0]);
    hasher.update(format!("{:?}", endpoint.auth).as_bytes());
    hasher.update([0]);
    hasher.update(client.name().as_bytes());
    hasher.update([0]);
    hasher.update(size.label().as_bytes());
    hasher.update([0]);
    hasher.update(streams.to_le_bytes());
    for (key, value) in labels {
        hasher.update([0]);
        hasher.update(key.as_bytes());
        hasher.update([1]);
        hasher.update(value.as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Deterministic expansion: endpoint-major, then client, then size
/// ascending, then streams ascending; sweep variants appended per cell.
pub fn expand_matrix(spec: &CampaignSpec) -> Result<Vec<ScenarioSpec>, MatrixError> {
    let mut sizes: Vec<SizeClass> = spec
        .sizes
        .iter()
        .map(|s| crate::model::classify_size(s))
        .collect::<Result<_, _>>()?;
    sizes.sort();
    sizes.dedup();
    let clients: Vec<ClientKind> = spec
        .clients
        .iter()
        .map(|c| ClientKind::parse(c))
        .collect::<Result<_, _>>()?;

    let plan = StreamPlan {
        counts: {
            let mut counts = spec.streams.clone();
            counts.sort_unstable();
            counts.dedup();
            counts
        },
        n_max: spec.n_max.unwrap_or_else(|| {
            spec.streams.iter().copied().max().unwrap_or(1).max(2 * crate::model::detected_cpus())
        }),
    };
    plan.validate()?;

    if sizes.is_empty() || clients.is_empty() || spec.endpoints.is_empty() {
        return Err(ModelError::field("campaign", "empty cross product").into());
    }
    for endpoint in &spec.endpoints {
        endpoint.validate()?;
    }

    let sweep_variants = sweep_label_variants(spec.sweeps.as_ref());
    let mut scenarios = Vec::new();
    for endpoint in &spec.endpoints {
        for &client in &clients {
            for &size in &sizes {
                for &streams in &plan.counts {
                    for variant in &sweep_variants {
                        let mut endpoint = endpoint.clone();
                        endpoint.labels.extend(variant.clone());
                        let id = scenario_id(&endpoint, client, size, streams, &endpoint.labels);
                        let scenario = ScenarioSpec {
                            scenario_id: id,
                            size,
                            streams,
                            endpoint,
                            client,
                            window_seconds: spec.window_seconds,
                            impact: spec.impact.unwrap_or(3),
                            complexity: spec.complexity.unwrap_or(3),
                            seed: spec.seed.unwrap_or(0),
                        };
                        scenarios.push(crate::model::validate_scenario(scenario)?);
                    }
                }
            }
        }
    }
    Ok(scenarios)
}

/// Cross product of sweep dimensions as label maps; the trivial sweep is a
/// single empty variant.
fn sweep_label_variants(sweeps: Option<&Sweeps>) -> Vec<BTreeMap<String, String>> {
    let mut variants = vec![BTreeMap::new()];
    let Some(sweeps) = sweeps else { return variants };

    let extend = |variants: Vec<BTreeMap<String, String>>, key: &str, values: &[String]| {
        if values.is_empty() {
            return variants;
        }
        let mut out = Vec::new();
        for variant in &variants {
            for value in values {
                let mut labels = variant.clone();
                labels.insert(key.to_string(), value.clone());
                out.push(labels);
            }
        }
        out
    };
    let worker_values: Vec<String> =
        sweeps.worker_counts.iter().map(|w| w.to_string()).collect();
    variants = extend(variants, "worker_count", &worker_values);
    variants = extend(variants, "auth_mode", &sweeps.auth_modes);
    variants = extend(variants, "storage_root", &sweeps.storage_roots);
    if sweeps.via_redirector {
        variants = extend(variants, "via_redirector", &["true".to_string()]);
    }
    if sweeps.tpc {
        variants = extend(variants, "tpc", &["true".to_string()]);
    }
    variants
}

pub const CAMPAIGN_SUMMARY_FILE: &str = "campaign_summary.csv";

pub fn sample_log_path(output_dir: &Path, scenario_id: &str) -> PathBuf {
    output_dir.join(format!("samples_{scenario_id}.jsonl"))
}

/// Scenario ids already completed in an existing summary CSV.
pub fn completed_scenario_ids(output_dir: &Path) -> HashSet<String> {
    let path = output_dir.join(CAMPAIGN_SUMMARY_FILE);
    let Ok(mut reader) = csv::Reader::from_path(&path) else {
        return HashSet::new();
    };
    reader
        .deserialize::<ReportRow>()
        .filter_map(|row| row.ok())
        .map(|row| row.scenario_id)
        .collect()
}

/// Run scenarios strictly sequentially, appending one summary row per
/// scenario as it finishes so an interrupted campaign can resume.
pub fn run_campaign(
    scenarios: &[ScenarioSpec],
    corpus: &CorpusManifest,
    output_dir: &Path,
    options: &WindowOptions,
) -> Result<Vec<WindowSummary>, MatrixError> {
    std::fs::create_dir_all(output_dir).map_err(|e| io_err(output_dir, e))?;
    // Abort before the first window if the directory is not writable.
    let probe = output_dir.join(".write_probe");
    std::fs::write(&probe, b"ok").map_err(|e| io_err(output_dir, e))?;
    let _ = std::fs::remove_file(&probe);

    let done = completed_scenario_ids(output_dir);
    let summary_path = output_dir.join(CAMPAIGN_SUMMARY_FILE);
    let write_header = !summary_path.exists();
    let summary_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&summary_path)
        .map_err(|e| io_err(&summary_path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(write_header).from_writer(summary_file);

    let mut summaries = Vec::new();
    for scenario in scenarios {
        if done.contains(&scenario.scenario_id) {
            continue;
        }
        match engine::run_window(scenario, corpus, options) {
            Ok((summary, samples)) => {
                let log_path = sample_log_path(output_dir, &scenario.scenario_id);
                write_sample_log(&log_path, &samples)?;
                writer
                    .serialize(ReportRow::from_summary(&summary))
                    .map_err(|e| MatrixError::Report(e.to_string()))?;
                writer.flush().map_err(|e| io_err(&summary_path, e))?;
                summaries.push(summary);
            }
            Err(e) => {
                // Scenario failure is recorded; the campaign continues.
                let mut row = ReportRow::failed_scenario(scenario, &e.to_string());
                row.labels = report::flatten_labels(&scenario.endpoint.labels);
                writer.serialize(&row).map_err(|e| MatrixError::Report(e.to_string()))?;
                writer.flush().map_err(|e| io_err(&summary_path, e))?;
            }
        }
    }
    Ok(summaries)
}

pub fn write_sample_log(
    path: &Path,
    samples: &[crate::model::TransferSample],
) -> Result<(), MatrixError> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    for sample in samples {
        let line = serde_json::to_string(sample).map_err(|e| MatrixError::Report(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    file.flush().map_err(|e| io_err(path, e))
}

pub fn read_sample_log(path: &Path) -> Result<Vec<crate::model::TransferSample>, MatrixError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line).map_err(|e| MatrixError::Report(e.to_string()))?);
    }
    Ok(samples)
}

/// Soak test configuration: sustained load whose success metric is error
/// absence, not throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoakSpec {
    /// The production default is 86_400 (24 h); desk runs use ~60.
    pub duration_seconds: f64,
    /// Streams per size class.
    pub concurrent_load: u32,
    #[serde(default)]
    pub sizes: Vec<String>,
    #[serde(default)]
    pub log_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoakReport {
    pub total_requests: u64,
    pub completed: u64,
    pub error_counts: BTreeMap<String, u64>,
    pub max_wall_seconds: f64,
    pub log_scan: LogScanReport,
}

/// Concurrent closed-loop load across all configured size classes for the
/// full duration. Concurrent windows are acceptable here because soak
/// measures errors, not clean rates.
pub fn run_soak(
    spec: &SoakSpec,
    endpoint: &EndpointDescriptor,
    corpus: &CorpusManifest,
    options: &WindowOptions,
) -> Result<SoakReport, MatrixError> {
    if !(spec.duration_seconds > 0.0) {
        return Err(ModelError::field("duration_seconds", "must be positive").into());
    }
    if spec.concurrent_load == 0 {
        return Err(ModelError::field("concurrent_load", "must be positive").into());
    }
    let sizes: Vec<SizeClass> = if spec.sizes.is_empty() {
        SizeClass::DESK.to_vec()
    } else {
        spec.sizes
            .iter()
            .map(|s| crate::model::classify_size(s))
            .collect::<Result<_, _>>()?
    };

    let mut handles = Vec::new();
    for &size in &sizes {
        let scenario = crate::model::validate_scenario(ScenarioSpec {
            scenario_id: format!("soak_{}", size.label()),
            size,
            streams: spec.concurrent_load,
            endpoint: endpoint.clone(),
            client: ClientKind::Native,
            window_seconds: Some(spec.duration_seconds),
            impact: 3,
            complexity: 3,
            seed: 0,
        })?;
        let corpus = corpus.clone();
        let options = options.clone();
        handles.push(std::thread::spawn(move || {
            engine::run_window(&scenario, &corpus, &options)
        }));
    }

    let mut total_requests = 0u64;
    let mut completed = 0u64;
    let mut error_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut max_wall = 0.0f64;
    for handle in handles {
        let (summary, samples) = handle
            .join()
            .map_err(|_| MatrixError::Report("soak worker panicked".into()))?
            .map_err(|e| MatrixError::Report(e.to_string()))?;
        total_requests += summary.completed + summary.failed;
        completed += summary.completed;
        for (key, count) in &summary.per_error_counts {
            *error_counts.entry(key.clone()).or_insert(0) += count;
        }
        for sample in &samples {
            max_wall = max_wall.max(sample.wall_seconds);
        }
    }

    let log_scan = scan_logs(&spec.log_paths, &default_severity_tokens());
    Ok(SoakReport { total_requests, completed, error_counts, max_wall_seconds: max_wall, log_scan })
}

pub fn default_severity_tokens() -> Vec<String> {
    ["ERROR", "FATAL", "PANIC"].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogScanReport {
    pub counts: BTreeMap<String, u64>,
    /// First and last matching line per token, truncated to 200 chars.
    pub first_occurrence: BTreeMap<String, String>,
    pub last_occurrence: BTreeMap<String, String>,
    pub unreadable_paths: Vec<String>,
}

impl LogScanReport {
    pub fn total_matches(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Line-oriented scan for severity tokens (case-sensitive).
pub fn scan_logs(paths: &[PathBuf], tokens: &[String]) -> LogScanReport {
    let mut report = LogScanReport::default();
    for token in tokens {
        report.counts.insert(token.clone(), 0);
    }
    for path in paths {
        let file = match std::fs::File::open(path) {
            Ok(file) => file,
            Err(e) => {
                report.unreadable_paths.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        let reader = std::io::BufReader::new(file);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            for token in tokens {
                if line.contains(token.as_str()) {
                    *report.counts.get_mut(token).unwrap() += 1;
                    let excerpt: String = line.chars().take(200).collect();
                    report
                        .first_occurrence
                        .entry(token.clone())
                        .or_insert_with(|| excerpt.clone());
                    report.last_occurrence.insert(token.clone(), excerpt);
                }
            }
        }
    }
    report
}
