//! Shared domain types and the throughput arithmetic behind every reported
//! number.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Errors produced by validation of domain values.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("validation failed for field `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

impl ModelError {
    pub fn field(field: &str, reason: impl Into<String>) -> Self {
        ModelError::Validation {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

/// The six benchmark file-size classes, in binary multiples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    K1,
    M1,
    M100,
    G1,
    G10,
    G100,
}

impl SizeClass {
    pub const ALL: [SizeClass; 6] = [
        SizeClass::K1,
        SizeClass::M1,
        SizeClass::M100,
        SizeClass::G1,
        SizeClass::G10,
        SizeClass::G100,
    ];

    /// Classes small enough to run on a laptop; the 1GB+ classes are opt-in.
    pub const DESK: [SizeClass; 3] = [SizeClass::K1, SizeClass::M1, SizeClass::M100];

    pub fn bytes(self) -> u64 {
        match self {
            SizeClass::K1 => 1 << 10,
            SizeClass::M1 => 1 << 20,
            SizeClass::M100 => 100 * (1 << 20),
            SizeClass::G1 => 1 << 30,
            SizeClass::G10 => 10 * (1u64 << 30),
            SizeClass::G100 => 100 * (1u64 << 30),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizeClass::K1 => "1KB",
            SizeClass::M1 => "1MB",
            SizeClass::M100 => "100MB",
            SizeClass::G1 => "1GB",
            SizeClass::G10 => "10GB",
            SizeClass::G100 => "100GB",
        }
    }

    /// Canonical object name served by the federation for this class.
    pub fn object_name(self) -> String {
        format!("obj_{}.bin", self.label())
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Case-insensitive lookup of a size class by its label.
pub fn classify_size(name: &str) -> Result<SizeClass, ModelError> {
    let upper = name.to_ascii_uppercase();
    for class in SizeClass::ALL {
        if class.label() == upper {
            return Ok(class);
        }
    }
    let valid: Vec<&str> = SizeClass::ALL.iter().map(|c| c.label()).collect();
    Err(ModelError::field(
        "size",
        format!("unknown size class `{name}`; valid labels: {}", valid.join(", ")),
    ))
}

/// Ordered list of parallel-stream counts for a campaign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub counts: Vec<u32>,
    pub n_max: u32,
}

impl StreamPlan {
    /// Default stream list; `n_max` falls back to twice the logical CPU count.
    pub fn standard(n_max: Option<u32>) -> Self {
        let n_max = n_max.unwrap_or_else(|| 2 * detected_cpus());
        let mut counts: Vec<u32> = [1u32, 8, 32, 64, 128]
            .into_iter()
            .filter(|&c| c <= n_max)
            .collect();
        if !counts.contains(&n_max) {
            counts.push(n_max);
        }
        counts.sort_unstable();
        StreamPlan { counts, n_max }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.counts.is_empty() {
            return Err(ModelError::field("counts", "stream plan must be non-empty"));
        }
        if self.n_max == 0 {
            return Err(ModelError::field("n_max", "must be positive"));
        }
        for pair in self.counts.windows(2) {
            if pair[0] >= pair[1] {
                return Err(ModelError::field(
                    "counts",
                    "stream counts must be strictly ascending without duplicates",
                ));
            }
        }
        if let Some(&first) = self.counts.first() {
            if first == 0 {
                return Err(ModelError::field("counts", "stream counts must be positive"));
            }
        }
        if let Some(&last) = self.counts.last() {
            if last > self.n_max {
                return Err(ModelError::field(
                    "counts",
                    format!("stream count {last} exceeds n_max {}", self.n_max),
                ));
            }
        }
        Ok(())
    }
}

pub fn detected_cpus() -> u32 {
    std::thread::available_parallelism()
        .map(|n| n.get() as u32)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointRole {
    Origin,
    Cache,
    Redirector,
}

impl fmt::Display for EndpointRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EndpointRole::Origin => "origin",
            EndpointRole::Cache => "cache",
            EndpointRole::Redirector => "redirector",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthMode {
    #[default]
    None,
    Bearer,
}

/// One addressable server in the federation plus its dimension labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointDescriptor {
    pub role: EndpointRole,
    pub base_url: String,
    #[serde(default)]
    pub auth: AuthMode,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl EndpointDescriptor {
    pub fn new(role: EndpointRole, base_url: impl Into<String>) -> Self {
        EndpointDescriptor {
            role,
            base_url: base_url.into(),
            auth: AuthMode::None,
            labels: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let url = &self.base_url;
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(ModelError::field(
                "base_url",
                format!("`{url}` must use scheme http or https"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Native,
    Wget,
    Curl,
    Pelican,
}

impl ClientKind {
    pub fn parse(name: &str) -> Result<Self, ModelError> {
        match name.to_ascii_lowercase().as_str() {
            "native" => Ok(ClientKind::Native),
            "wget" => Ok(ClientKind::Wget),
            "curl" => Ok(ClientKind::Curl),
            "pelican" => Ok(ClientKind::Pelican),
            other => Err(ModelError::field(
                "client",
                format!("unknown client `{other}`; valid: native, wget, curl, pelican"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClientKind::Native => "native",
            ClientKind::Wget => "wget",
            ClientKind::Curl => "curl",
            ClientKind::Pelican => "pelican",
        }
    }
}

impl fmt::Display for ClientKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Default measurement window: 15 minutes, in seconds.
pub const DEFAULT_WINDOW_SECONDS: f64 = 900.0;

/// One benchmark cell: what to transfer, from where, with which client, for
/// how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: String,
    pub size: SizeClass,
    pub streams: u32,
    pub endpoint: EndpointDescriptor,
    pub client: ClientKind,
    /// `None` means "not set"; validation fills in the 900 s default.
    pub window_seconds: Option<f64>,
    pub impact: u8,
    pub complexity: u8,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn window(&self) -> f64 {
        self.window_seconds.unwrap_or(DEFAULT_WINDOW_SECONDS)
    }
}

/// Check all scenario invariants, filling in the default window.
pub fn validate_scenario(mut spec: ScenarioSpec) -> Result<ScenarioSpec, ModelError> {
    if spec.streams == 0 {
        return Err(ModelError::field("streams", "must be positive"));
    }
    if !(1..=5).contains(&spec.impact) {
        return Err(ModelError::field(
            "impact",
            format!("{} out of range 1..=5", spec.impact),
        ));
    }
    if !(1..=5).contains(&spec.complexity) {
        return Err(ModelError::field(
            "complexity",
            format!("{} out of range 1..=5", spec.complexity),
        ));
    }
    spec.endpoint.validate()?;
    match spec.window_seconds {
        None => spec.window_seconds = Some(DEFAULT_WINDOW_SECONDS),
        Some(w) if w <= 0.0 || !w.is_finite() => {
            return Err(ModelError::field("window_seconds", "must be positive"))
        }
        Some(_) => {}
    }
    Ok(spec)
}

/// Transfer outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferStatus {
    Ok,
    HttpError { code: u16 },
    ConnectError,
    IntegrityError,
    Timeout,
}

impl TransferStatus {
    pub fn is_ok(self) -> bool {
        matches!(self, TransferStatus::Ok)
    }

    /// Stable key used in per-error count maps and CSV cells.
    pub fn key(self) -> String {
        match self {
            TransferStatus::Ok => "ok".to_string(),
            TransferStatus::HttpError { code } => format!("http_error({code})"),
            TransferStatus::ConnectError => "connect_error".to_string(),
            TransferStatus::IntegrityError => "integrity_error".to_string(),
            TransferStatus::Timeout => "timeout".to_string(),
        }
    }
}

/// One completed or failed transfer attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSample {
    pub scenario_id: String,
    pub stream_index: u32,
    pub bytes: u64,
    pub wall_seconds: f64,
    pub status: TransferStatus,
    /// Set on 404s so operators can check presence at the origin.
    #[serde(default)]
    pub missing_at_origin: bool,
    /// Failure context, e.g. a stderr excerpt from an external client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub redirect_hops: u32,
    /// Seconds since window start (monotonic clock).
    pub started_at: f64,
    pub finished_at: f64,
}

/// Aggregate of one timed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub scenario: ScenarioSpec,
    pub completed: u64,
    pub failed: u64,
    pub total_bytes: u64,
    pub elapsed_seconds: f64,
    pub rate_bytes_per_sec: f64,
    pub per_error_counts: BTreeMap<String, u64>,
}

/// Min/avg/max/sdev round-trip statistics for an endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttStats {
    pub min_ms: f64,
    pub avg_ms: f64,
    pub max_ms: f64,
    pub sdev_ms: f64,
    pub probes: u32,
    /// Probes that failed and were excluded from the statistics.
    #[serde(default)]
    pub lost: u32,
}

/// Transfer rate in bytes per second.
pub fn compute_rate(total_bytes: u64, elapsed_seconds: f64) -> Result<f64, ModelError> {
    if !(elapsed_seconds > 0.0) || !elapsed_seconds.is_finite() {
        return Err(ModelError::InvalidArgument(format!(
            "elapsed_seconds must be positive, got {elapsed_seconds}"
        )));
    }
    Ok(total_bytes as f64 / elapsed_seconds)
}

/// Decimal megabytes per second, the human-facing rate unit.
pub fn bytes_per_sec_to_mb_per_sec(rate: f64) -> f64 {
    rate / 1e6
}
