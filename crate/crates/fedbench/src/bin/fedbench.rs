//! `fedbench` — benchmark harness CLI: corpus generation, RTT probes, the
//! embedded mock federation, campaign runs, soaks, and reporting.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fedbench::datagen::{self, CorpusManifest};
use fedbench::engine::{TokenSource, WindowOptions};
use fedbench::federation::cache::{start_cache, CacheConfig};
use fedbench::federation::origin::{start_origin, OriginAuth, OriginConfig, ServeMode};
use fedbench::federation::redirector::{start_redirector, RedirectorConfig};
use fedbench::federation::token;
use fedbench::matrix::{self, CampaignSpec, SoakSpec};
use fedbench::model::{classify_size, EndpointDescriptor, EndpointRole, SizeClass};
use fedbench::probes;
use fedbench::report::{self, ReportFormat};

const TOKEN_KEY_ENV: &str = "FEDBENCH_TOKEN_KEY";

#[derive(Parser)]
#[command(name = "fedbench", about = "HTTP data-federation transfer benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic payload corpus and its manifest.
    Corpus(CorpusArgs),
    /// Measure TCP-connect RTT to an endpoint.
    Probe(ProbeArgs),
    /// Run a mock federation server in the foreground.
    Serve(ServeArgs),
    /// Expand and execute a benchmark campaign.
    Run(RunArgs),
    /// Run a sustained-load soak test.
    Soak(SoakArgs),
    /// Re-emit campaign results in another format.
    Report(ReportArgs),
    /// Pairwise client significance comparison over campaign results.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// desk = {1KB, 1MB, 100MB}; full = all six classes.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Explicit size labels; overrides --profile.
    #[arg(long = "size")]
    sizes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    host: String,
    #[arg(long)]
    port: u16,
    #[arg(long, default_value_t = 10)]
    count: u32,
    #[arg(long, default_value_t = 2000)]
    timeout_ms: u64,
    #[arg(long)]
    distance_km: Option<f64>,
}

#[derive(Args)]
struct ServeArgs {
    /// origin, cache, or redirector.
    role: String,
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus directory with manifest.json; omit for synthetic expectations.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct SoakArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Campaign output directory (reads summary_<id>.json files).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Campaign output directory.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

/// JSON config for `serve origin`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OriginFileConfig {
    #[serde(default = "default_listen")]
    listen_addr: String,
    /// Serve materialized files from this directory...
    storage_root: Option<PathBuf>,
    /// ...or synthesize bodies from this manifest.
    manifest: Option<PathBuf>,
    #[serde(default)]
    auth: String,
    #[serde(default)]
    injected_latency_ms: u64,
    #[serde(default)]
    latency_jitter_ms: u64,
    #[serde(default)]
    bandwidth_cap_bytes_per_sec: Option<u64>,
    #[serde(default)]
    flip_byte_at: Option<u64>,
    #[serde(default)]
    force_404: Vec<String>,
    #[serde(default = "default_workers")]
    worker_count: usize,
    #[serde(default)]
    log_path: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheFileConfig {
    #[serde(default = "default_listen")]
    listen_addr: String,
    upstream: String,
    capacity_bytes: u64,
    store_dir: PathBuf,
    #[serde(default = "default_workers")]
    worker_count: usize,
    #[serde(default)]
    log_path: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RedirectorFileConfig {
    #[serde(default = "default_listen")]
    listen_addr: String,
    origins: Vec<String>,
    #[serde(default = "default_workers")]
    worker_count: usize,
    #[serde(default)]
    log_path: Option<PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:0".to_string()
}

fn default_workers() -> usize {
    8
}

/// Exit 1 for validation problems, 2 for runtime/endpoint failures.
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedbench: {}", e.message());
            e.code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Corpus(args) => cmd_corpus(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Serve(args) => cmd_serve(args),
        Command::Run(args) => cmd_run(args),
        Command::Soak(args) => cmd_soak(args),
        Command::Report(args) => cmd_report(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn profile_sizes(profile: &str, explicit: &[String]) -> Result<Vec<SizeClass>, CliError> {
    if !explicit.is_empty() {
        return explicit.iter().map(|s| classify_size(s).map_err(validation)).collect();
    }
    match profile {
        "desk" => Ok(SizeClass::DESK.to_vec()),
        "full" => Ok(SizeClass::ALL.to_vec()),
        other => Err(CliError::Validation(format!("unknown profile `{other}` (desk|full)"))),
    }
}

fn cmd_corpus(args: CorpusArgs) -> Result<(), CliError> {
    let profile = profile_sizes(&args.profile, &args.sizes)?;
    let manifest =
        datagen::materialize_corpus(&profile, &args.out, args.seed).map_err(runtime)?;
    for entry in &manifest.entries {
        println!("{}  {:>14} B  sha256={}", entry.object_name, entry.size_bytes, entry.sha256_hex);
    }
    println!("manifest: {}", args.out.join("manifest.json").display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Validation("--count must be >= 1".into()));
    }
    let stats = probes::measure_rtt(&args.host, args.port, args.count, args.timeout_ms)
        .map_err(runtime)?;
    println!("{}", probes::format_rtt(&stats, args.distance_km));
    if stats.lost > 0 {
        println!("lost: {}", stats.lost);
    }
    Ok(())
}

fn load_token_key() -> Result<[u8; token::KEY_BYTES], CliError> {
    let hex_key = std::env::var(TOKEN_KEY_ENV)
        .map_err(|_| CliError::Validation(format!("{TOKEN_KEY_ENV} not set (64 hex chars)")))?;
    let bytes = hex::decode(hex_key.trim())
        .map_err(|e| CliError::Validation(format!("{TOKEN_KEY_ENV}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| CliError::Validation(format!("{TOKEN_KEY_ENV} must decode to 32 bytes")))
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let handle = match args.role.as_str() {
        "origin" => {
            let cfg: OriginFileConfig = report::load_config(&args.config).map_err(validation)?;
            let mode = match (&cfg.storage_root, &cfg.manifest) {
                (Some(root), None) => ServeMode::Files { root: root.clone() },
                (None, Some(path)) => ServeMode::Synthetic {
                    manifest: CorpusManifest::load(path).map_err(validation)?,
                },
                _ => {
                    return Err(CliError::Validation(
                        "origin config needs exactly one of storage_root or manifest".into(),
                    ))
                }
            };
            let auth = match cfg.auth.as_str() {
                "" | "none" => OriginAuth::None,
                "bearer" => OriginAuth::Bearer { key: load_token_key()? },
                other => {
                    return Err(CliError::Validation(format!("unknown auth mode `{other}`")))
                }
            };
            start_origin(OriginConfig {
                listen_addr: cfg.listen_addr,
                mode,
                auth,
                injected_latency_ms: cfg.injected_latency_ms,
                latency_jitter_ms: cfg.latency_jitter_ms,
                bandwidth_cap_bytes_per_sec: cfg.bandwidth_cap_bytes_per_sec,
                flip_byte_at: cfg.flip_byte_at,
                force_404: cfg.force_404.into_iter().collect(),
                worker_count: cfg.worker_count,
                log_path: cfg.log_path,
            })
            .map_err(runtime)?
        }
        "cache" => {
            let cfg: CacheFileConfig = report::load_config(&args.config).map_err(validation)?;
            start_cache(CacheConfig {
                listen_addr: cfg.listen_addr,
                upstream: cfg.upstream,
                capacity_bytes: cfg.capacity_bytes,
                store_dir: cfg.store_dir,
                worker_count: cfg.worker_count,
                log_path: cfg.log_path,
            })
            .map_err(runtime)?
        }
        "redirector" => {
            let cfg: RedirectorFileConfig =
                report::load_config(&args.config).map_err(validation)?;
            start_redirector(RedirectorConfig {
                listen_addr: cfg.listen_addr,
                origins: cfg.origins,
                worker_count: cfg.worker_count,
                log_path: cfg.log_path,
            })
            .map_err(runtime)?
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown serve role `{other}` (origin|cache|redirector)"
            )))
        }
    };
    println!("listening on {}", handle.base_url());
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn window_options_for(endpoints: &[EndpointDescriptor]) -> Result<WindowOptions, CliError> {
    let needs_token =
        endpoints.iter().any(|e| matches!(e.auth, fedbench::model::AuthMode::Bearer));
    let token_source = if needs_token {
        TokenSource::PerRequest {
            key: load_token_key()?,
            path_prefix: "/data/".to_string(),
            ttl_seconds: 3600,
        }
    } else {
        TokenSource::None
    };
    Ok(WindowOptions { token_source, scratch_dir: None })
}

fn load_corpus(dir: Option<&PathBuf>, sizes: &[SizeClass], seed: u64) -> Result<CorpusManifest, CliError> {
    match dir {
        Some(dir) => CorpusManifest::load(&dir.join("manifest.json")).map_err(validation),
        None => Ok(CorpusManifest::synthetic(sizes, seed)),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let spec: CampaignSpec = report::load_config(&args.config).map_err(validation)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| CliError::Validation("no output directory (--out or output_dir)".into()))?;
    let scenarios = matrix::expand_matrix(&spec).map_err(validation)?;
    let sizes: Vec<SizeClass> = {
        let mut sizes: Vec<SizeClass> = scenarios.iter().map(|s| s.size).collect();
        sizes.sort();
        sizes.dedup();
        sizes
    };
    let corpus = load_corpus(args.corpus.as_ref(), &sizes, spec.seed.unwrap_or(0))?;
    let options = window_options_for(&spec.endpoints)?;

    println!("campaign: {} scenarios -> {}", scenarios.len(), out_dir.display());
    let summaries =
        matrix::run_campaign(&scenarios, &corpus, &out_dir, &options).map_err(runtime)?;
    for summary in &summaries {
        // Per-scenario summaries feed `report` and `compare`.
        let path = out_dir.join(format!("summary_{}.json", summary.scenario.scenario_id));
        std::fs::write(&path, serde_json::to_string_pretty(summary).unwrap())
            .map_err(runtime)?;
        println!(
            "{} {} {}x{} -> {:.3} MB/s ({} ok, {} failed)",
            summary.scenario.scenario_id,
            summary.scenario.client,
            summary.scenario.size.label(),
            summary.scenario.streams,
            summary.rate_bytes_per_sec / 1e6,
            summary.completed,
            summary.failed
        );
    }
    println!("summary: {}", out_dir.join(matrix::CAMPAIGN_SUMMARY_FILE).display());
    Ok(())
}

fn cmd_soak(args: SoakArgs) -> Result<(), CliError> {
    let spec: SoakSpec = report::load_config(&args.config).map_err(validation)?;
    let endpoint = EndpointDescriptor::new(EndpointRole::Origin, args.endpoint.clone());
    endpoint.validate().map_err(validation)?;
    let sizes: Vec<SizeClass> = if spec.sizes.is_empty() {
        SizeClass::DESK.to_vec()
    } else {
        spec.sizes
            .iter()
            .map(|s| classify_size(s).map_err(validation))
            .collect::<Result<_, _>>()?
    };
    let corpus = load_corpus(args.corpus.as_ref(), &sizes, args.seed)?;
    let report_out = matrix::run_soak(&spec, &endpoint, &corpus, &WindowOptions::default())
        .map_err(runtime)?;
    let json = serde_json::to_string_pretty(&report_out).unwrap();
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out).map_err(runtime)?;
        std::fs::write(out.join("soak_report.json"), &json).map_err(runtime)?;
    }
    println!("{json}");
    let total_errors: u64 = report_out.error_counts.values().sum();
    if total_errors > 0 || report_out.log_scan.total_matches() > 0 {
        return Err(CliError::Runtime(format!(
            "soak found {total_errors} transfer errors, {} log matches",
            report_out.log_scan.total_matches()
        )));
    }
    Ok(())
}

fn load_summaries(dir: &PathBuf) -> Result<Vec<fedbench::model::WindowSummary>, CliError> {
    let mut summaries = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(runtime)?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("summary_") && name.ends_with(".json") {
            let content = std::fs::read_to_string(entry.path()).map_err(runtime)?;
            summaries.push(serde_json::from_str(&content).map_err(validation)?);
        }
    }
    if summaries.is_empty() {
        return Err(CliError::Validation(format!(
            "no summary_<id>.json files under {}",
            dir.display()
        )));
    }
    summaries.sort_by(|a: &fedbench::model::WindowSummary, b: &fedbench::model::WindowSummary| {
        a.scenario.scenario_id.cmp(&b.scenario.scenario_id)
    });
    Ok(summaries)
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let format = ReportFormat::parse(&args.format).map_err(validation)?;
    let summaries = load_summaries(&args.input)?;
    let path = report::emit_report(&summaries, format, &args.out).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Validation("--alpha must be in (0, 1)".into()));
    }
    let summaries = load_summaries(&args.input)?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for summary in &summaries {
        groups
            .entry(summary.scenario.client.to_string())
            .or_default()
            .push(summary.rate_bytes_per_sec);
    }
    let comparisons = report::compare_clients(&groups, args.alpha).map_err(validation)?;
    let mut seen: HashSet<String> = HashSet::new();
    for comparison in comparisons {
        let line = match &comparison.result {
            Some(result) => format!(
                "{} vs {}: t={:.4} dof={:.2} p={:.4} -> {}",
                comparison.client_a,
                comparison.client_b,
                result.t,
                result.dof,
                result.p_two_sided,
                comparison.verdict
            ),
            None => format!(
                "{} vs {}: {}",
                comparison.client_a, comparison.client_b, comparison.verdict
            ),
        };
        if seen.insert(line.clone()) {
            println!("{line}");
        }
    }
    Ok(())
}
