//! Fixed-duration transfer windows: S parallel closed-loop streams fetching
//! one object back-to-back against an endpoint, via the native client or an
//! external client subprocess.

use std::collections::BTreeMap;
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::datagen::CorpusManifest;
use crate::federation::token::{self, TokenClaims};
use crate::httpio::{Deadline, HttpClient, Url};
use crate::model::{
    compute_rate, ClientKind, ScenarioSpec, TransferSample, TransferStatus, WindowSummary,
};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("endpoint {0} unreachable: {1}")]
    EndpointUnreachable(String, String),
    #[error("object {0} not in corpus manifest")]
    UnknownObject(String),
}

/// What a correct transfer must deliver.
#[derive(Debug, Clone)]
pub struct ExpectedObject {
    pub size_bytes: u64,
    pub sha256_hex: String,
}

/// How request Authorization headers are produced.
#[derive(Clone, Default)]
pub enum TokenSource {
    #[default]
    None,
    Fixed(String),
    /// A fresh unique token per request (defeats any token-level caching).
    PerRequest { key: [u8; token::KEY_BYTES], path_prefix: String, ttl_seconds: i64 },
}

impl TokenSource {
    fn next_token(&self) -> Option<String> {
        match self {
            TokenSource::None => None,
            TokenSource::Fixed(token) => Some(token.clone()),
            TokenSource::PerRequest { key, path_prefix, ttl_seconds } => {
                let claims = TokenClaims::new(path_prefix.clone(), *ttl_seconds);
                Some(token::issue_token(key, &claims).expect("future expiry"))
            }
        }
    }
}

/// External client invocations, pinned for reproducibility.
#[derive(Debug, Clone)]
pub struct ClientAdapter {
    pub name: ClientKind,
    pub argv_template: Vec<String>,
}

impl ClientAdapter {
    pub fn for_client(client: ClientKind) -> ClientAdapter {
        let argv: &[&str] = match client {
            ClientKind::Native => &[],
            ClientKind::Wget => &["wget", "-q", "-O", "{dest}", "{url}"],
            ClientKind::Curl => &["curl", "--fail", "--silent", "--output", "{dest}", "{url}"],
            ClientKind::Pelican => &["pelican", "object", "get", "{url}", "{dest}"],
        };
        let argv_template = argv.iter().map(|s| s.to_string()).collect();
        ClientAdapter { name: client, argv_template }
    }

    pub fn binary(&self) -> Option<&str> {
        self.argv_template.first().map(|s| s.as_str())
    }

    /// Fails before any timing starts if the binary is not on PATH.
    pub fn check_available(&self) -> Result<(), EngineError> {
        let Some(binary) = self.binary() else { return Ok(()) };
        let found = std::env::var_os("PATH").is_some_and(|path| {
            std::env::split_paths(&path).any(|dir| dir.join(binary).is_file())
        });
        if found {
            Ok(())
        } else {
            Err(EngineError::Config(format!("client binary `{binary}` not found on PATH")))
        }
    }

    fn argv(&self, url: &str, dest: &str) -> Vec<String> {
        self.argv_template
            .iter()
            .map(|arg| arg.replace("{url}", url).replace("{dest}", dest))
            .collect()
    }
}

/// Stall classification deadline for one request.
pub fn per_request_deadline(size_bytes: u64) -> Duration {
    let floor = Duration::from_secs(30);
    let by_size = Duration::from_secs_f64(size_bytes as f64 / 1_000_000.0);
    floor.max(by_size)
}

/// Grace allowed for requests in flight when the window deadline passes.
pub fn grace_period(window_seconds: f64) -> Duration {
    Duration::from_secs_f64((window_seconds / 10.0).min(60.0))
}

fn map_io_error(e: &std::io::Error) -> TransferStatus {
    match e.kind() {
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => TransferStatus::Timeout,
        _ => TransferStatus::ConnectError,
    }
}

/// Fetch one object with the native client, hashing incrementally; `ok` is
/// only reachable through a digest match.
pub fn fetch_once(
    client: &mut HttpClient,
    url: &Url,
    token_source: &TokenSource,
    expected: &ExpectedObject,
    scenario_id: &str,
    stream_index: u32,
    window_start: Instant,
    cutoff: Deadline,
) -> TransferSample {
    let started = Instant::now();
    let started_at = started.duration_since(window_start).as_secs_f64();
    let token = token_source.next_token();

    let mut hasher = Sha256::new();
    let mut received = 0u64;
    let result = client.get_streamed(url, token.as_deref(), &[], cutoff, &mut |chunk| {
        hasher.update(chunk);
        received += chunk.len() as u64;
    });

    let finished = Instant::now();
    let (status, bytes, hops, missing, detail) = match result {
        Ok((head, hops, body_len)) => match head.status {
            200 => {
                let digest = hex::encode(hasher.finalize());
                if body_len == expected.size_bytes && digest == expected.sha256_hex {
                    (TransferStatus::Ok, body_len, hops, false, None)
                } else {
                    (TransferStatus::IntegrityError, body_len, hops, false, None)
                }
            }
            404 => (TransferStatus::HttpError { code: 404 }, 0, hops, true, None),
            code => {
                let reject = head.header("x-auth-reject").map(|r| format!("auth reject: {r}"));
                (TransferStatus::HttpError { code }, 0, hops, false, reject)
            }
        },
        Err(e) => (map_io_error(&e), received, 0, false, Some(e.to_string())),
    };
    TransferSample {
        scenario_id: scenario_id.to_string(),
        stream_index,
        bytes,
        wall_seconds: finished.duration_since(started).as_secs_f64(),
        status,
        missing_at_origin: missing,
        detail,
        redirect_hops: hops,
        started_at,
        finished_at: finished.duration_since(window_start).as_secs_f64(),
    }
}

/// Fetch via an external client subprocess; wall time spans the subprocess
/// lifetime, bytes and digest come from the destination file.
pub fn external_client_fetch(
    adapter: &ClientAdapter,
    url: &str,
    dest: &Path,
    expected: &ExpectedObject,
    scenario_id: &str,
    stream_index: u32,
    window_start: Instant,
    cutoff: Deadline,
) -> TransferSample {
    let argv = adapter.argv(url, &dest.to_string_lossy());
    let started = Instant::now();
    let started_at = started.duration_since(window_start).as_secs_f64();

    let spawn_result = Command::new(&argv[0])
        .args(&argv[1..])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::piped())
        .spawn();

    let (status, detail) = match spawn_result {
        Err(e) => (TransferStatus::ConnectError, Some(format!("spawn: {e}"))),
        Ok(mut child) => loop {
            match child.try_wait() {
                Ok(Some(exit)) => {
                    if exit.success() {
                        break (verify_dest_file(dest, expected), None);
                    }
                    let mut stderr_excerpt = String::new();
                    if let Some(mut stderr) = child.stderr.take() {
                        let mut buf = [0u8; 200];
                        if let Ok(n) = std::io::Read::read(&mut stderr, &mut buf) {
                            stderr_excerpt = String::from_utf8_lossy(&buf[..n]).into_owned();
                        }
                    }
                    break (
                        TransferStatus::HttpError { code: 0 },
                        Some(format!("exit {exit}: {stderr_excerpt}")),
                    );
                }
                Ok(None) => {
                    if cutoff.remaining().is_none() {
                        let _ = child.kill();
                        let _ = child.wait();
                        break (TransferStatus::Timeout, None);
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => break (TransferStatus::ConnectError, Some(e.to_string())),
            }
        },
    };

    let finished = Instant::now();
    let bytes = if status.is_ok() { expected.size_bytes } else { 0 };
    let _ = std::fs::remove_file(dest);
    TransferSample {
        scenario_id: scenario_id.to_string(),
        stream_index,
        bytes,
        wall_seconds: finished.duration_since(started).as_secs_f64(),
        status,
        missing_at_origin: false,
        detail,
        redirect_hops: 0,
        started_at,
        finished_at: finished.duration_since(window_start).as_secs_f64(),
    }
}

fn verify_dest_file(dest: &Path, expected: &ExpectedObject) -> TransferStatus {
    let Ok(mut file) = std::fs::File::open(dest) else {
        return TransferStatus::IntegrityError;
    };
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        match std::io::Read::read(&mut file, &mut buf) {
            Ok(0) => break,
            Ok(n) => {
                hasher.update(&buf[..n]);
                total += n as u64;
            }
            Err(_) => return TransferStatus::IntegrityError,
        }
    }
    if total == expected.size_bytes && hex::encode(hasher.finalize()) == expected.sha256_hex {
        TransferStatus::Ok
    } else {
        TransferStatus::IntegrityError
    }
}

/// Options that tune a window run without being part of the scenario cell.
#[derive(Clone, Default)]
pub struct WindowOptions {
    pub token_source: TokenSource,
    /// Directory for external-client destination files; temp dir if unset.
    pub scratch_dir: Option<PathBuf>,
}

/// Run one fixed-duration window. Workers issue no new request after the
/// deadline; requests in flight may finish within the grace period.
pub fn run_window(
    spec: &ScenarioSpec,
    corpus: &CorpusManifest,
    options: &WindowOptions,
) -> Result<(WindowSummary, Vec<TransferSample>), EngineError> {
    let object_name = spec.size.object_name();
    let entry = corpus
        .lookup(&object_name)
        .ok_or_else(|| EngineError::UnknownObject(object_name.clone()))?;
    let expected =
        ExpectedObject { size_bytes: entry.size_bytes, sha256_hex: entry.sha256_hex.clone() };

    let base = spec.endpoint.base_url.trim_end_matches('/');
    let url_text = format!("{base}/data/{object_name}");
    let url = Url::parse(&url_text)
        .map_err(|e| EngineError::Config(format!("bad endpoint URL: {e}")))?;
    preflight(&url)?;

    let adapter = ClientAdapter::for_client(spec.client);
    adapter.check_available()?;

    let window = Duration::from_secs_f64(spec.window());
    let grace = grace_period(spec.window());
    let stall = per_request_deadline(expected.size_bytes);

    let (sample_tx, sample_rx) = mpsc::channel::<TransferSample>();
    let stop = Arc::new(AtomicBool::new(false));
    let window_start = Instant::now();
    let window_deadline = window_start + window;
    let hard_cutoff = window_deadline + grace;

    let mut workers = Vec::new();
    for stream_index in 0..spec.streams {
        let tx = sample_tx.clone();
        let url = url.clone();
        let url_text = url_text.clone();
        let expected = expected.clone();
        let scenario_id = spec.scenario_id.clone();
        let options = options.clone();
        let adapter = adapter.clone();
        let stop = Arc::clone(&stop);
        workers.push(std::thread::spawn(move || {
            let mut client = HttpClient::new();
            while Instant::now() < window_deadline && !stop.load(Ordering::Relaxed) {
                let cutoff = Deadline((Instant::now() + stall).min(hard_cutoff));
                let sample = match adapter.name {
                    ClientKind::Native => fetch_once(
                        &mut client,
                        &url,
                        &options.token_source,
                        &expected,
                        &scenario_id,
                        stream_index,
                        window_start,
                        cutoff,
                    ),
                    _ => {
                        let scratch = options
                            .scratch_dir
                            .clone()
                            .unwrap_or_else(std::env::temp_dir);
                        let dest = scratch.join(format!(
                            "fetch_{scenario_id}_{stream_index}_{}.part",
                            std::process::id()
                        ));
                        external_client_fetch(
                            &adapter,
                            &url_text,
                            &dest,
                            &expected,
                            &scenario_id,
                            stream_index,
                            window_start,
                            cutoff,
                        )
                    }
                };
                if tx.send(sample).is_err() {
                    break;
                }
            }
        }));
    }
    drop(sample_tx);

    let mut samples: Vec<TransferSample> = sample_rx.iter().collect();
    for worker in workers {
        let _ = worker.join();
    }
    samples.sort_by(|a, b| a.finished_at.partial_cmp(&b.finished_at).unwrap());

    let summary = summarize_window(spec, &samples);
    Ok((summary, samples))
}

/// Aggregate a sample log into a window summary. Also used as the
/// recomputation oracle when auditing emitted reports.
pub fn summarize_window(spec: &ScenarioSpec, samples: &[TransferSample]) -> WindowSummary {
    let completed = samples.iter().filter(|s| s.status.is_ok()).count() as u64;
    let failed = samples.len() as u64 - completed;
    let total_bytes: u64 = samples.iter().filter(|s| s.status.is_ok()).map(|s| s.bytes).sum();
    let elapsed_seconds = samples
        .iter()
        .map(|s| s.finished_at)
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let elapsed_seconds = if completed == 0 { spec.window() } else { elapsed_seconds };
    let mut per_error_counts = BTreeMap::new();
    for sample in samples.iter().filter(|s| !s.status.is_ok()) {
        *per_error_counts.entry(sample.status.key()).or_insert(0u64) += 1;
    }
    WindowSummary {
        scenario: spec.clone(),
        completed,
        failed,
        total_bytes,
        elapsed_seconds,
        rate_bytes_per_sec: compute_rate(total_bytes, elapsed_seconds).expect("elapsed > 0"),
        per_error_counts,
    }
}

fn preflight(url: &Url) -> Result<(), EngineError> {
    let addr = format!("{}:{}", url.host, url.port);
    let resolved = addr
        .to_socket_addrs()
        .map_err(|e| EngineError::EndpointUnreachable(addr.clone(), e.to_string()))?
        .next()
        .ok_or_else(|| EngineError::EndpointUnreachable(addr.clone(), "no address".into()))?;
    TcpStream::connect_timeout(&resolved, Duration::from_secs(5))
        .map(|_| ())
        .map_err(|e| EngineError::EndpointUnreachable(addr, e.to_string()))
}
