//! Embedded mock data federation: origin, pull-through cache, redirector,
//! bearer-token authorization, and pull-mode third-party copy.

pub mod cache;
pub mod origin;
pub mod redirector;
pub mod token;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;

use crate::httpio::{self, Request};

/// Idle keep-alive connections are reaped after this long.
const IDLE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid server config: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Counters exposed at `GET /metrics` on every server role.
#[derive(Default)]
pub struct Metrics {
    pub requests_total: AtomicU64,
    pub upstream_fetches: Mutex<BTreeMap<String, u64>>,
    pub evictions_total: AtomicU64,
    pub auth_rejects: Mutex<BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct MetricsSnapshot {
    pub requests_total: u64,
    pub upstream_fetches_total: BTreeMap<String, u64>,
    pub evictions_total: u64,
    pub auth_rejects_by_reason: BTreeMap<String, u64>,
}

impl Metrics {
    pub fn record_upstream_fetch(&self, name: &str) {
        *self.upstream_fetches.lock().unwrap().entry(name.to_string()).or_insert(0) += 1;
    }

    pub fn record_auth_reject(&self, reason: &str) {
        *self.auth_rejects.lock().unwrap().entry(reason.to_string()).or_insert(0) += 1;
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            requests_total: self.requests_total.load(Ordering::Relaxed),
            upstream_fetches_total: self.upstream_fetches.lock().unwrap().clone(),
            evictions_total: self.evictions_total.load(Ordering::Relaxed),
            auth_rejects_by_reason: self.auth_rejects.lock().unwrap().clone(),
        }
    }
}

/// Line-oriented server log; absent path means silent.
pub struct ServerLog {
    file: Option<Mutex<File>>,
}

impl ServerLog {
    pub fn open(path: Option<&PathBuf>) -> std::io::Result<ServerLog> {
        let file = match path {
            Some(p) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        Ok(ServerLog { file })
    }

    pub fn info(&self, line: &str) {
        self.write("INFO", line);
    }

    pub fn error(&self, line: &str) {
        self.write("ERROR", line);
    }

    fn write(&self, level: &str, line: &str) {
        if let Some(file) = &self.file {
            let mut f = file.lock().unwrap();
            let _ = writeln!(f, "{level} {line}");
        }
    }
}

/// Counting semaphore capping concurrent request handling at `worker_count`.
struct WorkerGate {
    available: Mutex<usize>,
    cv: Condvar,
}

impl WorkerGate {
    fn new(workers: usize) -> Self {
        WorkerGate { available: Mutex::new(workers.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) {
        let mut avail = self.available.lock().unwrap();
        while *avail == 0 {
            avail = self.cv.wait(avail).unwrap();
        }
        *avail -= 1;
    }

    fn release(&self) {
        *self.available.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

/// Per-request behavior of one server role.
pub trait RequestHandler: Send + Sync + 'static {
    fn handle(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()>;
    fn metrics(&self) -> &Metrics;
    fn log(&self) -> &ServerLog;
}

/// A running server; shuts down on drop.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Bind `listen_addr` and serve connections, capping concurrent request
/// handling at `worker_count`.
pub fn spawn_server(
    listen_addr: &str,
    worker_count: usize,
    handler: Arc<dyn RequestHandler>,
) -> Result<ServerHandle, FederationError> {
    let listener = TcpListener::bind(listen_addr).map_err(|source| FederationError::Bind {
        addr: listen_addr.to_string(),
        source,
    })?;
    let addr = listener.local_addr().map_err(FederationError::Io)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let gate = Arc::new(WorkerGate::new(worker_count));

    let accept_shutdown = Arc::clone(&shutdown);
    let accept_thread = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if accept_shutdown.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let handler = Arc::clone(&handler);
            let gate = Arc::clone(&gate);
            let shutdown = Arc::clone(&accept_shutdown);
            std::thread::spawn(move || serve_connection(stream, handler, gate, shutdown));
        }
    });

    Ok(ServerHandle { addr, shutdown, accept_thread: Some(accept_thread) })
}

fn serve_connection(
    stream: TcpStream,
    handler: Arc<dyn RequestHandler>,
    gate: Arc<WorkerGate>,
    shutdown: Arc<AtomicBool>,
) {
    let Ok(read_half) = stream.try_clone() else { return };
    let _ = read_half.set_read_timeout(Some(IDLE_TIMEOUT));
    let mut reader = BufReader::new(read_half);
    let mut write_half = stream;
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        let request = match httpio::read_request(&mut reader) {
            Ok(Some(request)) => request,
            Ok(None) => return,
            Err(_) => return,
        };
        if httpio::drain_body(&mut reader, &request).is_err() {
            return;
        }
        gate.acquire();
        handler.metrics().requests_total.fetch_add(1, Ordering::Relaxed);
        let result = handler.handle(&request, &mut write_half);
        gate.release();
        if let Err(e) = result {
            handler
                .log()
                .error(&format!("request {} {} failed: {e}", request.method, request.path));
            return;
        }
    }
}

/// Shared `/metrics` responder.
pub fn respond_metrics(
    metrics: &Metrics,
    stream: &mut TcpStream,
) -> std::io::Result<()> {
    let body = serde_json::to_vec(&metrics.snapshot()).expect("metrics serialize");
    httpio::write_simple(stream, 200, &body, &[("Content-Type", "application/json")])
}

/// Fetch and decode a server's `/metrics` document.
pub fn fetch_metrics(base_url: &str) -> std::io::Result<MetricsSnapshot> {
    let url = httpio::Url::parse(&format!("{}/metrics", base_url.trim_end_matches('/')))?;
    let mut client = httpio::HttpClient::new();
    let mut body = Vec::new();
    let deadline = httpio::Deadline::after(Duration::from_secs(10));
    let (head, _, _) =
        client.get_streamed(&url, None, &[], deadline, &mut |chunk| body.extend_from_slice(chunk))?;
    if head.status != 200 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::Other,
            format!("metrics returned {}", head.status),
        ));
    }
    serde_json::from_slice(&body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Result of a third-party copy request: the destination's HTTP status and,
/// on success, the digest of the stored object.
#[derive(Debug, Clone)]
pub struct TpcOutcome {
    pub status: u16,
    pub sha256_hex: Option<String>,
}

/// Ask the destination server to pull `source_url` and store it as `name`.
/// Data moves server-to-server; the client carries only the control exchange.
pub fn tpc_copy(
    client: &mut httpio::HttpClient,
    dest_base: &str,
    source_url: &str,
    name: &str,
) -> std::io::Result<TpcOutcome> {
    let url = httpio::Url::parse(&format!("{}/tpc/{name}", dest_base.trim_end_matches('/')))?;
    let deadline = httpio::Deadline::after(Duration::from_secs(300));
    let (head, body) = client.post_control(&url, &[("Source", source_url)], deadline)?;
    let sha256_hex = serde_json::from_slice::<serde_json::Value>(&body)
        .ok()
        .and_then(|v| v.get("sha256_hex").and_then(|d| d.as_str()).map(str::to_string));
    Ok(TpcOutcome { status: head.status, sha256_hex })
}

/// Parsed byte range, inclusive start, exclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRange {
    pub start: u64,
    pub end: u64,
}

/// Parse a `Range: bytes=..` header against an object of `total` bytes.
/// `Ok(None)` means no header; `Err(())` means malformed or unsatisfiable.
pub fn parse_range(header: Option<&str>, total: u64) -> Result<Option<ByteRange>, ()> {
    let Some(value) = header else { return Ok(None) };
    let spec = value.strip_prefix("bytes=").ok_or(())?;
    if spec.contains(',') {
        // Multipart ranges are out of scope.
        return Err(());
    }
    let (start_s, end_s) = spec.split_once('-').ok_or(())?;
    let range = if start_s.is_empty() {
        // Suffix form: last N bytes.
        let n: u64 = end_s.parse().map_err(|_| ())?;
        if n == 0 {
            return Err(());
        }
        ByteRange { start: total.saturating_sub(n), end: total }
    } else {
        let start: u64 = start_s.parse().map_err(|_| ())?;
        let end = if end_s.is_empty() {
            total
        } else {
            let last: u64 = end_s.parse().map_err(|_| ())?;
            if last < start {
                return Err(());
            }
            (last + 1).min(total)
        };
        if start >= total {
            return Err(());
        }
        ByteRange { start, end }
    };
    Ok(Some(range))
}
