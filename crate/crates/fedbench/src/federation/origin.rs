//! Mock origin: serves corpus objects from disk or synthetically, with
//! bearer auth, latency injection, per-connection bandwidth pacing, fault
//! hooks, and a pull-mode third-party-copy endpoint.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::net::TcpStream;
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::datagen::{self, CorpusManifest};
use crate::federation::token::{self, RejectReason};
use crate::federation::{
    parse_range, respond_metrics, spawn_server, ByteRange, FederationError, Metrics,
    RequestHandler, ServerHandle, ServerLog,
};
use crate::httpio::{self, Deadline, HttpClient, Request, Url};

/// Where object bytes come from.
#[derive(Debug, Clone)]
pub enum ServeMode {
    /// Serve files materialized under this directory.
    Files { root: PathBuf },
    /// Generate bodies on the fly from the manifest's seeds.
    Synthetic { manifest: CorpusManifest },
}

#[derive(Debug, Clone)]
pub enum OriginAuth {
    None,
    Bearer { key: [u8; token::KEY_BYTES] },
}

#[derive(Debug, Clone)]
pub struct OriginConfig {
    pub listen_addr: String,
    pub mode: ServeMode,
    pub auth: OriginAuth,
    /// Applied once per data request before the first body byte.
    pub injected_latency_ms: u64,
    /// Extra uniform random latency in [0, jitter] ms per request, emulating
    /// WAN RTT variation on loopback.
    pub latency_jitter_ms: u64,
    /// Per-request write pacing; `None` means unpaced.
    pub bandwidth_cap_bytes_per_sec: Option<u64>,
    /// Fault hook: XOR one byte at this absolute stream offset.
    pub flip_byte_at: Option<u64>,
    /// Fault hook: these object names always 404.
    pub force_404: HashSet<String>,
    pub worker_count: usize,
    pub log_path: Option<PathBuf>,
}

impl OriginConfig {
    pub fn new(mode: ServeMode) -> Self {
        OriginConfig {
            listen_addr: "127.0.0.1:0".to_string(),
            mode,
            auth: OriginAuth::None,
            injected_latency_ms: 0,
            latency_jitter_ms: 0,
            bandwidth_cap_bytes_per_sec: None,
            flip_byte_at: None,
            force_404: HashSet::new(),
            worker_count: 8,
            log_path: None,
        }
    }
}

pub fn start_origin(config: OriginConfig) -> Result<ServerHandle, FederationError> {
    let log = ServerLog::open(config.log_path.as_ref()).map_err(FederationError::Io)?;
    let handler = Arc::new(OriginHandler {
        config: config.clone(),
        tpc_received: Mutex::new(HashMap::new()),
        metrics: Metrics::default(),
        log,
    });
    spawn_server(&config.listen_addr, config.worker_count, handler)
}

struct OriginHandler {
    config: OriginConfig,
    /// Objects received via third-party copy, served alongside the corpus.
    tpc_received: Mutex<HashMap<String, Arc<Vec<u8>>>>,
    metrics: Metrics,
    log: ServerLog,
}

enum ObjectSource {
    File { file: File, len: u64 },
    Synthetic { seed: u64, len: u64 },
    Memory(Arc<Vec<u8>>),
}

impl ObjectSource {
    fn len(&self) -> u64 {
        match self {
            ObjectSource::File { len, .. } => *len,
            ObjectSource::Synthetic { len, .. } => *len,
            ObjectSource::Memory(bytes) => bytes.len() as u64,
        }
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
        match self {
            ObjectSource::File { file, .. } => file.read_exact_at(buf, offset),
            ObjectSource::Synthetic { seed, .. } => {
                datagen::fill_range(*seed, offset, buf);
                Ok(())
            }
            ObjectSource::Memory(bytes) => {
                let start = offset as usize;
                buf.copy_from_slice(&bytes[start..start + buf.len()]);
                Ok(())
            }
        }
    }
}

impl RequestHandler for OriginHandler {
    fn handle(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()> {
        match (request.method.as_str(), request.path.as_str()) {
            ("GET", "/metrics") => respond_metrics(&self.metrics, stream),
            (method, path) if path.starts_with("/data/") => match method {
                "GET" | "HEAD" => self.handle_data(request, stream),
                _ => httpio::write_simple(stream, 405, b"method not allowed", &[]),
            },
            ("POST", path) if path.starts_with("/tpc/") => self.handle_tpc(request, stream),
            (_, path) if path.starts_with("/tpc/") => {
                httpio::write_simple(stream, 405, b"method not allowed", &[])
            }
            _ => httpio::write_simple(stream, 404, b"not found", &[]),
        }
    }

    fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    fn log(&self) -> &ServerLog {
        &self.log
    }
}

impl OriginHandler {
    fn check_auth(&self, request: &Request) -> Result<(), RejectReason> {
        let OriginAuth::Bearer { key } = &self.config.auth else {
            return Ok(());
        };
        let header = request.header("authorization").ok_or(RejectReason::BadFormat)?;
        let token = header.strip_prefix("Bearer ").ok_or(RejectReason::BadFormat)?;
        token::verify_token(token, key, &request.path, token::now_unix()).map(|_| ())
    }

    fn resolve(&self, name: &str) -> Option<ObjectSource> {
        if name.is_empty() || name.contains('/') || name.contains("..") {
            return None;
        }
        if let Some(bytes) = self.tpc_received.lock().unwrap().get(name) {
            return Some(ObjectSource::Memory(Arc::clone(bytes)));
        }
        match &self.config.mode {
            ServeMode::Files { root } => {
                let path = root.join(name);
                let file = File::open(path).ok()?;
                let len = file.metadata().ok()?.len();
                Some(ObjectSource::File { file, len })
            }
            ServeMode::Synthetic { manifest } => {
                let entry = manifest.lookup(name)?;
                Some(ObjectSource::Synthetic { seed: entry.seed, len: entry.size_bytes })
            }
        }
    }

    fn handle_data(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()> {
        if let Err(reason) = self.check_auth(request) {
            self.metrics.record_auth_reject(reason.as_str());
            self.log.info(&format!("403 {} reject={}", request.path, reason.as_str()));
            return httpio::write_simple(
                stream,
                403,
                b"forbidden",
                &[("X-Auth-Reject", reason.as_str())],
            );
        }
        let name = request.path.trim_start_matches("/data/");
        if self.config.force_404.contains(name) {
            self.log.info(&format!("404 {} (forced)", request.path));
            return httpio::write_simple(stream, 404, b"not found", &[]);
        }
        let Some(source) = self.resolve(name) else {
            self.log.info(&format!("404 {}", request.path));
            return httpio::write_simple(stream, 404, b"not found", &[]);
        };
        let total = source.len();
        let range = match parse_range(request.header("range"), total) {
            Ok(range) => range,
            Err(()) => {
                return httpio::write_simple(
                    stream,
                    416,
                    b"range not satisfiable",
                    &[("Content-Range", &format!("bytes */{total}"))],
                )
            }
        };

        let mut latency_ms = self.config.injected_latency_ms;
        if self.config.latency_jitter_ms > 0 {
            latency_ms += rand::Rng::gen_range(&mut rand::thread_rng(), 0..=self.config.latency_jitter_ms);
        }
        if latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(latency_ms));
        }

        let (status, window) = match range {
            None => (200u16, ByteRange { start: 0, end: total }),
            Some(r) => (206, r),
        };
        let body_len = window.end - window.start;
        let content_range = format!("bytes {}-{}/{}", window.start, window.end.max(1) - 1, total);
        let mut headers: Vec<(&str, &str)> =
            vec![("Accept-Ranges", "bytes"), ("Content-Type", "application/octet-stream")];
        if status == 206 {
            headers.push(("Content-Range", &content_range));
        }
        self.metrics.record_upstream_fetch(name);
        self.log.info(&format!("{status} {} bytes={body_len}", request.path));
        httpio::write_head(stream, status, body_len, &headers)?;
        if request.method == "HEAD" {
            return Ok(());
        }
        self.write_body(stream, &source, window)
    }

    /// Stream `window` to the client, pacing to the configured cap and
    /// applying the byte-flip fault if its offset falls inside the window.
    fn write_body(
        &self,
        stream: &mut TcpStream,
        source: &ObjectSource,
        window: ByteRange,
    ) -> std::io::Result<()> {
        let mut buf = vec![0u8; datagen::CHUNK_BYTES];
        let mut offset = window.start;
        let start_time = Instant::now();
        let mut sent = 0u64;
        stream.set_write_timeout(Some(Duration::from_secs(120)))?;
        while offset < window.end {
            let take = buf.len().min((window.end - offset) as usize);
            source.read_at(offset, &mut buf[..take])?;
            if let Some(flip) = self.config.flip_byte_at {
                if flip >= offset && flip < offset + take as u64 {
                    buf[(flip - offset) as usize] ^= 0xFF;
                }
            }
            std::io::Write::write_all(stream, &buf[..take])?;
            offset += take as u64;
            sent += take as u64;
            if let Some(cap) = self.config.bandwidth_cap_bytes_per_sec {
                let target = Duration::from_secs_f64(sent as f64 / cap as f64);
                let elapsed = start_time.elapsed();
                if target > elapsed {
                    std::thread::sleep(target - elapsed);
                }
            }
        }
        std::io::Write::flush(stream)
    }

    fn handle_tpc(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()> {
        let name = request.path.trim_start_matches("/tpc/").to_string();
        if name.is_empty() || name.contains('/') {
            return httpio::write_simple(stream, 400, b"bad object name", &[]);
        }
        let Some(source_url) = request.header("source") else {
            return httpio::write_simple(stream, 400, b"missing Source header", &[]);
        };
        let url = match Url::parse(source_url) {
            Ok(url) => url,
            Err(_) => return httpio::write_simple(stream, 400, b"bad Source URL", &[]),
        };

        // Pull the object from the source; the requesting client never
        // carries body bytes.
        let mut client = HttpClient::new();
        let mut body = Vec::new();
        let mut hasher = Sha256::new();
        let deadline = Deadline::after(Duration::from_secs(300));
        let result = client.get_streamed(&url, None, &[], deadline, &mut |chunk| {
            hasher.update(chunk);
            body.extend_from_slice(chunk);
        });
        match result {
            Ok((head, _, _)) if head.status == 200 => {
                let digest = hex::encode(hasher.finalize());
                self.tpc_received.lock().unwrap().insert(name.clone(), Arc::new(body));
                self.log.info(&format!("tpc stored {name} from {source_url}"));
                let response = serde_json::json!({ "status": "ok", "sha256_hex": digest });
                httpio::write_simple(
                    stream,
                    200,
                    response.to_string().as_bytes(),
                    &[("Content-Type", "application/json")],
                )
            }
            Ok((head, _, _)) if head.status == 404 => {
                self.log.info(&format!("tpc source missing: {source_url}"));
                httpio::write_simple(stream, 424, b"source object missing", &[])
            }
            Ok((head, _, _)) => {
                self.log.info(&format!("tpc source status {}: {source_url}", head.status));
                httpio::write_simple(stream, 502, b"source error", &[])
            }
            Err(e) => {
                self.log.info(&format!("tpc source unreachable {source_url}: {e}"));
                httpio::write_simple(stream, 502, b"source unreachable", &[])
            }
        }
    }
}
