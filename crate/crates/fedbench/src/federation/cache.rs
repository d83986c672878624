//! Pull-through cache with whole-object LRU eviction and single-flight fills.

use std::collections::HashMap;
use std::fs::File;
use std::net::TcpStream;
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::federation::{
    parse_range, respond_metrics, spawn_server, ByteRange, FederationError, Metrics,
    RequestHandler, ServerHandle, ServerLog,
};
use crate::httpio::{self, Deadline, HttpClient, Request, Url};

#[derive(Debug, Clone)]
pub struct CacheConfig {
    pub listen_addr: String,
    /// Base URL of the upstream origin.
    pub upstream: String,
    pub capacity_bytes: u64,
    pub store_dir: PathBuf,
    pub worker_count: usize,
    pub log_path: Option<PathBuf>,
}

impl CacheConfig {
    pub fn new(upstream: impl Into<String>, capacity_bytes: u64, store_dir: PathBuf) -> Self {
        CacheConfig {
            listen_addr: "127.0.0.1:0".to_string(),
            upstream: upstream.into(),
            capacity_bytes,
            store_dir,
            worker_count: 8,
            log_path: None,
        }
    }
}

pub fn start_cache(config: CacheConfig) -> Result<ServerHandle, FederationError> {
    if config.capacity_bytes == 0 {
        return Err(FederationError::Config("capacity_bytes must be positive".into()));
    }
    std::fs::create_dir_all(&config.store_dir).map_err(FederationError::Io)?;
    let log = ServerLog::open(config.log_path.as_ref()).map_err(FederationError::Io)?;
    let handler = Arc::new(CacheHandler {
        config: config.clone(),
        index: Mutex::new(CacheIndex::default()),
        fills: Mutex::new(HashMap::new()),
        metrics: Metrics::default(),
        log,
    });
    spawn_server(&config.listen_addr, config.worker_count, handler)
}

/// Admission index: recency order plus byte accounting. Entries at the back
/// are most recently used.
#[derive(Default)]
struct CacheIndex {
    recency: Vec<(String, u64)>,
    total_bytes: u64,
}

impl CacheIndex {
    fn touch(&mut self, name: &str) -> bool {
        if let Some(pos) = self.recency.iter().position(|(n, _)| n == name) {
            let entry = self.recency.remove(pos);
            self.recency.push(entry);
            true
        } else {
            false
        }
    }

    fn remove(&mut self, name: &str) -> Option<u64> {
        let pos = self.recency.iter().position(|(n, _)| n == name)?;
        let (_, size) = self.recency.remove(pos);
        self.total_bytes -= size;
        Some(size)
    }

    /// Insert as most recently used, returning the names evicted to fit
    /// `capacity`.
    fn admit(&mut self, name: String, size: u64, capacity: u64) -> Vec<String> {
        self.remove(&name);
        self.recency.push((name, size));
        self.total_bytes += size;
        let mut evicted = Vec::new();
        while self.total_bytes > capacity && self.recency.len() > 1 {
            let (victim, victim_size) = self.recency.remove(0);
            self.total_bytes -= victim_size;
            evicted.push(victim);
        }
        // An object larger than the whole cache is served but not kept.
        if self.total_bytes > capacity {
            let (victim, victim_size) = self.recency.remove(0);
            self.total_bytes -= victim_size;
            evicted.push(victim);
        }
        evicted
    }
}

/// Outcome of a single-flight fill, shared with waiting requesters.
struct FillSlot {
    state: Mutex<Option<Result<(), FillError>>>,
    cv: Condvar,
}

#[derive(Debug, Clone)]
enum FillError {
    UpstreamStatus(u16),
    Unreachable(String),
}

struct CacheHandler {
    config: CacheConfig,
    index: Mutex<CacheIndex>,
    fills: Mutex<HashMap<String, Arc<FillSlot>>>,
    metrics: Metrics,
    log: ServerLog,
}

impl RequestHandler for CacheHandler {
    fn handle(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()> {
        match (request.method.as_str(), request.path.as_str()) {
            ("GET", "/metrics") => respond_metrics(&self.metrics, stream),
            ("POST", "/admin/evict") => self.handle_admin_evict(request, stream),
            (method, path) if path.starts_with("/data/") => match method {
                "GET" | "HEAD" => self.handle_data(request, stream),
                _ => httpio::write_simple(stream, 405, b"method not allowed", &[]),
            },
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

impl CacheHandler {
    fn object_path(&self, name: &str) -> PathBuf {
        self.config.store_dir.join(name)
    }

    fn handle_data(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()> {
        let name = request.path.trim_start_matches("/data/").to_string();
        if name.is_empty() || name.contains('/') || name.contains("..") {
            return httpio::write_simple(stream, 404, b"not found", &[]);
        }
        loop {
            if self.index.lock().unwrap().touch(&name) {
                match self.serve_local(&name, request, stream) {
                    Ok(true) => return Ok(()),
                    Ok(false) => continue, // evicted between touch and open
                    Err(e) => return Err(e),
                }
            }
            match self.join_or_start_fill(&name) {
                FillOutcome::Filled => continue,
                FillOutcome::Failed(FillError::UpstreamStatus(status)) => {
                    self.log.info(&format!("{status} {} (upstream)", request.path));
                    let status = if status == 404 { 404 } else { 502 };
                    return httpio::write_simple(stream, status, b"upstream failure", &[]);
                }
                FillOutcome::Failed(FillError::Unreachable(cause)) => {
                    self.log.info(&format!("502 {} upstream unreachable: {cause}", request.path));
                    return httpio::write_simple(stream, 502, b"upstream unreachable", &[]);
                }
            }
        }
    }

    /// Serve a cached object; `Ok(false)` means the file vanished and the
    /// caller should retry as a miss.
    fn serve_local(
        &self,
        name: &str,
        request: &Request,
        stream: &mut TcpStream,
    ) -> std::io::Result<bool> {
        let Ok(file) = File::open(self.object_path(name)) else {
            return Ok(false);
        };
        let total = file.metadata()?.len();
        let range = match parse_range(request.header("range"), total) {
            Ok(range) => range,
            Err(()) => {
                httpio::write_simple(
                    stream,
                    416,
                    b"range not satisfiable",
                    &[("Content-Range", &format!("bytes */{total}"))],
                )?;
                return Ok(true);
            }
        };
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
        self.log.info(&format!("{status} /data/{name} bytes={body_len} (hit)"));
        httpio::write_head(stream, status, body_len, &headers)?;
        if request.method == "HEAD" {
            return Ok(true);
        }
        let mut buf = vec![0u8; 64 * 1024];
        let mut offset = window.start;
        stream.set_write_timeout(Some(Duration::from_secs(120)))?;
        while offset < window.end {
            let take = buf.len().min((window.end - offset) as usize);
            file.read_exact_at(&mut buf[..take], offset)?;
            std::io::Write::write_all(stream, &buf[..take])?;
            offset += take as u64;
        }
        std::io::Write::flush(stream)?;
        Ok(true)
    }

    fn join_or_start_fill(&self, name: &str) -> FillOutcome {
        let slot = {
            let mut fills = self.fills.lock().unwrap();
            match fills.get(name) {
                Some(slot) => {
                    // Another requester owns the fill; wait for it.
                    let slot = Arc::clone(slot);
                    drop(fills);
                    let mut state = slot.state.lock().unwrap();
                    while state.is_none() {
                        state = slot.cv.wait(state).unwrap();
                    }
                    return match state.as_ref().unwrap() {
                        Ok(()) => FillOutcome::Filled,
                        Err(e) => FillOutcome::Failed(e.clone()),
                    };
                }
                None => {
                    let slot = Arc::new(FillSlot { state: Mutex::new(None), cv: Condvar::new() });
                    fills.insert(name.to_string(), Arc::clone(&slot));
                    slot
                }
            }
        };

        let result = self.fill_from_upstream(name);
        {
            let mut fills = self.fills.lock().unwrap();
            fills.remove(name);
        }
        let outcome = match &result {
            Ok(()) => FillOutcome::Filled,
            Err(e) => FillOutcome::Failed(e.clone()),
        };
        let mut state = slot.state.lock().unwrap();
        *state = Some(result);
        slot.cv.notify_all();
        outcome
    }

    /// Fetch one object from the origin into the store, then admit it.
    fn fill_from_upstream(&self, name: &str) -> Result<(), FillError> {
        let upstream = self.config.upstream.trim_end_matches('/');
        let url = Url::parse(&format!("{upstream}/data/{name}"))
            .map_err(|e| FillError::Unreachable(e.to_string()))?;
        self.metrics.record_upstream_fetch(name);

        let tmp_path = self.config.store_dir.join(format!(".fill_{name}"));
        let tmp = File::create(&tmp_path).map_err(|e| FillError::Unreachable(e.to_string()))?;
        let mut writer = std::io::BufWriter::new(tmp);
        let mut write_err = None;
        let mut client = HttpClient::new();
        let deadline = Deadline::after(Duration::from_secs(600));
        let result = client.get_streamed(&url, None, &[], deadline, &mut |chunk| {
            if write_err.is_none() {
                if let Err(e) = std::io::Write::write_all(&mut writer, chunk) {
                    write_err = Some(e);
                }
            }
        });

        let finish = || -> Result<u64, FillError> {
            match result {
                Ok((head, _, body_len)) if head.status == 200 => {
                    if let Some(e) = write_err {
                        return Err(FillError::Unreachable(format!("store write: {e}")));
                    }
                    std::io::Write::flush(&mut writer)
                        .map_err(|e| FillError::Unreachable(format!("store flush: {e}")))?;
                    Ok(body_len)
                }
                Ok((head, _, _)) => Err(FillError::UpstreamStatus(head.status)),
                Err(e) if e.kind() == std::io::ErrorKind::TimedOut => {
                    Err(FillError::Unreachable(format!("upstream timeout: {e}")))
                }
                Err(e) => Err(FillError::Unreachable(e.to_string())),
            }
        };
        match finish() {
            Ok(size) => {
                std::fs::rename(&tmp_path, self.object_path(name))
                    .map_err(|e| FillError::Unreachable(format!("store rename: {e}")))?;
                let evicted = self.index.lock().unwrap().admit(
                    name.to_string(),
                    size,
                    self.config.capacity_bytes,
                );
                for victim in evicted {
                    self.metrics.evictions_total.fetch_add(1, Ordering::Relaxed);
                    self.log.info(&format!("evicted {victim} (capacity)"));
                    let _ = std::fs::remove_file(self.object_path(&victim));
                }
                self.log.info(&format!("filled {name} bytes={size}"));
                Ok(())
            }
            Err(e) => {
                let _ = std::fs::remove_file(&tmp_path);
                Err(e)
            }
        }
    }

    fn handle_admin_evict(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()> {
        let Some(name) = request.query.get("name") else {
            return httpio::write_simple(stream, 400, b"missing name parameter", &[]);
        };
        let was_present = self.index.lock().unwrap().remove(name).is_some();
        if was_present {
            self.metrics.evictions_total.fetch_add(1, Ordering::Relaxed);
            let _ = std::fs::remove_file(self.object_path(name));
            self.log.info(&format!("evicted {name} (admin)"));
        }
        let body = serde_json::json!({ "was_present": was_present });
        httpio::write_simple(
            stream,
            200,
            body.to_string().as_bytes(),
            &[("Content-Type", "application/json")],
        )
    }
}

enum FillOutcome {
    Filled,
    Failed(FillError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lru_admit_and_evict() {
        let mut index = CacheIndex::default();
        assert!(index.admit("a".into(), 10, 25).is_empty());
        assert!(index.admit("b".into(), 10, 25).is_empty());
        // c exceeds capacity: least-recently-used a goes.
        assert_eq!(index.admit("c".into(), 10, 25), vec!["a".to_string()]);
        assert_eq!(index.total_bytes, 20);
    }

    #[test]
    fn touch_refreshes_recency() {
        let mut index = CacheIndex::default();
        index.admit("a".into(), 10, 100);
        index.admit("b".into(), 10, 100);
        assert!(index.touch("a"));
        // b is now least recently used.
        assert_eq!(index.admit("c".into(), 85, 100), vec!["b".to_string()]);
    }

    #[test]
    fn oversize_object_not_kept() {
        let mut index = CacheIndex::default();
        assert_eq!(index.admit("big".into(), 200, 100), vec!["big".to_string()]);
        assert_eq!(index.total_bytes, 0);
    }
}
