//! Redirector: never serves bodies, answers every data request with a 307 to
//! the next origin in round-robin order.

use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::federation::{
    respond_metrics, spawn_server, FederationError, Metrics, RequestHandler, ServerHandle,
    ServerLog,
};
use crate::httpio::{self, Request};

#[derive(Debug, Clone)]
pub struct RedirectorConfig {
    pub listen_addr: String,
    /// Origin base URLs in rotation order.
    pub origins: Vec<String>,
    pub worker_count: usize,
    pub log_path: Option<PathBuf>,
}

impl RedirectorConfig {
    pub fn new(origins: Vec<String>) -> Self {
        RedirectorConfig {
            listen_addr: "127.0.0.1:0".to_string(),
            origins,
            worker_count: 8,
            log_path: None,
        }
    }
}

pub fn start_redirector(config: RedirectorConfig) -> Result<ServerHandle, FederationError> {
    let log = ServerLog::open(config.log_path.as_ref()).map_err(FederationError::Io)?;
    let handler = Arc::new(RedirectorHandler {
        origins: config.origins.iter().map(|o| o.trim_end_matches('/').to_string()).collect(),
        next: AtomicUsize::new(0),
        metrics: Metrics::default(),
        log,
    });
    spawn_server(&config.listen_addr, config.worker_count, handler)
}

struct RedirectorHandler {
    origins: Vec<String>,
    next: AtomicUsize,
    metrics: Metrics,
    log: ServerLog,
}

impl RequestHandler for RedirectorHandler {
    fn handle(&self, request: &Request, stream: &mut TcpStream) -> std::io::Result<()> {
        match (request.method.as_str(), request.path.as_str()) {
            ("GET", "/metrics") => respond_metrics(&self.metrics, stream),
            ("GET" | "HEAD", path) => {
                if self.origins.is_empty() {
                    self.log.info(&format!("503 {path} (no origins)"));
                    return httpio::write_simple(stream, 503, b"no origins configured", &[]);
                }
                let index = self.next.fetch_add(1, Ordering::Relaxed) % self.origins.len();
                let location = format!("{}{path}", self.origins[index]);
                self.log.info(&format!("307 {path} -> {location}"));
                httpio::write_simple(stream, 307, b"", &[("Location", &location)])
            }
            _ => httpio::write_simple(stream, 405, b"method not allowed", &[]),
        }
    }

    fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    fn log(&self) -> &ServerLog {
        &self.log
    }
}
