//! Round-trip time measurement and min/avg/max/sdev formatting.
//!
//! RTT is the wall time of a full TCP connection establishment, measured
//! sequentially so probes do not perturb each other. No elevated privileges
//! are needed, unlike ICMP echo.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use crate::model::RttStats;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("invalid probe parameters: {0}")]
    InvalidArgument(String),
    #[error("host {host}:{port} unreachable; {attempts} probes failed: {causes:?}")]
    Unreachable {
        host: String,
        port: u16,
        attempts: u32,
        causes: Vec<String>,
    },
}

/// Time `n_probes` sequential connect-then-close cycles against host:port.
///
/// Failed probes are excluded from the statistics and surfaced via the
/// `lost` count; if every probe fails the endpoint is reported unreachable
/// with the per-probe causes.
pub fn measure_rtt(
    host: &str,
    port: u16,
    n_probes: u32,
    timeout_ms: u64,
) -> Result<RttStats, ProbeError> {
    if n_probes == 0 {
        return Err(ProbeError::InvalidArgument("n_probes must be >= 1".into()));
    }
    if timeout_ms == 0 {
        return Err(ProbeError::InvalidArgument("timeout_ms must be >= 1".into()));
    }
    let addr = format!("{host}:{port}");
    let timeout = Duration::from_millis(timeout_ms);

    let mut samples_ms = Vec::with_capacity(n_probes as usize);
    let mut causes = Vec::new();
    for _ in 0..n_probes {
        let resolved = match addr.to_socket_addrs() {
            Ok(mut it) => it.next(),
            Err(e) => {
                causes.push(format!("resolve: {e}"));
                continue;
            }
        };
        let Some(sock_addr) = resolved else {
            causes.push("resolve: no address".to_string());
            continue;
        };
        let start = Instant::now();
        match TcpStream::connect_timeout(&sock_addr, timeout) {
            Ok(stream) => {
                let elapsed = start.elapsed();
                drop(stream);
                samples_ms.push(elapsed.as_secs_f64() * 1e3);
            }
            Err(e) => causes.push(format!("connect: {e}")),
        }
    }

    if samples_ms.is_empty() {
        return Err(ProbeError::Unreachable {
            host: host.to_string(),
            port,
            attempts: n_probes,
            causes,
        });
    }
    Ok(stats_from_samples(&samples_ms, causes.len() as u32))
}

/// Population standard deviation (ping's mdev) over successful probes.
fn stats_from_samples(samples_ms: &[f64], lost: u32) -> RttStats {
    let n = samples_ms.len() as f64;
    let avg = samples_ms.iter().sum::<f64>() / n;
    let mean_sq = samples_ms.iter().map(|s| s * s).sum::<f64>() / n;
    let sdev = (mean_sq - avg * avg).max(0.0).sqrt();
    RttStats {
        min_ms: samples_ms.iter().cloned().fold(f64::INFINITY, f64::min),
        avg_ms: avg,
        max_ms: samples_ms.iter().cloned().fold(0.0, f64::max),
        sdev_ms: sdev,
        probes: samples_ms.len() as u32,
        lost,
    }
}

/// `min/avg/max/sdev ms` with an optional comma-grouped distance suffix.
/// Exact zero distance prints as `0 km`.
pub fn format_rtt(stats: &RttStats, distance_km: Option<f64>) -> String {
    let mut out = format!(
        "{:.3}/{:.3}/{:.3}/{:.3} ms",
        stats.min_ms, stats.avg_ms, stats.max_ms, stats.sdev_ms
    );
    if let Some(km) = distance_km {
        if km == 0.0 {
            out.push_str(" 0 km");
        } else {
            out.push_str(&format!(" {} km", group_thousands(km)));
        }
    }
    out
}

/// Format with two decimals and comma-grouped integer part (2784.1 -> "2,784.10").
fn group_thousands(value: f64) -> String {
    let formatted = format!("{value:.2}");
    let (int_part, frac_part) = formatted.split_once('.').unwrap();
    let (sign, digits) = match int_part.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", int_part),
    };
    let mut grouped = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    format!("{sign}{grouped}.{frac_part}")
}
