//! End-to-end behavior of the mock federation and the native transfer
//! engine over loopback.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fedbench::datagen::{self, CorpusManifest};
use fedbench::engine::{self, ExpectedObject, TokenSource, WindowOptions};
use fedbench::federation::cache::{start_cache, CacheConfig};
use fedbench::federation::fetch_metrics;
use fedbench::federation::origin::{start_origin, OriginAuth, OriginConfig, ServeMode};
use fedbench::federation::redirector::{start_redirector, RedirectorConfig};
use fedbench::federation::token::{self, TokenClaims};
use fedbench::federation::ServerHandle;
use fedbench::httpio::{Deadline, HttpClient, Url};
use fedbench::model::{
    ClientKind, EndpointDescriptor, EndpointRole, ScenarioSpec, SizeClass, TransferStatus,
};

const SEED: u64 = 42;

fn desk_manifest() -> CorpusManifest {
    CorpusManifest::synthetic(&[SizeClass::K1, SizeClass::M1], SEED)
}

fn synthetic_origin(manifest: CorpusManifest) -> (ServerHandle, OriginConfig) {
    let config = OriginConfig::new(ServeMode::Synthetic { manifest });
    let handle = start_origin(config.clone()).expect("origin start");
    (handle, config)
}

fn get(
    client: &mut HttpClient,
    base: &str,
    path: &str,
    bearer: Option<&str>,
    headers: &[(&str, &str)],
) -> (u16, Vec<u8>, u32) {
    let url = Url::parse(&format!("{base}{path}")).unwrap();
    let mut body = Vec::new();
    let (head, hops, _) = client
        .get_streamed(&url, bearer, headers, Deadline::after(Duration::from_secs(30)), &mut |c| {
            body.extend_from_slice(c)
        })
        .expect("request");
    (head.status, body, hops)
}

fn sha256_hex(data: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(data))
}

#[test]
fn origin_serves_full_object_with_correct_digest() {
    let manifest = desk_manifest();
    let expected = manifest.lookup("obj_1MB.bin").unwrap().sha256_hex.clone();
    let (origin, _) = synthetic_origin(manifest);
    let mut client = HttpClient::new();
    let (status, body, _) = get(&mut client, &origin.base_url(), "/data/obj_1MB.bin", None, &[]);
    assert_eq!(status, 200);
    assert_eq!(body.len(), 1 << 20);
    assert_eq!(sha256_hex(&body), expected);
}

#[test]
fn origin_range_request_matches_block_oracle() {
    let manifest = desk_manifest();
    let seed = manifest.lookup("obj_1KB.bin").unwrap().seed;
    let (origin, _) = synthetic_origin(manifest);
    let mut client = HttpClient::new();
    let (status, body, _) = get(
        &mut client,
        &origin.base_url(),
        "/data/obj_1KB.bin",
        None,
        &[("Range", "bytes=8-15")],
    );
    assert_eq!(status, 206);
    assert_eq!(body, datagen::payload_block(seed, 1).to_le_bytes());
}

#[test]
fn origin_404_and_416_and_405() {
    let (origin, _) = synthetic_origin(desk_manifest());
    let mut client = HttpClient::new();
    let (status, _, _) = get(&mut client, &origin.base_url(), "/data/nope.bin", None, &[]);
    assert_eq!(status, 404);
    let (status, _, _) = get(
        &mut client,
        &origin.base_url(),
        "/data/obj_1KB.bin",
        None,
        &[("Range", "bytes=9999-")],
    );
    assert_eq!(status, 416);
    // Unsupported method on the data path.
    let url = Url::parse(&format!("{}/tpc/x", origin.base_url())).unwrap();
    let mut body = Vec::new();
    let (head, _, _) = client
        .get_streamed(&url, None, &[], Deadline::after(Duration::from_secs(5)), &mut |c| {
            body.extend_from_slice(c)
        })
        .unwrap();
    assert_eq!(head.status, 405);
}

#[test]
fn origin_bearer_auth_flow() {
    let key = [9u8; 32];
    let manifest = desk_manifest();
    let mut config = OriginConfig::new(ServeMode::Synthetic { manifest });
    config.auth = OriginAuth::Bearer { key };
    let origin = start_origin(config).unwrap();
    let mut client = HttpClient::new();

    // Missing token -> 403 with reject reason header.
    let url = Url::parse(&format!("{}/data/obj_1KB.bin", origin.base_url())).unwrap();
    let (head, _, _) = client
        .get_streamed(&url, None, &[], Deadline::after(Duration::from_secs(5)), &mut |_| {})
        .unwrap();
    assert_eq!(head.status, 403);
    assert_eq!(head.header("x-auth-reject"), Some("bad_format"));

    // Valid token -> 200.
    let good = token::issue_token(&key, &TokenClaims::new("/data/", 60)).unwrap();
    let (status, body, _) =
        get(&mut client, &origin.base_url(), "/data/obj_1KB.bin", Some(&good), &[]);
    assert_eq!(status, 200);
    assert_eq!(body.len(), 1024);

    // Wrong path prefix -> 403 path_mismatch, visible in metrics.
    let scoped = token::issue_token(&key, &TokenClaims::new("/data/other", 60)).unwrap();
    let (status, _, _) =
        get(&mut client, &origin.base_url(), "/data/obj_1KB.bin", Some(&scoped), &[]);
    assert_eq!(status, 403);
    let metrics = fetch_metrics(&origin.base_url()).unwrap();
    assert_eq!(metrics.auth_rejects_by_reason.get("bad_format"), Some(&1));
    assert_eq!(metrics.auth_rejects_by_reason.get("path_mismatch"), Some(&1));
}

#[test]
fn origin_latency_injection_bounds_request_time() {
    let mut config = OriginConfig::new(ServeMode::Synthetic { manifest: desk_manifest() });
    config.injected_latency_ms = 80;
    let origin = start_origin(config).unwrap();
    let mut client = HttpClient::new();
    // Warm up the connection so only the request itself is timed.
    get(&mut client, &origin.base_url(), "/data/obj_1KB.bin", None, &[]);
    let start = Instant::now();
    let (status, _, _) = get(&mut client, &origin.base_url(), "/data/obj_1KB.bin", None, &[]);
    assert_eq!(status, 200);
    assert!(start.elapsed() >= Duration::from_millis(80));
}

#[test]
fn fetch_once_integrity_error_on_flipped_byte() {
    let manifest = desk_manifest();
    let entry = manifest.lookup("obj_1KB.bin").unwrap().clone();
    let mut config = OriginConfig::new(ServeMode::Synthetic { manifest });
    config.flip_byte_at = Some(100);
    let origin = start_origin(config).unwrap();

    let mut client = HttpClient::new();
    let url = Url::parse(&format!("{}/data/obj_1KB.bin", origin.base_url())).unwrap();
    let expected = ExpectedObject { size_bytes: entry.size_bytes, sha256_hex: entry.sha256_hex };
    let sample = engine::fetch_once(
        &mut client,
        &url,
        &TokenSource::None,
        &expected,
        "t",
        0,
        Instant::now(),
        Deadline::after(Duration::from_secs(10)),
    );
    assert_eq!(sample.status, TransferStatus::IntegrityError);
}

#[test]
fn fetch_once_flags_missing_at_origin() {
    let (origin, _) = synthetic_origin(desk_manifest());
    let mut client = HttpClient::new();
    let url = Url::parse(&format!("{}/data/unknown.bin", origin.base_url())).unwrap();
    let expected = ExpectedObject { size_bytes: 1, sha256_hex: "x".into() };
    let sample = engine::fetch_once(
        &mut client,
        &url,
        &TokenSource::None,
        &expected,
        "t",
        0,
        Instant::now(),
        Deadline::after(Duration::from_secs(10)),
    );
    assert_eq!(sample.status, TransferStatus::HttpError { code: 404 });
    assert!(sample.missing_at_origin);
}

fn cache_for(origin: &ServerHandle, capacity: u64) -> (ServerHandle, tempfile::TempDir) {
    let store = tempfile::tempdir().unwrap();
    let cache = start_cache(CacheConfig::new(
        origin.base_url(),
        capacity,
        store.path().to_path_buf(),
    ))
    .unwrap();
    (cache, store)
}

#[test]
fn cache_hit_avoids_second_upstream_fetch() {
    let (origin, _) = synthetic_origin(desk_manifest());
    let (cache, _store) = cache_for(&origin, 1 << 30);
    let mut client = HttpClient::new();
    let (status, first, _) = get(&mut client, &cache.base_url(), "/data/obj_1MB.bin", None, &[]);
    assert_eq!(status, 200);
    let (_, second, _) = get(&mut client, &cache.base_url(), "/data/obj_1MB.bin", None, &[]);
    assert_eq!(first, second);

    let origin_metrics = fetch_metrics(&origin.base_url()).unwrap();
    assert_eq!(origin_metrics.upstream_fetches_total.get("obj_1MB.bin"), Some(&1));
    let cache_metrics = fetch_metrics(&cache.base_url()).unwrap();
    assert_eq!(cache_metrics.upstream_fetches_total.get("obj_1MB.bin"), Some(&1));
}

#[test]
fn cache_serves_byte_identical_content() {
    let manifest = desk_manifest();
    let expected = manifest.lookup("obj_1MB.bin").unwrap().sha256_hex.clone();
    let (origin, _) = synthetic_origin(manifest);
    let (cache, _store) = cache_for(&origin, 1 << 30);
    let mut client = HttpClient::new();
    for _ in 0..2 {
        let (status, body, _) =
            get(&mut client, &cache.base_url(), "/data/obj_1MB.bin", None, &[]);
        assert_eq!(status, 200);
        assert_eq!(sha256_hex(&body), expected);
    }
}

#[test]
fn cache_passes_through_404_and_caches_nothing() {
    let (origin, _) = synthetic_origin(desk_manifest());
    let (cache, store) = cache_for(&origin, 1 << 30);
    let mut client = HttpClient::new();
    let (status, _, _) = get(&mut client, &cache.base_url(), "/data/ghost.bin", None, &[]);
    assert_eq!(status, 404);
    let leftovers = std::fs::read_dir(store.path()).unwrap().count();
    assert_eq!(leftovers, 0);
}

#[test]
fn cache_reports_502_when_upstream_is_down() {
    let unreachable = {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", listener.local_addr().unwrap())
    };
    let store = tempfile::tempdir().unwrap();
    let cache =
        start_cache(CacheConfig::new(unreachable, 1 << 20, store.path().to_path_buf())).unwrap();
    let mut client = HttpClient::new();
    let (status, _, _) = get(&mut client, &cache.base_url(), "/data/x.bin", None, &[]);
    assert_eq!(status, 502);
}

#[test]
fn cache_single_flight_under_concurrent_misses() {
    let (origin, _) = synthetic_origin(desk_manifest());
    let (cache, _store) = cache_for(&origin, 1 << 30);
    let base = cache.base_url();
    let barrier = Arc::new(std::sync::Barrier::new(16));
    let mut joins = Vec::new();
    for _ in 0..16 {
        let base = base.clone();
        let barrier = Arc::clone(&barrier);
        joins.push(std::thread::spawn(move || {
            let mut client = HttpClient::new();
            barrier.wait();
            let (status, body, _) = get(&mut client, &base, "/data/obj_1MB.bin", None, &[]);
            assert_eq!(status, 200);
            assert_eq!(body.len(), 1 << 20);
        }));
    }
    for join in joins {
        join.join().unwrap();
    }
    let metrics = fetch_metrics(&origin.base_url()).unwrap();
    assert_eq!(metrics.upstream_fetches_total.get("obj_1MB.bin"), Some(&1));
}

#[test]
fn cache_lru_eviction_and_capacity_safety() {
    // Capacity fits exactly two 1KB-class objects.
    let profile = [SizeClass::K1];
    let mut manifest = CorpusManifest::synthetic(&profile, 1);
    // Three distinct 1KB objects under different names.
    let base_entry = manifest.entries[0].clone();
    for (index, name) in ["a.bin", "b.bin", "c.bin"].iter().enumerate() {
        let seed = base_entry.seed + index as u64;
        manifest.entries.push(fedbench::datagen::ManifestEntry {
            object_name: name.to_string(),
            size_bytes: 1024,
            seed,
            sha256_hex: datagen::object_digest(seed, 1024),
        });
    }
    let (origin, _) = synthetic_origin(manifest);
    let (cache, store) = cache_for(&origin, 2048);
    let mut client = HttpClient::new();
    for name in ["a.bin", "b.bin", "c.bin"] {
        let (status, _, _) = get(&mut client, &cache.base_url(), &format!("/data/{name}"), None, &[]);
        assert_eq!(status, 200);
    }
    // A was least recently used and must be gone; capacity holds b and c.
    let cached: HashSet<String> = std::fs::read_dir(store.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(cached, HashSet::from(["b.bin".to_string(), "c.bin".to_string()]));

    // Refetch of A goes upstream again.
    get(&mut client, &cache.base_url(), "/data/a.bin", None, &[]);
    let metrics = fetch_metrics(&origin.base_url()).unwrap();
    assert_eq!(metrics.upstream_fetches_total.get("a.bin"), Some(&2));
    let cache_metrics = fetch_metrics(&cache.base_url()).unwrap();
    assert_eq!(cache_metrics.evictions_total, 2);
}

#[test]
fn admin_evict_is_idempotent_and_restores_content() {
    let manifest = desk_manifest();
    let expected = manifest.lookup("obj_1KB.bin").unwrap().sha256_hex.clone();
    let (origin, _) = synthetic_origin(manifest);
    let (cache, _store) = cache_for(&origin, 1 << 30);
    let mut client = HttpClient::new();
    get(&mut client, &cache.base_url(), "/data/obj_1KB.bin", None, &[]);

    let evict = |client: &mut HttpClient, name: &str| -> serde_json::Value {
        let url = Url::parse(&format!("{}/admin/evict?name={name}", cache.base_url())).unwrap();
        let mut body = Vec::new();
        let stream = std::net::TcpStream::connect(url.authority()).unwrap();
        let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
        use std::io::{BufRead, Read, Write};
        write!(
            &stream,
            "POST /admin/evict?name={name} HTTP/1.1\r\nHost: {}\r\nContent-Length: 0\r\n\r\n",
            url.authority()
        )
        .unwrap();
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let mut content_length = 0usize;
        loop {
            let mut header = String::new();
            reader.read_line(&mut header).unwrap();
            if header.trim().is_empty() {
                break;
            }
            if let Some(v) = header.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap();
            }
        }
        body.resize(content_length, 0);
        reader.read_exact(&mut body).unwrap();
        let _ = client;
        serde_json::from_slice(&body).unwrap()
    };

    let first = evict(&mut client, "obj_1KB.bin");
    assert_eq!(first["was_present"], true);
    let again = evict(&mut client, "obj_1KB.bin");
    assert_eq!(again["was_present"], false);
    let absent = evict(&mut client, "never_cached.bin");
    assert_eq!(absent["was_present"], false);

    // Refetch refills from upstream with identical content.
    let (status, body, _) = get(&mut client, &cache.base_url(), "/data/obj_1KB.bin", None, &[]);
    assert_eq!(status, 200);
    assert_eq!(sha256_hex(&body), expected);
    let metrics = fetch_metrics(&origin.base_url()).unwrap();
    assert_eq!(metrics.upstream_fetches_total.get("obj_1KB.bin"), Some(&2));
}

#[test]
fn redirector_round_robin_and_empty_list() {
    let (origin_a, _) = synthetic_origin(desk_manifest());
    let (origin_b, _) = synthetic_origin(desk_manifest());
    let redirector =
        start_redirector(RedirectorConfig::new(vec![origin_a.base_url(), origin_b.base_url()]))
            .unwrap();

    // Raw (non-following) inspection of three consecutive Locations.
    let mut locations = Vec::new();
    for _ in 0..3 {
        use std::io::{BufRead, Write};
        let stream = std::net::TcpStream::connect(redirector.addr).unwrap();
        let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
        write!(&stream, "GET /data/obj_1KB.bin HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        assert!(line.contains("307"), "{line}");
        loop {
            let mut header = String::new();
            reader.read_line(&mut header).unwrap();
            if header.trim().is_empty() {
                break;
            }
            if let Some(v) = header.to_ascii_lowercase().strip_prefix("location:") {
                locations.push(v.trim().to_string());
            }
        }
    }
    assert_eq!(locations.len(), 3);
    assert_eq!(locations[0], locations[2]);
    assert_ne!(locations[0], locations[1]);

    // Follow-redirect path records one hop and verifies the body.
    let mut client = HttpClient::new();
    let (status, body, hops) =
        get(&mut client, &redirector.base_url(), "/data/obj_1KB.bin", None, &[]);
    assert_eq!(status, 200);
    assert_eq!(hops, 1);
    assert_eq!(body.len(), 1024);

    let empty = start_redirector(RedirectorConfig::new(vec![])).unwrap();
    let (status, _, _) = get(&mut client, &empty.base_url(), "/data/x", None, &[]);
    assert_eq!(status, 503);
}

#[test]
fn tpc_copies_between_origins_without_client_bytes() {
    let manifest = desk_manifest();
    let entry = manifest.lookup("obj_1MB.bin").unwrap().clone();
    let (origin_a, _) = synthetic_origin(manifest.clone());
    let (origin_b, _) = synthetic_origin(CorpusManifest::default());

    let mut client = HttpClient::new();
    let url = Url::parse(&format!("{}/tpc/copied.bin", origin_b.base_url())).unwrap();
    let source = format!("{}/data/obj_1MB.bin", origin_a.base_url());

    // POST via raw write since this carries no body either way.
    use std::io::{BufRead, Read, Write};
    let stream = std::net::TcpStream::connect(url.authority()).unwrap();
    let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
    write!(
        &stream,
        "POST /tpc/copied.bin HTTP/1.1\r\nHost: {}\r\nSource: {source}\r\nContent-Length: 0\r\n\r\n",
        url.authority()
    )
    .unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains("200"), "{line}");
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        if header.trim().is_empty() {
            break;
        }
        if let Some(v) = header.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).unwrap();
    let response: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(response["sha256_hex"], entry.sha256_hex);

    // The destination now serves the object, byte-identical to the source.
    let (status, served, _) = get(&mut client, &origin_b.base_url(), "/data/copied.bin", None, &[]);
    assert_eq!(status, 200);
    assert_eq!(sha256_hex(&served), entry.sha256_hex);

    // Missing source object -> 424.
    let stream = std::net::TcpStream::connect(url.authority()).unwrap();
    let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
    write!(
        &stream,
        "POST /tpc/missing.bin HTTP/1.1\r\nHost: h\r\nSource: {}/data/ghost.bin\r\nContent-Length: 0\r\n\r\n",
        origin_a.base_url()
    )
    .unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains("424"), "{line}");
}

#[test]
fn run_window_summary_coheres_with_sample_log() {
    let manifest = desk_manifest();
    let (origin, _) = synthetic_origin(manifest.clone());
    let spec = fedbench::model::validate_scenario(ScenarioSpec {
        scenario_id: "coherence".into(),
        size: SizeClass::M1,
        streams: 2,
        endpoint: EndpointDescriptor::new(EndpointRole::Origin, origin.base_url()),
        client: ClientKind::Native,
        window_seconds: Some(1.0),
        impact: 3,
        complexity: 3,
        seed: SEED,
    })
    .unwrap();
    let (summary, samples) =
        engine::run_window(&spec, &manifest, &WindowOptions::default()).unwrap();
    assert!(summary.completed >= 1);
    assert_eq!(summary.total_bytes, summary.completed * (1 << 20));

    // Recomputing the summary from the sample log reproduces every field.
    let recomputed = engine::summarize_window(&spec, &samples);
    assert_eq!(recomputed, summary);

    // Deadline discipline: no request starts after the window deadline.
    for sample in &samples {
        assert!(sample.started_at <= 1.0 + 1e-3, "late start {}", sample.started_at);
        assert!(sample.finished_at >= sample.started_at);
    }

    // Stream isolation: concurrent in-flight samples never exceed S.
    let mut events: Vec<(f64, i32)> = samples
        .iter()
        .flat_map(|s| [(s.started_at, 1), (s.finished_at, -1)])
        .collect();
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut in_flight = 0;
    for (_, delta) in events {
        in_flight += delta;
        assert!(in_flight <= 2, "more than S samples in flight");
    }
}

#[test]
fn run_window_all_404_yields_zero_rate() {
    let manifest = desk_manifest();
    let mut config = OriginConfig::new(ServeMode::Synthetic { manifest: manifest.clone() });
    config.force_404 = ["obj_1KB.bin".to_string()].into_iter().collect();
    let origin = start_origin(config).unwrap();
    let spec = fedbench::model::validate_scenario(ScenarioSpec {
        scenario_id: "all404".into(),
        size: SizeClass::K1,
        streams: 1,
        endpoint: EndpointDescriptor::new(EndpointRole::Origin, origin.base_url()),
        client: ClientKind::Native,
        window_seconds: Some(0.3),
        impact: 3,
        complexity: 3,
        seed: SEED,
    })
    .unwrap();
    let (summary, _) = engine::run_window(&spec, &manifest, &WindowOptions::default()).unwrap();
    assert_eq!(summary.completed, 0);
    assert_eq!(summary.rate_bytes_per_sec, 0.0);
    assert_eq!(summary.per_error_counts.get("http_error(404)"), Some(&summary.failed));
}

#[test]
fn run_window_fails_fast_on_unreachable_endpoint() {
    let manifest = desk_manifest();
    let unreachable = {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", listener.local_addr().unwrap())
    };
    let spec = fedbench::model::validate_scenario(ScenarioSpec {
        scenario_id: "down".into(),
        size: SizeClass::K1,
        streams: 1,
        endpoint: EndpointDescriptor::new(EndpointRole::Origin, unreachable),
        client: ClientKind::Native,
        window_seconds: Some(0.3),
        impact: 3,
        complexity: 3,
        seed: SEED,
    })
    .unwrap();
    let err = engine::run_window(&spec, &manifest, &WindowOptions::default()).unwrap_err();
    assert!(matches!(err, engine::EngineError::EndpointUnreachable(..)));
}

#[test]
fn token_authorization_rate_is_measurable() {
    let key = [3u8; 32];
    let count = 1000;
    let tokens: Vec<String> = (0..count)
        .map(|_| token::issue_token(&key, &TokenClaims::new("/data/", 600)).unwrap())
        .collect();
    let unique: HashSet<&String> = tokens.iter().collect();
    assert_eq!(unique.len(), count);
    let start = Instant::now();
    for t in &tokens {
        token::verify_token(t, &key, "/data/x", token::now_unix()).unwrap();
    }
    let per_sec = count as f64 / start.elapsed().as_secs_f64();
    assert!(per_sec > 0.0);
}
