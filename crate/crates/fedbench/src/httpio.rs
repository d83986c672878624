//! Minimal HTTP/1.1 plumbing shared by the mock federation servers and the
//! native transfer client.
//!
//! Only what the harness needs: content-length bodies, keep-alive, absolute
//! deadlines mapped onto socket timeouts, and explicit control over when and
//! how fast body bytes are written.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

pub const MAX_REDIRECT_HOPS: u32 = 5;

/// A parsed request head.
#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    /// Path without the query string.
    pub path: String,
    pub query: HashMap<String, String>,
    /// Header names lowercased.
    pub headers: HashMap<String, String>,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(&name.to_ascii_lowercase()).map(|s| s.as_str())
    }
}

/// Read one request head from a keep-alive connection. `Ok(None)` means the
/// peer closed cleanly between requests.
pub fn read_request(reader: &mut BufReader<TcpStream>) -> io::Result<Option<Request>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let target = parts.next().unwrap_or_default().to_string();
    if method.is_empty() || target.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "malformed request line"));
    }
    let (path, query) = split_target(&target);

    let mut headers = HashMap::new();
    loop {
        let mut header_line = String::new();
        if reader.read_line(&mut header_line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "eof in headers"));
        }
        let trimmed = header_line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
        }
    }
    Ok(Some(Request { method, path, query, headers }))
}

fn split_target(target: &str) -> (String, HashMap<String, String>) {
    match target.split_once('?') {
        None => (target.to_string(), HashMap::new()),
        Some((path, qs)) => {
            let query = qs
                .split('&')
                .filter(|kv| !kv.is_empty())
                .map(|kv| match kv.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => (kv.to_string(), String::new()),
                })
                .collect();
            (path.to_string(), query)
        }
    }
}

/// Drain a request body if the client sent one (admin POSTs may).
pub fn drain_body(reader: &mut BufReader<TcpStream>, request: &Request) -> io::Result<()> {
    if let Some(len) = request.header("content-length").and_then(|v| v.parse::<u64>().ok()) {
        io::copy(&mut reader.take(len), &mut io::sink())?;
    }
    Ok(())
}

pub fn status_reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        206 => "Partial Content",
        307 => "Temporary Redirect",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        416 => "Range Not Satisfiable",
        424 => "Failed Dependency",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Unknown",
    }
}

/// Write a response head; the caller writes exactly `content_length` body
/// bytes afterwards (or none for HEAD).
pub fn write_head(
    stream: &mut TcpStream,
    status: u16,
    content_length: u64,
    extra_headers: &[(&str, &str)],
) -> io::Result<()> {
    let mut head = format!(
        "HTTP/1.1 {} {}\r\nContent-Length: {}\r\nConnection: keep-alive\r\n",
        status,
        status_reason(status),
        content_length
    );
    for (name, value) in extra_headers {
        head.push_str(name);
        head.push_str(": ");
        head.push_str(value);
        head.push_str("\r\n");
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes())
}

/// Head plus a small in-memory body in one call.
pub fn write_simple(
    stream: &mut TcpStream,
    status: u16,
    body: &[u8],
    extra_headers: &[(&str, &str)],
) -> io::Result<()> {
    write_head(stream, status, body.len() as u64, extra_headers)?;
    stream.write_all(body)?;
    stream.flush()
}

/// Parsed `http://host:port/path` URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Url {
    pub host: String,
    pub port: u16,
    pub path: String,
}

impl Url {
    pub fn parse(url: &str) -> io::Result<Url> {
        let rest = url
            .strip_prefix("http://")
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("unsupported URL `{url}` (http only)")))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].to_string()),
            None => (rest, "/".to_string()),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse::<u16>().map_err(|_| {
                    io::Error::new(io::ErrorKind::InvalidInput, format!("bad port in `{url}`"))
                })?,
            ),
            None => (authority.to_string(), 80),
        };
        Ok(Url { host, port, path })
    }

    pub fn authority(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    /// Resolve a Location header value against this URL.
    pub fn join_location(&self, location: &str) -> io::Result<Url> {
        if location.starts_with("http://") {
            Url::parse(location)
        } else {
            Ok(Url { host: self.host.clone(), port: self.port, path: location.to_string() })
        }
    }
}

/// Absolute cutoff for an operation, mapped onto socket timeouts.
#[derive(Debug, Clone, Copy)]
pub struct Deadline(pub Instant);

impl Deadline {
    pub fn after(duration: Duration) -> Self {
        Deadline(Instant::now() + duration)
    }

    pub fn remaining(&self) -> Option<Duration> {
        self.0.checked_duration_since(Instant::now()).filter(|d| !d.is_zero())
    }
}

/// Response head as seen by the client.
#[derive(Debug)]
pub struct ResponseHead {
    pub status: u16,
    pub headers: HashMap<String, String>,
}

impl ResponseHead {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(&name.to_ascii_lowercase()).map(|s| s.as_str())
    }

    pub fn content_length(&self) -> Option<u64> {
        self.header("content-length").and_then(|v| v.parse().ok())
    }
}

/// HTTP client with one reused connection per (host, port); each transfer
/// stream owns one client instance.
pub struct HttpClient {
    connections: HashMap<String, BufReader<TcpStream>>,
    /// Total body bytes this client has carried; used to prove TPC moves no
    /// payload through the client.
    pub body_bytes_received: u64,
}

impl Default for HttpClient {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpClient {
    pub fn new() -> Self {
        HttpClient { connections: HashMap::new(), body_bytes_received: 0 }
    }

    fn connect(&mut self, url: &Url, deadline: Deadline) -> io::Result<()> {
        let key = url.authority();
        if self.connections.contains_key(&key) {
            return Ok(());
        }
        let remaining = deadline
            .remaining()
            .ok_or_else(|| io::Error::new(io::ErrorKind::TimedOut, "deadline before connect"))?;
        let addr = key
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))?;
        let stream = TcpStream::connect_timeout(&addr, remaining)?;
        stream.set_nodelay(true)?;
        self.connections.insert(key, BufReader::new(stream));
        Ok(())
    }

    fn drop_connection(&mut self, url: &Url) {
        self.connections.remove(&url.authority());
    }

    /// Issue one request and read the response head. Retries once on a stale
    /// keep-alive connection.
    fn request_head(
        &mut self,
        method: &str,
        url: &Url,
        bearer: Option<&str>,
        extra_headers: &[(&str, &str)],
        deadline: Deadline,
    ) -> io::Result<ResponseHead> {
        for attempt in 0..2 {
            self.connect(url, deadline)?;
            let reader = self.connections.get_mut(&url.authority()).unwrap();
            let result = send_and_read_head(reader, method, url, bearer, extra_headers, deadline);
            match result {
                Ok(head) => return Ok(head),
                Err(e) if attempt == 0 && is_stale_connection(&e) => {
                    self.drop_connection(url);
                }
                Err(e) => {
                    self.drop_connection(url);
                    return Err(e);
                }
            }
        }
        unreachable!("second attempt returns");
    }

    /// GET with redirect following; body bytes are streamed into `sink`.
    /// Returns the final response head, the number of redirect hops, and the
    /// body length delivered.
    pub fn get_streamed(
        &mut self,
        url: &Url,
        bearer: Option<&str>,
        extra_headers: &[(&str, &str)],
        deadline: Deadline,
        sink: &mut dyn FnMut(&[u8]),
    ) -> io::Result<(ResponseHead, u32, u64)> {
        let mut current = url.clone();
        let mut hops = 0u32;
        loop {
            let head = self.request_head("GET", &current, bearer, extra_headers, deadline)?;
            if matches!(head.status, 301 | 302 | 303 | 307 | 308) {
                // Redirect bodies are empty in this federation; consume anyway.
                self.consume_body(&current, &head, deadline, &mut |_| {})?;
                if hops >= MAX_REDIRECT_HOPS {
                    return Err(io::Error::new(io::ErrorKind::Other, "too many redirects"));
                }
                let location = head
                    .header("location")
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "redirect without Location"))?
                    .to_string();
                current = current.join_location(&location)?;
                hops += 1;
                continue;
            }
            let body_len = self.consume_body(&current, &head, deadline, sink)?;
            self.body_bytes_received += body_len;
            return Ok((head, hops, body_len));
        }
    }

    /// POST carrying no request body. The response body is a small control
    /// message, not transfer payload, so it does not count toward
    /// `body_bytes_received`.
    pub fn post_control(
        &mut self,
        url: &Url,
        extra_headers: &[(&str, &str)],
        deadline: Deadline,
    ) -> io::Result<(ResponseHead, Vec<u8>)> {
        let mut headers: Vec<(&str, &str)> = vec![("Content-Length", "0")];
        headers.extend_from_slice(extra_headers);
        let head = self.request_head("POST", url, None, &headers, deadline)?;
        let mut body = Vec::new();
        self.consume_body(url, &head, deadline, &mut |chunk| body.extend_from_slice(chunk))?;
        Ok((head, body))
    }

    fn consume_body(
        &mut self,
        url: &Url,
        head: &ResponseHead,
        deadline: Deadline,
        sink: &mut dyn FnMut(&[u8]),
    ) -> io::Result<u64> {
        let Some(length) = head.content_length() else {
            self.drop_connection(url);
            return Err(io::Error::new(io::ErrorKind::InvalidData, "missing content-length"));
        };
        // Own the connection while reading; put it back only on clean finish.
        let mut reader = self.connections.remove(&url.authority()).unwrap();
        let mut buf = [0u8; 64 * 1024];
        let mut remaining = length;
        while remaining > 0 {
            set_read_deadline(reader.get_ref(), deadline)?;
            let want = buf.len().min(remaining as usize);
            match reader.read(&mut buf[..want]) {
                Ok(0) => {
                    return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "short body"));
                }
                Ok(n) => {
                    sink(&buf[..n]);
                    remaining -= n as u64;
                }
                Err(e) => return Err(e),
            }
        }
        if !head.header("connection").is_some_and(|v| v.eq_ignore_ascii_case("close")) {
            self.connections.insert(url.authority(), reader);
        }
        Ok(length)
    }
}

fn is_stale_connection(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::UnexpectedEof | io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset
    )
}

fn set_read_deadline(stream: &TcpStream, deadline: Deadline) -> io::Result<()> {
    match deadline.remaining() {
        Some(remaining) => stream.set_read_timeout(Some(remaining)),
        None => Err(io::Error::new(io::ErrorKind::TimedOut, "deadline exceeded")),
    }
}

fn send_and_read_head(
    reader: &mut BufReader<TcpStream>,
    method: &str,
    url: &Url,
    bearer: Option<&str>,
    extra_headers: &[(&str, &str)],
    deadline: Deadline,
) -> io::Result<ResponseHead> {
    let stream = reader.get_ref();
    set_read_deadline(stream, deadline)?;
    stream.set_write_timeout(deadline.remaining())?;

    let mut request = format!("{method} {} HTTP/1.1\r\nHost: {}\r\n", url.path, url.authority());
    if let Some(token) = bearer {
        request.push_str(&format!("Authorization: Bearer {token}\r\n"));
    }
    for (name, value) in extra_headers {
        request.push_str(&format!("{name}: {value}\r\n"));
    }
    request.push_str("\r\n");
    reader.get_ref().write_all(request.as_bytes())?;

    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
    }
    let status = line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse::<u16>().ok())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad status line"))?;

    let mut headers = HashMap::new();
    loop {
        let mut header_line = String::new();
        if reader.read_line(&mut header_line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "eof in headers"));
        }
        let trimmed = header_line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
        }
    }
    Ok(ResponseHead { status, headers })
}
