//! State providers: where end-of-slot snapshots come from.
//!
//! The analyzer only speaks [`StateProvider`], so the same pipeline runs
//! against the in-process simulator, a directory of `state_{slot}.json`
//! fixtures, or an HTTP endpoint. A bundled [`MockServer`] serves a fixture
//! directory over HTTP for tests and demos, including injected failures to
//! exercise the retry path.

use std::fs;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{SimConfig, SimError, Simulator};
use crate::snapshot::{
    self, slot_of_state_file, state_file_name, BeaconStateSnapshot, SnapshotError,
};
use crate::rewards::WeightParams;

/// Errors from snapshot retrieval.
#[derive(Debug, Error)]
pub enum SourceError {
    #[error("no state available for slot {slot}")]
    NotFound { slot: u64 },
    #[error("provider has no states at all")]
    Empty,
    #[error("http request to {url} failed with status {status}")]
    HttpStatus { url: String, status: u16 },
    #[error("gave up on {url} after {attempts} attempts: {last}")]
    Exhausted { url: String, attempts: u32, last: String },
    #[error("malformed http exchange with {url}: {reason}")]
    Protocol { url: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Inclusive slot range a provider can serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRange {
    pub first_slot: u64,
    pub last_slot: u64,
}

/// A source of end-of-slot snapshots addressed by slot number.
pub trait StateProvider {
    /// Returns the snapshot for `slot`, or [`SourceError::NotFound`].
    fn get_state(&mut self, slot: u64) -> Result<BeaconStateSnapshot, SourceError>;

    /// Inclusive range of slots this provider can serve.
    fn range(&mut self) -> Result<SlotRange, SourceError>;
}

/// Provider backed by the in-process simulator. Sequential reads step the
/// simulation forward; rewinding replays deterministically from slot 0.
pub struct SimProvider {
    cfg: SimConfig,
    params: WeightParams,
    sim: Simulator,
    last: Option<BeaconStateSnapshot>,
}

impl SimProvider {
    pub fn new(cfg: SimConfig, params: WeightParams) -> Result<Self, SourceError> {
        let sim = Simulator::new(cfg.clone(), params.clone())?;
        Ok(SimProvider { cfg, params, sim, last: None })
    }
}

impl StateProvider for SimProvider {
    fn get_state(&mut self, slot: u64) -> Result<BeaconStateSnapshot, SourceError> {
        if slot > self.sim.last_run_slot() {
            return Err(SourceError::NotFound { slot });
        }
        if let Some(last) = &self.last {
            if last.slot == slot {
                return Ok(last.clone());
            }
        }
        if slot < self.sim.next_slot() {
            // Rewind: rebuild and replay; determinism makes this exact.
            self.sim = Simulator::new(self.cfg.clone(), self.params.clone())?;
        }
        let mut snap = self.sim.step()?;
        while snap.slot < slot {
            snap = self.sim.step()?;
        }
        self.last = Some(snap.clone());
        Ok(snap)
    }

    fn range(&mut self) -> Result<SlotRange, SourceError> {
        Ok(SlotRange { first_slot: 0, last_slot: self.sim.last_run_slot() })
    }
}

/// Provider backed by a directory of `state_{slot}.json` files.
pub struct FilesProvider {
    dir: PathBuf,
}

impl FilesProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FilesProvider { dir: dir.into() }
    }
}

/// Scans `dir` for `state_{slot}.json` files and returns the covered range.
/// The range is the min and max found; gaps in between are the analyzer's
/// problem to detect.
fn scan_state_dir(dir: &Path) -> Result<SlotRange, SourceError> {
    let entries = fs::read_dir(dir).map_err(|source| SourceError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut first = u64::MAX;
    let mut last = 0u64;
    let mut any = false;
    for entry in entries {
        let entry = entry.map_err(|source| SourceError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        if let Some(slot) = entry.file_name().to_str().and_then(slot_of_state_file) {
            any = true;
            first = first.min(slot);
            last = last.max(slot);
        }
    }
    if !any {
        return Err(SourceError::Empty);
    }
    Ok(SlotRange { first_slot: first, last_slot: last })
}

impl StateProvider for FilesProvider {
    fn get_state(&mut self, slot: u64) -> Result<BeaconStateSnapshot, SourceError> {
        let path = self.dir.join(state_file_name(slot));
        match snapshot::read_state_file(&self.dir, slot) {
            Ok(snap) => Ok(snap),
            Err(SnapshotError::Io { source, .. })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                let _ = path;
                Err(SourceError::NotFound { slot })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn range(&mut self) -> Result<SlotRange, SourceError> {
        scan_state_dir(&self.dir)
    }
}

/// Runs a full simulation and writes one `state_{slot}.json` per slot into
/// `dir`, returning the written range. This is the fixture format
/// [`FilesProvider`] and [`MockServer`] serve.
pub fn write_sim_fixture(
    cfg: SimConfig,
    params: WeightParams,
    dir: &Path,
) -> Result<SlotRange, SourceError> {
    let mut sim = Simulator::new(cfg, params)?;
    let last = sim.last_run_slot();
    for snap in sim.snapshots() {
        let snap = snap?;
        snapshot::write_state_file(&snap, dir)?;
    }
    Ok(SlotRange { first_slot: 0, last_slot: last })
}

/// Retry schedule for HTTP requests: `attempts` tries total, sleeping
/// `initial_backoff` before the second try and doubling after each failure.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    /// Instant retries for tests.
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy { attempts, initial_backoff: Duration::ZERO }
    }
}

/// Provider backed by an HTTP endpoint exposing `GET /states/{slot}` and
/// `GET /range`. Connection errors and 5xx responses are retried per the
/// policy; 404 means the slot does not exist and is returned immediately.
pub struct HttpProvider {
    base_url: String,
    retry: RetryPolicy,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_retry(base_url, RetryPolicy::default())
    }

    pub fn with_retry(base_url: impl Into<String>, retry: RetryPolicy) -> Self {
        let mut base_url = base_url.into();
        while base_url.ends_with('/') {
            base_url.pop();
        }
        HttpProvider { base_url, retry }
    }

    fn get_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        not_found: Option<SourceError>,
    ) -> Result<T, SourceError> {
        let url = format!("{}{}", self.base_url, path);
        let mut last_err = String::new();
        let mut backoff = self.retry.initial_backoff;
        for attempt in 0..self.retry.attempts {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff = backoff.saturating_mul(2);
            }
            match http_get(&url) {
                Ok((200, body)) => {
                    return serde_json::from_slice(&body).map_err(|e| SourceError::Protocol {
                        url,
                        reason: format!("bad json body: {e}"),
                    });
                }
                Ok((404, _)) => {
                    return Err(not_found
                        .unwrap_or(SourceError::HttpStatus { url: url.clone(), status: 404 }));
                }
                Ok((status, _)) => {
                    last_err = format!("status {status}");
                }
                Err(e) => {
                    last_err = e.to_string();
                }
            }
        }
        Err(SourceError::Exhausted { url, attempts: self.retry.attempts, last: last_err })
    }
}

impl StateProvider for HttpProvider {
    fn get_state(&mut self, slot: u64) -> Result<BeaconStateSnapshot, SourceError> {
        self.get_json(&format!("/states/{slot}"), Some(SourceError::NotFound { slot }))
    }

    fn range(&mut self) -> Result<SlotRange, SourceError> {
        self.get_json("/range", Some(SourceError::Empty))
    }
}

/// Minimal HTTP/1.1 GET over a plain TCP stream: one request, `Connection:
/// close`, body read to end-of-stream (bounded by Content-Length when the
/// server sends one). Returns the status code and body.
fn http_get(url: &str) -> Result<(u16, Vec<u8>), SourceError> {
    let proto_err = |reason: String| SourceError::Protocol { url: url.to_string(), reason };
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| proto_err("only http:// urls are supported".into()))?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };

    let mut stream = TcpStream::connect(authority).map_err(|e| SourceError::Io {
        path: url.to_string(),
        source: e,
    })?;
    stream.set_read_timeout(Some(Duration::from_secs(10))).ok();
    stream.set_write_timeout(Some(Duration::from_secs(10))).ok();

    let request = format!(
        "GET {path} HTTP/1.1\r\nHost: {authority}\r\nAccept: application/json\r\nConnection: close\r\n\r\n"
    );
    stream
        .write_all(request.as_bytes())
        .map_err(|e| SourceError::Io { path: url.to_string(), source: e })?;

    let mut raw = Vec::new();
    stream
        .read_to_end(&mut raw)
        .map_err(|e| SourceError::Io { path: url.to_string(), source: e })?;

    let header_end = find_subsequence(&raw, b"\r\n\r\n")
        .ok_or_else(|| proto_err("response has no header terminator".into()))?;
    let head = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| proto_err("response headers are not utf-8".into()))?;
    let mut lines = head.split("\r\n");
    let status_line = lines.next().unwrap_or_default();
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| proto_err(format!("bad status line {status_line:?}")))?;

    let mut body = raw[header_end + 4..].to_vec();
    for line in lines {
        if let Some(value) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
            .and_then(|v| v.parse::<usize>().ok())
        {
            if body.len() < value {
                return Err(proto_err(format!(
                    "body truncated: got {} of {value} bytes",
                    body.len()
                )));
            }
            body.truncate(value);
            break;
        }
    }
    Ok((status, body))
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Test and demo server: serves a fixture directory over the provider HTTP
/// interface on a loopback port. `fail_next(n)` makes the next `n` requests
/// return 500, to exercise client retries.
pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    fail_budget: Arc<AtomicUsize>,
    requests: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds a fresh loopback port and starts serving `dir`.
    pub fn serve(dir: impl Into<PathBuf>) -> std::io::Result<MockServer> {
        let dir = dir.into();
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let fail_budget = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(AtomicUsize::new(0));

        let t_stop = stop.clone();
        let t_fail = fail_budget.clone();
        let t_requests = requests.clone();
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if t_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                t_requests.fetch_add(1, Ordering::SeqCst);
                let failing = t_fail
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                    .is_ok();
                handle_connection(stream, &dir, failing);
            }
        });

        Ok(MockServer { addr, stop, fail_budget, requests, handle: Some(handle) })
    }

    /// Base URL clients should use.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Makes the next `n` requests fail with status 500.
    pub fn fail_next(&self, n: usize) {
        self.fail_budget.store(n, Ordering::SeqCst);
    }

    /// Total requests handled so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop so it observes the stop flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, dir: &Path, failing: bool) {
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok();
    stream.set_write_timeout(Some(Duration::from_secs(5))).ok();

    // Read until the end of the request headers; GETs have no body.
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    loop {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if find_subsequence(&buf, b"\r\n\r\n").is_some() {
                    break;
                }
            }
            Err(_) => return,
        }
    }
    let head = String::from_utf8_lossy(&buf);
    let path = head
        .lines()
        .next()
        .and_then(|line| line.split_whitespace().nth(1))
        .unwrap_or("/")
        .to_string();

    let (status, body) = if failing {
        (500, b"{\"error\":\"injected failure\"}".to_vec())
    } else {
        route(dir, &path)
    };
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Internal Server Error",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.write_all(&body);
}

fn route(dir: &Path, path: &str) -> (u16, Vec<u8>) {
    if path == "/range" {
        return match scan_state_dir(dir) {
            Ok(range) => (200, serde_json::to_vec(&range).expect("range serializes")),
            Err(SourceError::Empty) => (404, b"{\"error\":\"no states\"}".to_vec()),
            Err(e) => (500, format!("{{\"error\":{:?}}}", e.to_string()).into_bytes()),
        };
    }
    if let Some(slot) = path
        .strip_prefix("/states/")
        .and_then(|s| s.parse::<u64>().ok())
    {
        return match fs::read(dir.join(state_file_name(slot))) {
            Ok(bytes) => (200, bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                (404, b"{\"error\":\"unknown slot\"}".to_vec())
            }
            Err(e) => (500, format!("{{\"error\":{:?}}}", e.to_string()).into_bytes()),
        };
    }
    (400, b"{\"error\":\"unknown route\"}".to_vec())
}
