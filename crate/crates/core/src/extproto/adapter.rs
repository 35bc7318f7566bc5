//! Client side: a child process serving the backend interfaces over stdio.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use super::{
    decode_response, encode_request, ProtoError, RasterPayload, Request, RequestBody, Response,
    Status, DEFAULT_MAX_LINE_BYTES, PROTOCOL_VERSION,
};
use crate::backends::{
    BackendError, Classifier, DetectionCandidate, Detector, LogitMask, PatchClass, Segmenter,
};
use crate::geometry::{GrayImage, Offset, Patch, Point2};

/// Replaced by the annotation path of the current image in external commands.
pub const ANNOTATIONS_PLACEHOLDER: &str = "{annotations}";

#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub timeout: Duration,
    pub max_line_bytes: usize,
    pub model_role: String,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            max_line_bytes: DEFAULT_MAX_LINE_BYTES,
            model_role: "all".to_string(),
        }
    }
}

struct Connection {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    /// Set once the stream can no longer be trusted.
    broken: Option<String>,
}

/// Detector, segmenter and classifier backed by one child process.
///
/// Requests are strictly sequential: a mutex holds the connection for the
/// whole write-then-read exchange. Use one adapter per worker for parallelism.
pub struct ExternalBackend {
    command: String,
    cfg: AdapterConfig,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalBackend").field("command", &self.command).finish()
    }
}

impl ExternalBackend {
    /// Starts `command` (split on whitespace) and performs the init handshake.
    pub fn spawn(command: &str, cfg: AdapterConfig) -> Result<Self, ProtoError> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| ProtoError::Spawn {
            command: command.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
        })?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| ProtoError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => return,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
            }
        });
        let backend = Self {
            command: command.to_string(),
            conn: Mutex::new(Connection {
                child,
                stdin,
                lines: rx,
                next_id: 1,
                broken: None,
            }),
            cfg,
        };
        let resp = backend.call(RequestBody::Init {
            protocol_version: PROTOCOL_VERSION,
            model_role: backend.cfg.model_role.clone(),
        })?;
        if resp.protocol_version != Some(PROTOCOL_VERSION) {
            return Err(ProtoError::ProtocolViolation(format!(
                "server answered init with protocol version {:?}",
                resp.protocol_version
            )));
        }
        Ok(backend)
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Sends one request and waits for its response.
    ///
    /// Error-status responses become [`ProtoError::Remote`]; the connection
    /// stays usable. Timeouts and protocol violations poison it.
    pub fn call(&self, body: RequestBody) -> Result<Response, ProtoError> {
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let conn = &mut *guard;
        if let Some(reason) = &conn.broken {
            return Err(ProtoError::ProtocolViolation(format!("connection unusable: {reason}")));
        }
        let id = conn.next_id;
        conn.next_id += 1;
        let line = encode_request(&Request { id, body }, self.cfg.max_line_bytes)?;

        let exited = |conn: &mut Connection| -> ProtoError {
            let status = conn
                .child
                .wait_timeout_ms(200)
                .map(|s| s.to_string())
                .unwrap_or_else(|| "still running".into());
            let msg = format!("`{}` closed its output ({status})", self.command);
            conn.broken = Some(msg.clone());
            ProtoError::ChildExited(msg)
        };

        let Some(stdin) = conn.stdin.as_mut() else {
            return Err(exited(conn));
        };
        if stdin.write_all(&line).and_then(|_| stdin.flush()).is_err() {
            return Err(exited(conn));
        }
        let text = match conn.lines.recv_timeout(self.cfg.timeout) {
            Ok(Ok(text)) => text,
            Ok(Err(e)) => {
                conn.broken = Some(e.to_string());
                return Err(ProtoError::Io(e));
            }
            Err(RecvTimeoutError::Disconnected) => return Err(exited(conn)),
            Err(RecvTimeoutError::Timeout) => {
                conn.broken = Some("timed out".into());
                return Err(ProtoError::Timeout(self.cfg.timeout));
            }
        };
        if text.len() > self.cfg.max_line_bytes {
            conn.broken = Some("oversized response".into());
            return Err(ProtoError::PayloadTooLarge {
                size: text.len(),
                cap: self.cfg.max_line_bytes,
            });
        }
        let resp = decode_response(&text).inspect_err(|e| conn.broken = Some(e.to_string()))?;
        if resp.id != id {
            let msg = format!("expected response id {id}, got {}", resp.id);
            conn.broken = Some(msg.clone());
            return Err(ProtoError::ProtocolViolation(msg));
        }
        match resp.status {
            Status::Ok => Ok(resp),
            Status::Error => Err(ProtoError::Remote(
                resp.error_msg.unwrap_or_else(|| "unspecified error".into()),
            )),
        }
    }

    /// Asks the child to exit and reaps it.
    pub fn shutdown(&self) {
        let _ = self.call(RequestBody::Shutdown);
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        conn.stdin = None;
        if conn.child.wait_timeout_ms(1000).is_none() {
            let _ = conn.child.kill();
            let _ = conn.child.wait();
        }
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        if matches!(conn.child.try_wait(), Ok(None)) {
            if conn.broken.is_none() {
                if let Some(stdin) = conn.stdin.as_mut() {
                    let req = Request {
                        id: conn.next_id,
                        body: RequestBody::Shutdown,
                    };
                    if let Ok(line) = encode_request(&req, usize::MAX) {
                        let _ = stdin.write_all(&line).and_then(|_| stdin.flush());
                    }
                }
            }
            conn.stdin = None;
            if conn.child.wait_timeout_ms(500).is_none() {
                let _ = conn.child.kill();
                let _ = conn.child.wait();
            }
        }
    }
}

trait WaitTimeout {
    fn wait_timeout_ms(&mut self, ms: u64) -> Option<std::process::ExitStatus>;
}

impl WaitTimeout for Child {
    fn wait_timeout_ms(&mut self, ms: u64) -> Option<std::process::ExitStatus> {
        let deadline = std::time::Instant::now() + Duration::from_millis(ms);
        loop {
            match self.try_wait() {
                Ok(Some(s)) => return Some(s),
                Ok(None) if std::time::Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(5))
                }
                _ => return None,
            }
        }
    }
}

impl Detector for ExternalBackend {
    fn detect(&self, image: &GrayImage) -> Result<Vec<DetectionCandidate>, BackendError> {
        let resp = self.call(RequestBody::Detect {
            image: RasterPayload::from_image(image, Offset::ZERO),
        })?;
        Ok(resp.detection_candidates()?)
    }
}

impl Segmenter for ExternalBackend {
    fn segment(&self, patch: &Patch, prompt: Point2) -> Result<LogitMask, BackendError> {
        let resp = self.call(RequestBody::Segment {
            patch: RasterPayload::from_patch(patch),
            prompt,
        })?;
        let logits = resp
            .logits
            .ok_or_else(|| ProtoError::Schema("segment response without logits".into()))?
            .to_logits()?;
        if !logits.is_finite() {
            return Err(BackendError::new("segmenter returned non-finite logits"));
        }
        Ok(logits)
    }
}

impl Classifier for ExternalBackend {
    fn classify(&self, patch: &Patch, center: Point2) -> Result<PatchClass, BackendError> {
        let resp = self.call(RequestBody::Classify {
            patch: RasterPayload::from_patch(patch),
            center,
        })?;
        Ok(resp.patch_class()?)
    }
}
