//! Wire transports for external model backends.
//!
//! Every external model speaks the same envelope: one JSON object per
//! request, one JSON object per response. Two transports are provided,
//! an HTTP endpoint (POST, JSON body) and a long-lived subprocess
//! exchanging one JSON object per line on stdin/stdout. Calls block with
//! a configurable timeout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("failed to spawn backend {cmd:?}: {source}")]
    Spawn { cmd: String, source: std::io::Error },
    #[error("backend io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("backend did not answer within {secs} s")]
    Timeout { secs: u64 },
    #[error("backend closed its output stream")]
    ClosedStream,
    #[error("http error: {0}")]
    Http(String),
    #[error("bad response: {message}")]
    BadResponse { message: String },
}

fn default_timeout() -> u64 {
    30
}

/// Transport configuration, typically loaded from a TOML or JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransportConfig {
    Http {
        url: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    Subprocess {
        /// Argv of the backend process; element 0 is the executable.
        cmd: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

/// A blocking JSON-in, JSON-out channel to one backend.
pub struct JsonClient {
    inner: Inner,
}

enum Inner {
    Http {
        url: String,
        timeout: Duration,
        http: reqwest::blocking::Client,
    },
    Subprocess(Mutex<SubprocessIo>),
}

struct SubprocessIo {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl Drop for SubprocessIo {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl JsonClient {
    pub fn from_config(cfg: &TransportConfig) -> Result<Self, ClientError> {
        match cfg {
            TransportConfig::Http { url, timeout_secs } => Ok(JsonClient {
                inner: Inner::Http {
                    url: url.clone(),
                    timeout: Duration::from_secs(*timeout_secs),
                    http: reqwest::blocking::Client::new(),
                },
            }),
            TransportConfig::Subprocess { cmd, timeout_secs } => {
                if cmd.is_empty() {
                    return Err(ClientError::BadResponse {
                        message: "subprocess transport needs a non-empty argv".into(),
                    });
                }
                let mut child = Command::new(&cmd[0])
                    .args(&cmd[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|source| ClientError::Spawn {
                        cmd: cmd.join(" "),
                        source,
                    })?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, lines) = mpsc::channel();
                std::thread::spawn(move || {
                    let reader = BufReader::new(stdout);
                    for line in reader.lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Ok(JsonClient {
                    inner: Inner::Subprocess(Mutex::new(SubprocessIo {
                        child,
                        stdin,
                        lines,
                        timeout: Duration::from_secs(*timeout_secs),
                    })),
                })
            }
        }
    }

    /// Send one request object and wait for one response object.
    pub fn call(&self, request: &serde_json::Value) -> Result<serde_json::Value, ClientError> {
        match &self.inner {
            Inner::Http { url, timeout, http } => {
                let resp = http
                    .post(url)
                    .timeout(*timeout)
                    .json(request)
                    .send()
                    .map_err(|e| ClientError::Http(e.to_string()))?;
                let status = resp.status();
                if !status.is_success() {
                    return Err(ClientError::Http(format!("status {status}")));
                }
                resp.json().map_err(|e| ClientError::BadResponse {
                    message: e.to_string(),
                })
            }
            Inner::Subprocess(io) => {
                let io = io.lock().expect("subprocess lock");
                let line = serde_json::to_string(request).expect("requests serialize");
                {
                    let mut stdin = &io.stdin;
                    stdin.write_all(line.as_bytes())?;
                    stdin.write_all(b"\n")?;
                    stdin.flush()?;
                }
                let answer = io
                    .lines
                    .recv_timeout(io.timeout)
                    .map_err(|_| ClientError::Timeout {
                        secs: io.timeout.as_secs(),
                    })?
                    .map_err(ClientError::Io)?;
                serde_json::from_str(&answer).map_err(|e| ClientError::BadResponse {
                    message: e.to_string(),
                })
            }
        }
    }
}

/// Fetch a required field from a response object.
pub fn response_field<'a>(
    value: &'a serde_json::Value,
    field: &str,
) -> Result<&'a serde_json::Value, ClientError> {
    value.get(field).ok_or_else(|| ClientError::BadResponse {
        message: format!("missing field {field:?}"),
    })
}

/// Decode a JSON array of numbers.
pub fn decode_f64_array(value: &serde_json::Value, what: &str) -> Result<Vec<f64>, ClientError> {
    let arr = value.as_array().ok_or_else(|| ClientError::BadResponse {
        message: format!("{what} is not an array"),
    })?;
    arr.iter()
        .map(|v| {
            v.as_f64().ok_or_else(|| ClientError::BadResponse {
                message: format!("{what} contains a non-numeric entry"),
            })
        })
        .collect()
}

/// Language-model client over the wire envelope
/// `{"system", "user"} -> {"text"}`.
pub struct JsonLmm {
    client: JsonClient,
}

impl JsonLmm {
    pub fn new(cfg: &TransportConfig) -> Result<Self, ClientError> {
        Ok(JsonLmm {
            client: JsonClient::from_config(cfg)?,
        })
    }

    pub fn complete(&self, system: &str, user: &str) -> Result<String, ClientError> {
        let req = serde_json::json!({ "system": system, "user": user });
        let resp = self.client.call(&req)?;
        let text = response_field(&resp, "text")?;
        text.as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| ClientError::BadResponse {
                message: "text is not a string".into(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;

    #[cfg(unix)]
    #[test]
    fn subprocess_round_trip() {
        let cfg = TransportConfig::Subprocess {
            cmd: vec![
                "/bin/sh".into(),
                "-c".into(),
                r#"while read line; do echo '{"text":"ok"}'; done"#.into(),
            ],
            timeout_secs: 5,
        };
        let client = JsonClient::from_config(&cfg).unwrap();
        let resp = client.call(&serde_json::json!({"system": "s", "user": "u"})).unwrap();
        assert_eq!(resp["text"], "ok");
        let resp = client.call(&serde_json::json!({"again": true})).unwrap();
        assert_eq!(resp["text"], "ok");
    }

    #[test]
    fn http_round_trip_against_local_listener() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            // Read until the end of the request body (single small request).
            let mut total = Vec::new();
            loop {
                let n = stream.read(&mut buf).unwrap();
                total.extend_from_slice(&buf[..n]);
                if let Some(pos) = find_blank_line(&total) {
                    let headers = String::from_utf8_lossy(&total[..pos]).to_string();
                    let len = content_length(&headers);
                    if total.len() >= pos + 4 + len {
                        break;
                    }
                }
            }
            let body = r#"{"text":"hello"}"#;
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(resp.as_bytes()).unwrap();
        });

        let cfg = TransportConfig::Http {
            url: format!("http://{addr}/"),
            timeout_secs: 5,
        };
        let lmm = JsonLmm::new(&cfg).unwrap();
        let text = lmm.complete("sys", "user").unwrap();
        assert_eq!(text, "hello");
        handle.join().unwrap();
    }

    fn find_blank_line(bytes: &[u8]) -> Option<usize> {
        bytes.windows(4).position(|w| w == b"\r\n\r\n")
    }

    fn content_length(headers: &str) -> usize {
        headers
            .lines()
            .find_map(|l| {
                let (k, v) = l.split_once(':')?;
                k.trim().eq_ignore_ascii_case("content-length").then(|| v.trim().parse().ok())?
            })
            .unwrap_or(0)
    }
}
