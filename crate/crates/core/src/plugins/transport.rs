//! Wire transports shared by every plugin client.
//!
//! * subprocess: the provider is invoked with the input file path as its
//!   last argument and prints the output file path on stdout.
//! * http: the input payload is POSTed as the request body and the result
//!   payload is the response body.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Transport {
    Subprocess { command: Vec<String> },
    Http { url: String },
}

impl Transport {
    /// `http://…` / `https://…` selects HTTP; anything else is a command
    /// line (an optional `subprocess:` prefix is stripped).
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(Transport::Http { url: spec.to_string() });
        }
        let cmd = spec.strip_prefix("subprocess:").unwrap_or(spec);
        let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        if command.is_empty() {
            return Err(Error::validation("transport", "empty plugin command"));
        }
        Ok(Transport::Subprocess { command })
    }

    pub fn describe(&self) -> String {
        match self {
            Transport::Subprocess { command } => command.join(" "),
            Transport::Http { url } => url.clone(),
        }
    }
}

/// Runs `command [extra..] input_path`, enforcing `timeout`, and returns trimmed stdout.
pub fn run_subprocess(command: &[String], extra: &[String], timeout: Duration) -> Result<String> {
    let name = command.join(" ");
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::validation("transport", "empty plugin command"))?;
    let mut child = Command::new(program)
        .args(args)
        .args(extra)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Plugin {
            endpoint: name.clone(),
            reason: format!("spawn failed: {e}"),
        })?;
    let mut stdout = child.stdout.take().expect("piped");
    let mut stderr = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stdout.read_to_string(&mut s);
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });
    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait().map_err(|e| Error::Plugin {
            endpoint: name.clone(),
            reason: e.to_string(),
        })? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::PluginTimeout {
                endpoint: name,
                seconds: timeout.as_secs_f64(),
            });
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let out = out_reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(Error::Plugin {
            endpoint: name,
            reason: format!("exited with {status}: {}", err.trim()),
        });
    }
    Ok(out.trim().to_string())
}

/// Sends `payload` through the transport and returns the provider's result bytes.
pub fn exchange(transport: &Transport, payload: &[u8], suffix: &str, timeout: Duration) -> Result<Vec<u8>> {
    match transport {
        Transport::Subprocess { command } => {
            let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            let input = dir.path().join(format!("input{suffix}"));
            std::fs::write(&input, payload).map_err(|e| Error::io(&input, e))?;
            let out = run_subprocess(command, &[input.display().to_string()], timeout)?;
            let path = out.lines().last().map(PathBuf::from).ok_or_else(|| Error::Protocol {
                endpoint: transport.describe(),
                reason: "provider printed no output path".into(),
            })?;
            std::fs::read(&path).map_err(|e| Error::Protocol {
                endpoint: transport.describe(),
                reason: format!("cannot read output {}: {e}", path.display()),
            })
        }
        Transport::Http { url } => {
            let agent = ureq::AgentBuilder::new().timeout(timeout).build();
            let resp = agent
                .post(url)
                .set("Content-Type", "application/octet-stream")
                .send_bytes(payload);
            match resp {
                Ok(r) => {
                    let mut body = Vec::new();
                    r.into_reader()
                        .take(1 << 28)
                        .read_to_end(&mut body)
                        .map_err(|e| transport_io_error(url, timeout, e))?;
                    Ok(body)
                }
                Err(ureq::Error::Status(code, _)) => Err(Error::Plugin {
                    endpoint: url.clone(),
                    reason: format!("HTTP status {code}"),
                }),
                Err(ureq::Error::Transport(t)) => {
                    let msg = t.to_string();
                    if msg.contains("timed out") || msg.contains("Timeout") {
                        Err(Error::PluginTimeout {
                            endpoint: url.clone(),
                            seconds: timeout.as_secs_f64(),
                        })
                    } else {
                        Err(Error::Plugin {
                            endpoint: url.clone(),
                            reason: msg,
                        })
                    }
                }
            }
        }
    }
}

fn transport_io_error(url: &str, timeout: Duration, e: std::io::Error) -> Error {
    if matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
        Error::PluginTimeout {
            endpoint: url.to_string(),
            seconds: timeout.as_secs_f64(),
        }
    } else {
        Error::Plugin {
            endpoint: url.to_string(),
            reason: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_transports() {
        assert_eq!(
            Transport::parse("http://localhost:9/seg").unwrap(),
            Transport::Http { url: "http://localhost:9/seg".into() }
        );
        assert_eq!(
            Transport::parse("subprocess:python3 sam.py").unwrap(),
            Transport::Subprocess { command: vec!["python3".into(), "sam.py".into()] }
        );
        assert!(Transport::parse("  ").is_err());
    }

    #[test]
    fn subprocess_timeout_is_retryable() {
        let err = run_subprocess(&["sleep".into(), "5".into()], &[], Duration::from_millis(100)).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn subprocess_failure_reports_status() {
        let err = run_subprocess(&["false".into()], &[], Duration::from_secs(5)).unwrap_err();
        assert!(matches!(err, Error::Plugin { .. }));
    }
}
