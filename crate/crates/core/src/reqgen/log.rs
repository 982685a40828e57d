//! Access-log replay.
//!
//! Accepted line shapes (Common Log Format positions):
//!
//! ```text
//! 10.0.0.5 alice [10/Oct/2023:13:55:36 +0000] "GET /index.html HTTP/1.1" 200
//! 10.0.0.5 - alice [10/Oct/2023:13:55:36 +0000] "GET /index.html HTTP/1.1" 200 512
//! ```
//!
//! A `-` user is the anonymous subject; a `-` host maps to `0.0.0.0`.
//! Trailing fields after the status are ignored.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{Action, ReqGenError, Request, Subject};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LogParse {
    pub requests: Vec<Request>,
    pub rejected: Vec<RejectedLine>,
}

/// Parses every line; malformed lines are collected, not fatal. Blank lines
/// are skipped silently.
pub fn parse_access_log<I, S>(lines: I) -> Result<LogParse, ReqGenError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = LogParse::default();
    for (idx, line) in lines.into_iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        match parse_log_line(line) {
            Ok(r) => out.requests.push(r),
            Err(reason) => out.rejected.push(RejectedLine {
                line: idx + 1,
                text: line.to_string(),
                reason,
            }),
        }
    }
    if out.requests.is_empty() {
        return Err(ReqGenError::AllRejected {
            rejected: out.rejected.len(),
        });
    }
    Ok(out)
}

/// Logs only carry user names; fills in group memberships from `known`
/// subjects (e.g. a users table). Unknown users keep no groups.
pub fn resolve_groups(requests: &mut [Request], known: &[Subject]) {
    for r in requests {
        if let Some(s) = r.subject.name().and_then(|n| known.iter().find(|k| k.name() == Some(n))) {
            r.subject = s.clone();
        }
    }
}

pub fn parse_log_line(line: &str) -> Result<Request, String> {
    let open = line.find('[').ok_or("missing `[timestamp]`")?;
    let close = open + line[open..].find(']').ok_or("unterminated timestamp")?;
    let head: Vec<&str> = line[..open].split_whitespace().collect();
    let (host, user) = match head.as_slice() {
        [host, user] => (*host, *user),
        [host, _ident, user] => (*host, *user),
        _ => return Err(format!("expected `host user` before timestamp, got {} fields", head.len())),
    };

    let rest = &line[close + 1..];
    let q1 = rest.find('"').ok_or("missing request line")?;
    let q2 = q1 + 1 + rest[q1 + 1..].find('"').ok_or("unterminated request line")?;
    let request_line: Vec<&str> = rest[q1 + 1..q2].split_whitespace().collect();
    let (verb, path) = match request_line.as_slice() {
        [verb, path, proto] if proto.starts_with("HTTP/") => (*verb, *path),
        [verb, path] => (*verb, *path),
        _ => return Err("malformed request line".into()),
    };
    let status = rest[q2 + 1..]
        .split_whitespace()
        .next()
        .ok_or("missing status")?;
    status
        .parse::<u16>()
        .map_err(|_| format!("invalid status {status:?}"))?;

    let source_ip = if host == "-" {
        Ipv4Addr::UNSPECIFIED
    } else {
        host.parse::<Ipv4Addr>()
            .map_err(|_| format!("invalid IPv4 host {host:?}"))?
    };
    let subject = if user == "-" {
        Subject::anonymous()
    } else {
        Subject::user(user, Vec::<String>::new())
    };
    let action: Action = verb.parse()?;
    // Query strings are not part of the object.
    let path = path.split(['?', '#']).next().unwrap_or(path);
    if !path.starts_with('/') {
        return Err(format!("request path must be absolute: {path:?}"));
    }
    Request::new(subject, path, action, source_ip).map_err(|e| e.to_string())
}
