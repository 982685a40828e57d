//! Test requests: the subject/object/action tuples, access-log replay and
//! Cartesian-product synthesis.

mod log;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastate::{normalize_path, PathError};

pub use log::{parse_access_log, parse_log_line, resolve_groups, LogParse, RejectedLine};
pub use synth::{
    change_related_objects, representative_ips, subjects_from_table, synthesize, ObjectSource, Scope, SubjectSource,
    SynthesisSpec,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReqGenError {
    #[error("no line of the access log could be parsed ({rejected} rejected)")]
    AllRejected { rejected: usize },
    #[error("empty {0} source")]
    EmptySource(&'static str),
    #[error("unknown subject table {0:?}")]
    UnknownTable(String),
    #[error(transparent)]
    Path(#[from] PathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Get,
    Put,
    Post,
    Delete,
    Trace,
    Edit,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Get,
        Action::Put,
        Action::Post,
        Action::Delete,
        Action::Trace,
        Action::Edit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Get => "GET",
            Action::Put => "PUT",
            Action::Post => "POST",
            Action::Delete => "DELETE",
            Action::Trace => "TRACE",
            Action::Edit => "EDIT",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown action {s:?}"))
    }
}

/// The requester. `name == None` is the anonymous subject, which never
/// belongs to a group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Subject {
    name: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    groups: BTreeSet<String>,
}

impl Subject {
    pub fn anonymous() -> Self {
        Subject {
            name: None,
            groups: BTreeSet::new(),
        }
    }

    pub fn user<I, S>(name: impl Into<String>, groups: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Subject {
            name: Some(name.into()),
            groups: groups.into_iter().map(Into::into).collect(),
        }
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn is_anonymous(&self) -> bool {
        self.name.is_none()
    }

    pub fn groups(&self) -> &BTreeSet<String> {
        &self.groups
    }

    pub fn in_group(&self, group: &str) -> bool {
        self.groups.contains(group)
    }

    /// Display label; `-` for anonymous, as in access logs.
    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or("-")
    }

    fn sanitize(mut self) -> Self {
        if self.name.is_none() {
            self.groups.clear();
        }
        self
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawRequest")]
pub struct Request {
    pub subject: Subject,
    pub object: String,
    pub action: Action,
    pub source_ip: Ipv4Addr,
}

#[derive(Deserialize)]
struct RawRequest {
    subject: Subject,
    object: String,
    action: Action,
    source_ip: Ipv4Addr,
}

impl TryFrom<RawRequest> for Request {
    type Error = PathError;

    fn try_from(raw: RawRequest) -> Result<Self, Self::Error> {
        Request::new(raw.subject, &raw.object, raw.action, raw.source_ip)
    }
}

impl Request {
    /// Builds a request, normalizing the object path.
    pub fn new(
        subject: Subject,
        object: &str,
        action: Action,
        source_ip: Ipv4Addr,
    ) -> Result<Self, PathError> {
        Ok(Request {
            subject: subject.sanitize(),
            object: normalize_path(object)?,
            action,
            source_ip,
        })
    }

    /// Key for the per-requester ordering rule: requests sharing it are
    /// never run concurrently.
    pub fn order_key(&self) -> (Option<&str>, Ipv4Addr) {
        (self.subject.name(), self.source_ip)
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<{}, {}, {}, {}>",
            self.subject, self.object, self.action, self.source_ip
        )
    }
}
