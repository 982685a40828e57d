//! Change-impact engine: run a corpus under the old and new environment,
//! diff the decisions, confirm, aggregate and triage.

mod aggregate;
mod corpus;
mod report;
mod triage;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acdl::{AcConfig, Decision};
use crate::datastate::{normalize_path, DataState, FileEntry, OverlayStore, PathError, Perms};
use crate::hir::IrProgram;
use crate::reqgen::{Action, Request, Subject};

pub use aggregate::{aggregate, AggregateEntry, AggregateKey};
pub use corpus::{
    run_corpus, run_corpus_with, CorpusRun, Outcome, ScheduleEvent, SchedulePhase,
};
pub use report::{ImpactReport, TriagedEntry};
pub use triage::{triage, RuleParseError, RuleSet, Severity};
pub use aggregate::suffix_of;
pub use report::Summary;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImpactError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("chmod target {0:?} does not exist in the old data")]
    ChmodMissing(String),
}

/// One edit to the production data that ships with a change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DataChange {
    AddFile {
        path: String,
        #[serde(flatten)]
        entry: FileEntry,
    },
    RemoveFile {
        path: String,
    },
    Chmod {
        path: String,
        perms: Perms,
    },
}

impl DataChange {
    pub fn path(&self) -> &str {
        match self {
            DataChange::AddFile { path, .. }
            | DataChange::RemoveFile { path }
            | DataChange::Chmod { path, .. } => path,
        }
    }

    fn normalized(mut self) -> Result<Self, PathError> {
        let p = match &mut self {
            DataChange::AddFile { path, .. }
            | DataChange::RemoveFile { path }
            | DataChange::Chmod { path, .. } => path,
        };
        *p = normalize_path(p)?;
        Ok(self)
    }

    fn apply(&self, store: &OverlayStore) -> Result<(), ImpactError> {
        match self {
            DataChange::AddFile { path, entry } => store.write(path, entry.clone()),
            DataChange::RemoveFile { path } => store.remove(path),
            DataChange::Chmod { path, perms } => {
                let mut e = store
                    .read(path)
                    .ok_or_else(|| ImpactError::ChmodMissing(path.clone()))?;
                e.perms = *perms;
                store.write(path, e);
            }
        }
        Ok(())
    }
}

/// A configuration change plus the data edits that come with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeSpec {
    pub config_old: AcConfig,
    pub config_new: AcConfig,
    pub data_delta: Vec<DataChange>,
}

impl ChangeSpec {
    /// Builds a change with normalized delta paths.
    pub fn new(
        config_old: AcConfig,
        config_new: AcConfig,
        data_delta: Vec<DataChange>,
    ) -> Result<Self, ImpactError> {
        let data_delta = data_delta
            .into_iter()
            .map(DataChange::normalized)
            .collect::<Result<_, _>>()?;
        Ok(ChangeSpec {
            config_old,
            config_new,
            data_delta,
        })
    }

    /// The same change with old and new swapped. Only meaningful without
    /// a data delta.
    pub fn reversed(&self) -> Self {
        ChangeSpec {
            config_old: self.config_new.clone(),
            config_new: self.config_old.clone(),
            data_delta: self.data_delta.clone(),
        }
    }

    /// Checks the delta against the old data: chmod targets must exist.
    pub fn validate(&self, lower: &DataState) -> Result<(), ImpactError> {
        let added: Vec<&str> = self
            .data_delta
            .iter()
            .filter_map(|d| match d {
                DataChange::AddFile { path, .. } => Some(path.as_str()),
                _ => None,
            })
            .collect();
        for d in &self.data_delta {
            if let DataChange::Chmod { path, .. } = d {
                if !lower.files.contains_key(path) && !added.contains(&path.as_str()) {
                    return Err(ImpactError::ChmodMissing(path.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn old_store(&self, lower: &Arc<DataState>) -> OverlayStore {
        OverlayStore::new(Arc::clone(lower))
    }

    /// A fresh overlay with the data delta applied.
    pub fn new_store(&self, lower: &Arc<DataState>) -> Result<OverlayStore, ImpactError> {
        let store = OverlayStore::new(Arc::clone(lower));
        for d in &self.data_delta {
            d.apply(&store)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    DenyToAllow,
    AllowToDeny,
}

/// A request whose decision differs between the old and new environment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImpactTuple {
    pub subject: Subject,
    pub object: String,
    pub action: Action,
    pub source_ip: Ipv4Addr,
    pub r_old: Decision,
    pub r_new: Decision,
    /// The object only exists after the change.
    #[serde(default)]
    pub object_new: bool,
}

impl ImpactTuple {
    pub fn request(&self) -> Request {
        Request {
            subject: self.subject.clone(),
            object: self.object.clone(),
            action: self.action,
            source_ip: self.source_ip,
        }
    }

    pub fn direction(&self) -> Direction {
        if self.r_new.is_allow() {
            Direction::DenyToAllow
        } else {
            Direction::AllowToDeny
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestFailure {
    pub request: Request,
    /// `old` or `new`.
    pub environment: String,
    pub error: String,
}

/// Impacts of one change, plus requests that could not be evaluated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpactRun {
    pub impacts: Vec<ImpactTuple>,
    pub failures: Vec<RequestFailure>,
}

/// Runs `requests` under the old and the new environment and keeps the
/// ones whose decision flips. Objects that only exist after the change
/// count as denied before it.
pub fn compute_impact(
    prog: &IrProgram,
    change: &ChangeSpec,
    lower: &Arc<DataState>,
    requests: &[Request],
    workers: usize,
) -> Result<ImpactRun, ImpactError> {
    change.validate(lower)?;
    let old_store = change.old_store(lower);
    let new_store = change.new_store(lower)?;
    let is_new = |o: &str| !old_store.exists(o) && new_store.exists(o);
    let new_objects: BTreeMap<&str, bool> = requests
        .iter()
        .map(|r| (r.object.as_str(), is_new(&r.object)))
        .collect();

    let old = run_corpus(prog, &change.config_old, &old_store, requests, workers);
    let new = run_corpus(prog, &change.config_new, &new_store, requests, workers);

    let mut run = ImpactRun::default();
    for (req, old_outcome) in &old.outcomes {
        let new_outcome = &new.outcomes[req];
        let object_new = new_objects[req.object.as_str()];
        let r_old = match old_outcome {
            _ if object_new => Decision::Deny,
            Ok(o) => o.decision,
            Err(e) => {
                run.failures.push(RequestFailure {
                    request: req.clone(),
                    environment: "old".into(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        let r_new = match new_outcome {
            Ok(o) => o.decision,
            Err(e) => {
                run.failures.push(RequestFailure {
                    request: req.clone(),
                    environment: "new".into(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        if r_old != r_new {
            run.impacts.push(ImpactTuple {
                subject: req.subject.clone(),
                object: req.object.clone(),
                action: req.action,
                source_ip: req.source_ip,
                r_old,
                r_new,
                object_new,
            });
        }
    }
    run.impacts.sort();
    Ok(run)
}

/// Second-round check: re-runs the impacted requests on the full
/// (untrimmed) program and keeps the tuples whose flip reproduces.
pub fn confirm_impacts(
    prog_full: &IrProgram,
    impacts: &[ImpactTuple],
    change: &ChangeSpec,
    lower: &Arc<DataState>,
    workers: usize,
) -> Result<ImpactRun, ImpactError> {
    let requests: Vec<Request> = impacts.iter().map(ImpactTuple::request).collect();
    let rerun = compute_impact(prog_full, change, lower, &requests, workers)?;
    let mut confirmed: Vec<ImpactTuple> = impacts
        .iter()
        .filter(|t| {
            rerun
                .impacts
                .binary_search_by(|c| c.cmp(t))
                .is_ok()
        })
        .cloned()
        .collect();
    confirmed.sort();
    confirmed.dedup();
    Ok(ImpactRun {
        impacts: confirmed,
        failures: rerun.failures,
    })
}
