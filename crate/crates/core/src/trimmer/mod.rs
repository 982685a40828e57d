//! Program trimming.
//!
//! The pipeline takes tuples ⟨request, allowing config, denying config⟩,
//! runs each side, diffs the two dynamic CFGs to find the check that
//! decides the request ([`find_final_acc`]), completes and prunes that set
//! with static analysis over lazily expanded functions
//! ([`find_final_accs`]), and rewrites each final check into a probe that
//! records the decision and always takes the deny branch
//! ([`trim_advanced`]). [`trim_strawman`] is the naive alternative that
//! drops sub-handler calls altogether.

mod analysis;
mod diff;
mod rewrite;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acdl::AcConfig;
use crate::datastate::OverlayStore;
use crate::hir::{trace_run_with, CheckInfo, DynCfg, HirError, IrProgram, NodeKey, RunOptions};
use crate::reqgen::Request;

pub use analysis::{
    backward_analysis, find_final_accs, forward_analysis, AccTags, ExpandedCfg,
};
pub use diff::{diff_cfg, divergence, find_final_acc, Color, MergedCfg, MergedNode};
pub use rewrite::{trim_advanced, trim_strawman};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrimError {
    #[error("invalid trace tuple: {0}")]
    InvalidTuple(String),
    #[error("the two CFGs start at different entry nodes ({0} vs {1})")]
    DisjointCfgs(String, String),
    #[error("no node diverges into an allow-only and a deny-only branch")]
    NoCandidates,
    #[error("the largest divergence is at {0}, which is not an access-control check")]
    NoAccFound(String),
    #[error("static analysis deleted every candidate check")]
    EmptyResult,
    #[error("unknown access-control check {0}")]
    UnknownAcc(String),
    #[error(transparent)]
    Hir(#[from] HirError),
}

/// A request with one configuration that allows it and one that denies it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceTuple {
    pub request: Request,
    pub cfg_allow: AcConfig,
    pub cfg_deny: AcConfig,
}

/// On-disk form of a trace tuple; config paths are relative to the file
/// that lists them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceTupleSpec {
    pub request: Request,
    pub cfg_allow_path: PathBuf,
    pub cfg_deny_path: PathBuf,
}

/// A check site in the program, with the tags static analysis matches on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "AccRecord", into = "AccRecord")]
pub struct AccRef {
    pub function: String,
    pub block: String,
    pub check_id: String,
    pub fn_name_tag: String,
    pub return_type_tag: String,
}

#[derive(Serialize, Deserialize)]
struct AccRecord {
    function: String,
    block: String,
    check_id: String,
    tags: AccRecordTags,
}

#[derive(Serialize, Deserialize)]
struct AccRecordTags {
    fn_name: String,
    return_type: String,
}

impl From<AccRecord> for AccRef {
    fn from(r: AccRecord) -> Self {
        AccRef {
            function: r.function,
            block: r.block,
            check_id: r.check_id,
            fn_name_tag: r.tags.fn_name,
            return_type_tag: r.tags.return_type,
        }
    }
}

impl From<AccRef> for AccRecord {
    fn from(a: AccRef) -> Self {
        AccRecord {
            function: a.function,
            block: a.block,
            check_id: a.check_id,
            tags: AccRecordTags {
                fn_name: a.fn_name_tag,
                return_type: a.return_type_tag,
            },
        }
    }
}

impl AccRef {
    pub fn from_check(key: &NodeKey, info: &CheckInfo) -> Self {
        AccRef {
            function: key.func.clone(),
            block: key.block.clone(),
            check_id: info.check_id.clone(),
            fn_name_tag: info.fn_name_tag.clone(),
            return_type_tag: info.return_type_tag.clone(),
        }
    }

    /// Every check site of `prog`, in program order.
    pub fn all_in(prog: &IrProgram) -> Vec<AccRef> {
        prog.check_sites()
            .map(|(f, b, s)| AccRef {
                function: f.to_string(),
                block: b.to_string(),
                check_id: s.id.clone(),
                fn_name_tag: s.fn_name_tag.clone(),
                return_type_tag: s.return_type_tag.clone(),
            })
            .collect()
    }

    pub fn key(&self) -> NodeKey {
        NodeKey::new(&self.function, &self.block)
    }
}

impl fmt::Display for AccRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}/{}", self.check_id, self.function, self.block)
    }
}

/// The final access-control checks of a program.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccSet {
    pub finals: BTreeSet<AccRef>,
}

impl AccSet {
    pub fn contains_check(&self, check_id: &str) -> bool {
        self.finals.iter().any(|a| a.check_id == check_id)
    }

    pub fn check_ids(&self) -> BTreeSet<&str> {
        self.finals.iter().map(|a| a.check_id.as_str()).collect()
    }
}

pub fn run_pair(
    prog: &IrProgram,
    tuple: &TraceTuple,
    store: &OverlayStore,
) -> Result<(DynCfg, DynCfg), TrimError> {
    run_pair_with(prog, tuple, store, &RunOptions::default(), &RunOptions::default())
}

/// Traces the request under both configurations, resetting the overlay
/// before each run. The allowing side must log ALLOW and the denying side
/// DENY.
pub fn run_pair_with(
    prog: &IrProgram,
    tuple: &TraceTuple,
    store: &OverlayStore,
    allow_opts: &RunOptions,
    deny_opts: &RunOptions,
) -> Result<(DynCfg, DynCfg), TrimError> {
    if tuple.cfg_allow == tuple.cfg_deny {
        return Err(TrimError::InvalidTuple(format!(
            "{}: allowing and denying configurations are identical",
            tuple.request
        )));
    }
    store.reset();
    let (ra, a) = trace_run_with(prog, &tuple.request, &tuple.cfg_allow, store, allow_opts)?;
    store.reset();
    let (rd, d) = trace_run_with(prog, &tuple.request, &tuple.cfg_deny, store, deny_opts)?;
    store.reset();
    if !ra.decision.is_allow() {
        return Err(TrimError::InvalidTuple(format!(
            "{}: the allowing configuration denies it",
            tuple.request
        )));
    }
    if rd.decision.is_allow() {
        return Err(TrimError::InvalidTuple(format!(
            "{}: the denying configuration allows it",
            tuple.request
        )));
    }
    Ok((a, d))
}

/// The full trimming pipeline: CFG-diff on every tuple, then static
/// completion. Returns the final checks and the per-tuple results.
pub fn find_final_accs_for(
    prog: &IrProgram,
    tuples: &[TraceTuple],
    store: &OverlayStore,
) -> Result<(AccSet, Vec<(AccRef, MergedCfg)>), TrimError> {
    let mut pairs = Vec::with_capacity(tuples.len());
    for t in tuples {
        let (a, d) = run_pair(prog, t, store)?;
        pairs.push(find_final_acc(&a, &d)?);
    }
    let finals = find_final_accs(&pairs, prog)?;
    Ok((finals, pairs))
}
