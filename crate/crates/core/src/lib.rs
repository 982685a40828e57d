//! Shadow testing of access-control configuration changes.
//!
//! A request corpus runs against a modelled server program under the old
//! and the new configuration, inside copy-on-write overlays over the
//! production data, and every request whose ALLOW/DENY outcome flips is
//! reported, aggregated and triaged. The [`trimmer`] speeds this up by
//! rewriting the program's final access-control checks so that requests
//! skip the expensive task once their decision is known.

pub mod acdl;
pub mod datastate;
pub mod fixtures;
pub mod hir;
pub mod impact;
pub mod reqgen;
pub mod trimmer;

pub use acdl::{match_directives, parse_config, AcConfig, AcdlError, Cidr, Decision};
pub use datastate::{
    file_perm_check, normalize_path, DataError, DataState, FileEntry, Need, OverlayStore,
    PathError, Perms,
};
pub use hir::{
    interpret, trace_run, DynCfg, HirError, IrProgram, NodeKey, RunOptions, RunResult,
};
pub use impact::{
    aggregate, compute_impact, confirm_impacts, run_corpus, triage, AggregateEntry,
    AggregateKey, ChangeSpec, DataChange, Direction, ImpactError, ImpactReport, ImpactRun,
    ImpactTuple, RuleSet, Severity,
};
pub use reqgen::{
    parse_access_log, synthesize, Action, ReqGenError, Request, Subject, SynthesisSpec,
};
pub use trimmer::{
    diff_cfg, find_final_acc, find_final_accs, run_pair, trim_advanced, trim_strawman, AccRef,
    AccSet, MergedCfg, TraceTuple, TrimError,
};
