//! Handler IR: a small interpreted model of a request-serving program.
//!
//! A program is a set of functions made of labelled basic blocks. One
//! function has the `entry` role and receives every request; it usually
//! runs access-control checks and then calls `sub` handlers that perform
//! the requested task (which may run task-specific checks of their own).
//!
//! Text form:
//!
//! ```text
//! # static file server
//! fn handle_request entry -> access_status {
//! start:
//!     check access directive_match via ap_check_access ? serve : forbidden
//! serve:
//!     log result(access)
//!     call send_file
//!     return $
//! forbidden:
//!     log result(access)
//!     return 403
//! }
//!
//! fn send_file sub -> access_status {
//! open:
//!     check file_read file_perm(READ) via file_open ? send : denied
//! send:
//!     log result(file_read)
//!     io 1000 read object
//!     return 200
//! denied:
//!     log result(file_read)
//!     return 403
//! }
//! ```
//!
//! Statements: `call F`, `io UNITS [read|write] (object|/path)`,
//! `log (allow|deny|result(CHECK))`. Terminators: `goto L`,
//! `check ID PRED [via TAG] [-> TYPE] ? ALLOW : DENY`,
//! `branch PRED ? THEN : ELSE`, `probe ID PRED via TAG -> TYPE => L`,
//! `return (CODE|$)`. `$` returns the last callee's code.
//!
//! Predicates: `directive_match`, `file_perm(READ|WRITE)`,
//! `user_in_table(T)`, `ip_in(CIDR)`, `method_is(VERB)`, `object_exists`
//! and `nondet(BIT)` (branches only; reads a bit of the run's entropy).

mod cfg;
mod interp;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acdl::Cidr;
use crate::datastate::Need;
use crate::reqgen::Action;

pub use cfg::{trace_run, trace_run_with, CheckInfo, DynCfg, DynNode, NodeKey};
pub use interp::{interpret, interpret_with, trace_cost, RunOptions, RunResult, TraceEntry};
pub use parse::parse_ir;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HirError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid program: {0}")]
    Validation(String),
    #[error("step budget of {0} exceeded")]
    StepBudgetExceeded(usize),
    #[error("predicate error in {func}/{block}: {message}")]
    Predicate {
        func: String,
        block: String,
        message: String,
    },
    #[error("run finished without logging an access decision")]
    NoDecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Entry,
    Sub,
    Helper,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Entry => "entry",
            Role::Sub => "sub",
            Role::Helper => "helper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    DirectiveMatch,
    FilePerm(Need),
    UserInTable(String),
    IpIn(Cidr),
    MethodIs(Action),
    ObjectExists,
    Nondet(u8),
}

impl Predicate {
    pub fn name(&self) -> &'static str {
        match self {
            Predicate::DirectiveMatch => "directive_match",
            Predicate::FilePerm(_) => "file_perm",
            Predicate::UserInTable(_) => "user_in_table",
            Predicate::IpIn(_) => "ip_in",
            Predicate::MethodIs(_) => "method_is",
            Predicate::ObjectExists => "object_exists",
            Predicate::Nondet(_) => "nondet",
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::DirectiveMatch => f.write_str("directive_match"),
            Predicate::FilePerm(Need::Read) => f.write_str("file_perm(READ)"),
            Predicate::FilePerm(Need::Write) => f.write_str("file_perm(WRITE)"),
            Predicate::UserInTable(t) => write!(f, "user_in_table({t})"),
            Predicate::IpIn(c) => write!(f, "ip_in({c})"),
            Predicate::MethodIs(a) => write!(f, "method_is({a})"),
            Predicate::ObjectExists => f.write_str("object_exists"),
            Predicate::Nondet(b) => write!(f, "nondet({b})"),
        }
    }
}

/// An access-control check site with the tags static analysis matches on:
/// the name of the check routine and the type it returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckSite {
    pub id: String,
    pub predicate: Predicate,
    pub fn_name_tag: String,
    pub return_type_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathExpr {
    Object,
    Literal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoMode {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogExpr {
    Allow,
    Deny,
    /// Whatever the named check (or its probe) last evaluated to.
    Result(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Call(String),
    Io {
        units: u64,
        mode: IoMode,
        target: PathExpr,
    },
    Log(LogExpr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnCode {
    Literal(u16),
    Callee,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    Goto(String),
    Check {
        site: CheckSite,
        allow: String,
        deny: String,
    },
    Branch {
        cond: Predicate,
        then: String,
        otherwise: String,
    },
    /// A rewritten check: evaluates and logs, then always jumps.
    Probe { site: CheckSite, jump: String },
    Return(ReturnCode),
}

impl Terminator {
    pub fn successors(&self) -> Vec<&str> {
        match self {
            Terminator::Goto(l) => vec![l],
            Terminator::Check { allow, deny, .. } => vec![allow, deny],
            Terminator::Branch {
                then, otherwise, ..
            } => vec![then, otherwise],
            Terminator::Probe { jump, .. } => vec![jump],
            Terminator::Return(_) => vec![],
        }
    }

    pub fn check_site(&self) -> Option<&CheckSite> {
        match self {
            Terminator::Check { site, .. } | Terminator::Probe { site, .. } => Some(site),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub stmts: Vec<Stmt>,
    pub term: Terminator,
}

impl BasicBlock {
    pub fn calls(&self) -> impl Iterator<Item = &str> {
        self.stmts.iter().filter_map(|s| match s {
            Stmt::Call(f) => Some(f.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrFunction {
    pub name: String,
    pub role: Role,
    pub return_type_tag: String,
    pub blocks: Vec<BasicBlock>,
}

impl IrFunction {
    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }
}

/// A validated program. Functions keep their textual order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrProgram {
    functions: Vec<IrFunction>,
    index: BTreeMap<String, usize>,
    entry: String,
}

impl IrProgram {
    /// Validates and assembles a program.
    pub fn new(functions: Vec<IrFunction>) -> Result<Self, HirError> {
        let invalid = |m: String| Err(HirError::Validation(m));
        if functions.is_empty() {
            return invalid("program has no functions".into());
        }
        let mut index = BTreeMap::new();
        for (i, f) in functions.iter().enumerate() {
            if index.insert(f.name.clone(), i).is_some() {
                return invalid(format!("duplicate function {:?}", f.name));
            }
        }
        let entries: Vec<&IrFunction> = functions.iter().filter(|f| f.role == Role::Entry).collect();
        let entry = match entries.as_slice() {
            [e] => e.name.clone(),
            [] => return invalid("no function has the entry role".into()),
            many => {
                return invalid(format!(
                    "{} functions have the entry role; exactly one is allowed",
                    many.len()
                ))
            }
        };

        let mut check_ids = BTreeSet::new();
        for f in &functions {
            for b in &f.blocks {
                if let Some(site) = b.term.check_site() {
                    if !check_ids.insert(site.id.clone()) {
                        return invalid(format!("duplicate check id {:?}", site.id));
                    }
                }
            }
        }

        for f in &functions {
            if f.blocks.is_empty() {
                return invalid(format!("function {:?} has no blocks", f.name));
            }
            let mut labels = BTreeSet::new();
            for b in &f.blocks {
                if !labels.insert(b.label.as_str()) {
                    return invalid(format!("duplicate label {:?} in {:?}", b.label, f.name));
                }
            }
            for b in &f.blocks {
                for target in b.term.successors() {
                    if !labels.contains(target) {
                        return invalid(format!(
                            "{}/{} jumps to unknown label {target:?}",
                            f.name, b.label
                        ));
                    }
                }
                if let Some(site) = b.term.check_site() {
                    if matches!(site.predicate, Predicate::Nondet(_)) {
                        return invalid(format!(
                            "check {:?} uses nondet, which is only allowed in branches",
                            site.id
                        ));
                    }
                }
                for s in &b.stmts {
                    match s {
                        Stmt::Call(callee) if !index.contains_key(callee) => {
                            return invalid(format!(
                                "{}/{} calls undefined function {callee:?}",
                                f.name, b.label
                            ))
                        }
                        Stmt::Call(callee) if *callee == entry => {
                            return invalid(format!(
                                "{}/{} calls the entry function",
                                f.name, b.label
                            ))
                        }
                        Stmt::Log(LogExpr::Result(id)) if !check_ids.contains(id) => {
                            return invalid(format!(
                                "{}/{} logs the result of unknown check {id:?}",
                                f.name, b.label
                            ))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(IrProgram {
            functions,
            index,
            entry,
        })
    }

    pub fn parse(text: &str) -> Result<Self, HirError> {
        parse_ir(text)
    }

    pub fn entry(&self) -> &str {
        &self.entry
    }

    pub fn functions(&self) -> &[IrFunction] {
        &self.functions
    }

    pub fn function(&self, name: &str) -> Option<&IrFunction> {
        self.index.get(name).map(|&i| &self.functions[i])
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.function(name).map(|f| f.role)
    }

    /// Every check and probe site as `(function, block, site)`.
    pub fn check_sites(&self) -> impl Iterator<Item = (&str, &str, &CheckSite)> {
        self.functions.iter().flat_map(|f| {
            f.blocks.iter().filter_map(move |b| {
                b.term
                    .check_site()
                    .map(|s| (f.name.as_str(), b.label.as_str(), s))
            })
        })
    }

    /// Applies `edit` to a copy of the functions and re-validates.
    pub fn rewrite(
        &self,
        edit: impl FnOnce(&mut Vec<IrFunction>) -> Result<(), HirError>,
    ) -> Result<Self, HirError> {
        let mut functions = self.functions.clone();
        edit(&mut functions)?;
        IrProgram::new(functions)
    }
}

impl fmt::Display for IrProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, func) in self.functions.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(
                f,
                "fn {} {} -> {} {{",
                func.name, func.role, func.return_type_tag
            )?;
            for b in &func.blocks {
                writeln!(f, "{}:", b.label)?;
                for s in &b.stmts {
                    match s {
                        Stmt::Call(c) => writeln!(f, "    call {c}")?,
                        Stmt::Io {
                            units,
                            mode,
                            target,
                        } => {
                            let mode = match mode {
                                IoMode::Read => "read",
                                IoMode::Write => "write",
                            };
                            let target = match target {
                                PathExpr::Object => "object",
                                PathExpr::Literal(p) => p,
                            };
                            writeln!(f, "    io {units} {mode} {target}")?
                        }
                        Stmt::Log(LogExpr::Allow) => writeln!(f, "    log allow")?,
                        Stmt::Log(LogExpr::Deny) => writeln!(f, "    log deny")?,
                        Stmt::Log(LogExpr::Result(id)) => writeln!(f, "    log result({id})")?,
                    }
                }
                match &b.term {
                    Terminator::Goto(l) => writeln!(f, "    goto {l}")?,
                    Terminator::Check { site, allow, deny } => writeln!(
                        f,
                        "    check {} {} via {} -> {} ? {allow} : {deny}",
                        site.id, site.predicate, site.fn_name_tag, site.return_type_tag
                    )?,
                    Terminator::Branch {
                        cond,
                        then,
                        otherwise,
                    } => writeln!(f, "    branch {cond} ? {then} : {otherwise}")?,
                    Terminator::Probe { site, jump } => writeln!(
                        f,
                        "    probe {} {} via {} -> {} => {jump}",
                        site.id, site.predicate, site.fn_name_tag, site.return_type_tag
                    )?,
                    Terminator::Return(ReturnCode::Literal(c)) => writeln!(f, "    return {c}")?,
                    Terminator::Return(ReturnCode::Callee) => writeln!(f, "    return $")?,
                }
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}
