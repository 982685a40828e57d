use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{
    HirError, IoMode, IrProgram, LogExpr, PathExpr, Predicate, ReturnCode, Stmt, Terminator,
};
use crate::acdl::{match_directives, AcConfig, Decision};
use crate::datastate::{file_perm_check, OverlayStore};
use crate::reqgen::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Source of `nondet(BIT)` branch outcomes.
    pub entropy: u64,
    /// Maximum number of block entries (including resumptions after calls).
    pub step_budget: usize,
    pub max_call_depth: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            entropy: 0,
            step_budget: 100_000,
            max_call_depth: 256,
        }
    }
}

/// One block entry. `resume` is the statement index execution started at:
/// 0 on a fresh entry, the statement after the call when a callee returns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    #[serde(rename = "fn")]
    pub func: String,
    pub block: String,
    pub seq: usize,
    #[serde(default)]
    pub resume: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    /// The last logged decision.
    pub decision: Decision,
    pub return_code: u16,
    pub cost: u64,
    pub trace: Vec<TraceEntry>,
}

struct Frame {
    func: usize,
    block: usize,
    stmt: usize,
}

pub fn interpret(
    prog: &IrProgram,
    req: &Request,
    cfg: &AcConfig,
    store: &OverlayStore,
) -> Result<RunResult, HirError> {
    interpret_with(prog, req, cfg, store, &RunOptions::default())
}

/// Runs one request through the program.
///
/// Cost model: every executed statement and terminator costs 1, except
/// `io`, which costs its declared units.
pub fn interpret_with(
    prog: &IrProgram,
    req: &Request,
    cfg: &AcConfig,
    store: &OverlayStore,
    opts: &RunOptions,
) -> Result<RunResult, HirError> {
    let funcs = prog.functions();
    let entry = prog.function_index(prog.entry()).expect("validated entry");
    let mut stack = vec![Frame {
        func: entry,
        block: 0,
        stmt: 0,
    }];
    let mut trace = Vec::new();
    let mut cost: u64 = 0;
    let mut decision = None;
    let mut results: HashMap<&str, Decision> = HashMap::new();
    let mut last_callee_code: Option<u16> = None;

    'enter: loop {
        let depth = stack.len();
        let frame = stack.last_mut().expect("non-empty stack");
        let func = &funcs[frame.func];
        let block = &func.blocks[frame.block];
        if trace.len() >= opts.step_budget {
            return Err(HirError::StepBudgetExceeded(opts.step_budget));
        }
        trace.push(TraceEntry {
            func: func.name.clone(),
            block: block.label.clone(),
            seq: trace.len(),
            resume: frame.stmt,
        });

        let eval = |pred: &Predicate| -> Result<Decision, HirError> {
            evaluate(pred, req, cfg, store, opts).map_err(|message| HirError::Predicate {
                func: func.name.clone(),
                block: block.label.clone(),
                message,
            })
        };

        for (i, stmt) in block.stmts.iter().enumerate().skip(frame.stmt) {
            match stmt {
                Stmt::Call(callee) => {
                    cost += 1;
                    if depth >= opts.max_call_depth {
                        return Err(HirError::StepBudgetExceeded(opts.step_budget));
                    }
                    frame.stmt = i + 1;
                    stack.push(Frame {
                        func: prog.function_index(callee).expect("validated call"),
                        block: 0,
                        stmt: 0,
                    });
                    continue 'enter;
                }
                Stmt::Io {
                    units,
                    mode,
                    target,
                } => {
                    cost += units;
                    if *mode == IoMode::Write {
                        let path = match target {
                            PathExpr::Object => req.object.as_str(),
                            PathExpr::Literal(p) => p.as_str(),
                        };
                        if let Some(mut e) = store.read(path) {
                            e.digest = format!("written-by:{}", req.subject.label());
                            store.write(path, e);
                        }
                    }
                }
                Stmt::Log(expr) => {
                    cost += 1;
                    decision = Some(match expr {
                        LogExpr::Allow => Decision::Allow,
                        LogExpr::Deny => Decision::Deny,
                        LogExpr::Result(id) => *results.get(id.as_str()).ok_or_else(|| {
                            HirError::Predicate {
                                func: func.name.clone(),
                                block: block.label.clone(),
                                message: format!("check {id:?} has not run yet"),
                            }
                        })?,
                    });
                }
            }
        }

        cost += 1;
        let next_label = match &block.term {
            Terminator::Goto(l) => l,
            Terminator::Check { site, allow, deny } => {
                let d = eval(&site.predicate)?;
                results.insert(site.id.as_str(), d);
                if d.is_allow() {
                    allow
                } else {
                    deny
                }
            }
            Terminator::Branch {
                cond,
                then,
                otherwise,
            } => {
                if eval(cond)?.is_allow() {
                    then
                } else {
                    otherwise
                }
            }
            Terminator::Probe { site, jump } => {
                let d = eval(&site.predicate)?;
                results.insert(site.id.as_str(), d);
                decision = Some(d);
                jump
            }
            Terminator::Return(code) => {
                let code = match code {
                    ReturnCode::Literal(c) => *c,
                    // A call removed by trimming leaves no callee code behind.
                    ReturnCode::Callee => last_callee_code.unwrap_or(200),
                };
                stack.pop();
                if stack.is_empty() {
                    let decision = decision.ok_or(HirError::NoDecision)?;
                    return Ok(RunResult {
                        decision,
                        return_code: code,
                        cost,
                        trace,
                    });
                }
                last_callee_code = Some(code);
                continue 'enter;
            }
        };
        frame.block = func.block_index(next_label).expect("validated label");
        frame.stmt = 0;
    }
}

fn evaluate(
    pred: &Predicate,
    req: &Request,
    cfg: &AcConfig,
    store: &OverlayStore,
    opts: &RunOptions,
) -> Result<Decision, String> {
    Ok(match pred {
        Predicate::DirectiveMatch => match_directives(cfg, req),
        Predicate::FilePerm(need) => file_perm_check(store, &req.object, &req.subject, *need),
        Predicate::UserInTable(table) => {
            let Some(name) = req.subject.name() else {
                return Ok(Decision::Deny);
            };
            let rows = store
                .table_query(table, |row| row.get("name").and_then(|v| v.as_str()) == Some(name))
                .map_err(|e| e.to_string())?;
            Decision::from_bool(!rows.is_empty())
        }
        Predicate::IpIn(cidr) => Decision::from_bool(cidr.contains(req.source_ip)),
        Predicate::MethodIs(verb) => Decision::from_bool(req.action == *verb),
        Predicate::ObjectExists => Decision::from_bool(store.exists(&req.object)),
        Predicate::Nondet(bit) => Decision::from_bool((opts.entropy >> bit) & 1 == 1),
    })
}

/// Recomputes a run's cost from its trace and the program text alone.
pub fn trace_cost(prog: &IrProgram, trace: &[TraceEntry]) -> u64 {
    let mut total = 0;
    for entry in trace {
        let block = prog
            .function(&entry.func)
            .and_then(|f| f.block(&entry.block))
            .expect("trace refers to program blocks");
        let mut reached_terminator = true;
        for stmt in &block.stmts[entry.resume..] {
            total += match stmt {
                Stmt::Io { units, .. } => *units,
                _ => 1,
            };
            if matches!(stmt, Stmt::Call(_)) {
                reached_terminator = false;
                break;
            }
        }
        if reached_terminator {
            total += 1;
        }
    }
    total
}
