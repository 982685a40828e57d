use super::{AccSet, TrimError};
use crate::hir::{IrProgram, LogExpr, Role, Stmt, Terminator};

/// Rewrites every final check into a probe: the predicate is still
/// evaluated and its result logged, but control always continues on the
/// check's deny branch, skipping the task behind the allow branch.
pub fn trim_advanced(prog: &IrProgram, finals: &AccSet) -> Result<IrProgram, TrimError> {
    if finals.finals.is_empty() {
        return Ok(prog.clone());
    }
    let mut missing = None;
    let out = prog.rewrite(|functions| {
        for acc in &finals.finals {
            let block = functions
                .iter_mut()
                .find(|f| f.name == acc.function)
                .and_then(|f| f.blocks.iter_mut().find(|b| b.label == acc.block));
            let Some(block) = block else {
                missing = Some(acc.to_string());
                return Ok(());
            };
            match &block.term {
                Terminator::Check { site, deny, .. } if site.id == acc.check_id => {
                    block.term = Terminator::Probe {
                        site: site.clone(),
                        jump: deny.clone(),
                    };
                }
                _ => {
                    missing = Some(acc.to_string());
                    return Ok(());
                }
            }
        }
        Ok(())
    })?;
    match missing {
        Some(acc) => Err(TrimError::UnknownAcc(acc)),
        None => Ok(out),
    }
}

/// Replaces every call from the entry handler to a sub-handler with
/// `log allow`, so requests that pass the entry checks count as allowed.
pub fn trim_strawman(prog: &IrProgram) -> IrProgram {
    let entry = prog.entry().to_string();
    let subs: Vec<String> = prog
        .functions()
        .iter()
        .filter(|f| f.role == Role::Sub)
        .map(|f| f.name.clone())
        .collect();
    prog.rewrite(|functions| {
        for f in functions.iter_mut().filter(|f| f.name == entry) {
            for b in &mut f.blocks {
                for s in &mut b.stmts {
                    if matches!(s, Stmt::Call(c) if subs.contains(c)) {
                        *s = Stmt::Log(LogExpr::Allow);
                    }
                }
            }
        }
        Ok(())
    })
    .expect("removing calls keeps a program valid")
}
