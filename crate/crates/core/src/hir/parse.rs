use super::{
    BasicBlock, CheckSite, HirError, IoMode, IrFunction, IrProgram, LogExpr, PathExpr, Predicate,
    ReturnCode, Role, Stmt, Terminator,
};
use crate::datastate::{normalize_path, Need};

fn syntax(line: usize, message: impl Into<String>) -> HirError {
    HirError::Syntax {
        line,
        message: message.into(),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

fn ident(line: usize, s: Option<&&str>, what: &str) -> Result<String, HirError> {
    match s {
        Some(s) if is_ident(s) => Ok(s.to_string()),
        Some(s) => Err(syntax(line, format!("invalid {what} {s:?}"))),
        None => Err(syntax(line, format!("missing {what}"))),
    }
}

fn parse_predicate(line: usize, s: &str) -> Result<Predicate, HirError> {
    let (name, arg) = match s.split_once('(') {
        Some((n, rest)) => {
            let arg = rest
                .strip_suffix(')')
                .ok_or_else(|| syntax(line, format!("unclosed predicate argument in {s:?}")))?;
            (n, Some(arg))
        }
        None => (s, None),
    };
    let need_arg = |what: &str| {
        arg.filter(|a| !a.is_empty())
            .ok_or_else(|| syntax(line, format!("{name} needs a {what} argument")))
    };
    let no_arg = |p: Predicate| match arg {
        None => Ok(p),
        Some(_) => Err(syntax(line, format!("{name} takes no argument"))),
    };
    match name {
        "directive_match" => no_arg(Predicate::DirectiveMatch),
        "object_exists" => no_arg(Predicate::ObjectExists),
        "file_perm" => match need_arg("READ|WRITE")? {
            "READ" => Ok(Predicate::FilePerm(Need::Read)),
            "WRITE" => Ok(Predicate::FilePerm(Need::Write)),
            other => Err(syntax(line, format!("file_perm expects READ or WRITE, got {other:?}"))),
        },
        "user_in_table" => {
            let t = need_arg("table")?;
            if !is_ident(t) {
                return Err(syntax(line, format!("invalid table name {t:?}")));
            }
            Ok(Predicate::UserInTable(t.to_string()))
        }
        "ip_in" => Ok(Predicate::IpIn(
            need_arg("CIDR")?.parse().map_err(|e: String| syntax(line, e))?,
        )),
        "method_is" => Ok(Predicate::MethodIs(
            need_arg("verb")?.parse().map_err(|e: String| syntax(line, e))?,
        )),
        "nondet" => {
            let bit: u8 = need_arg("bit")?
                .parse()
                .ok()
                .filter(|b| *b < 64)
                .ok_or_else(|| syntax(line, "nondet bit must be in 0..64"))?;
            Ok(Predicate::Nondet(bit))
        }
        other => Err(syntax(line, format!("unknown predicate {other:?}"))),
    }
}

/// Parses `ID PRED [via TAG] [-> TYPE]` and returns the site plus the
/// remaining tokens.
fn parse_site<'a>(
    line: usize,
    toks: &'a [&'a str],
    default_type: &str,
) -> Result<(CheckSite, &'a [&'a str]), HirError> {
    let id = ident(line, toks.first(), "check id")?;
    let pred_src = toks.get(1).ok_or_else(|| syntax(line, "missing predicate"))?;
    let predicate = parse_predicate(line, pred_src)?;
    let mut rest = &toks[2..];
    let mut fn_name_tag = predicate.name().to_string();
    let mut return_type_tag = default_type.to_string();
    if rest.first() == Some(&"via") {
        fn_name_tag = ident(line, rest.get(1), "check function tag")?;
        rest = &rest[2..];
    }
    if rest.first() == Some(&"->") {
        return_type_tag = ident(line, rest.get(1), "return type tag")?;
        rest = &rest[2..];
    }
    Ok((
        CheckSite {
            id,
            predicate,
            fn_name_tag,
            return_type_tag,
        },
        rest,
    ))
}

fn parse_two_targets(line: usize, rest: &[&str]) -> Result<(String, String), HirError> {
    match rest {
        ["?", a, ":", b] => Ok((
            ident(line, Some(a), "label")?,
            ident(line, Some(b), "label")?,
        )),
        _ => Err(syntax(line, "expected `? LABEL : LABEL`")),
    }
}

struct PartialBlock {
    label: String,
    line: usize,
    stmts: Vec<Stmt>,
    term: Option<Terminator>,
}

struct PartialFn {
    name: String,
    role: Role,
    ret: String,
    blocks: Vec<BasicBlock>,
    current: Option<PartialBlock>,
}

impl PartialFn {
    fn close_block(&mut self) -> Result<(), HirError> {
        if let Some(b) = self.current.take() {
            let term = b.term.ok_or_else(|| {
                syntax(b.line, format!("block {:?} has no terminator", b.label))
            })?;
            self.blocks.push(BasicBlock {
                label: b.label,
                stmts: b.stmts,
                term,
            });
        }
        Ok(())
    }
}

pub fn parse_ir(text: &str) -> Result<IrProgram, HirError> {
    let mut functions = Vec::new();
    let mut cur: Option<PartialFn> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();

        let Some(func) = cur.as_mut() else {
            // fn NAME [ROLE] [-> TYPE] {
            if toks.first() != Some(&"fn") {
                return Err(syntax(line, format!("expected `fn`, found {:?}", toks[0])));
            }
            if toks.last() != Some(&"{") {
                return Err(syntax(line, "function header must end with `{`"));
            }
            let name = ident(line, toks.get(1), "function name")?;
            let mut rest = &toks[2..toks.len() - 1];
            let mut role = Role::Helper;
            if let Some(r) = rest.first() {
                let parsed = match *r {
                    "entry" => Some(Role::Entry),
                    "sub" => Some(Role::Sub),
                    "helper" => Some(Role::Helper),
                    _ => None,
                };
                if let Some(p) = parsed {
                    role = p;
                    rest = &rest[1..];
                }
            }
            let ret = match rest {
                [] => "int".to_string(),
                ["->", t] => ident(line, Some(t), "return type tag")?,
                _ => return Err(syntax(line, format!("malformed function header {content:?}"))),
            };
            cur = Some(PartialFn {
                name,
                role,
                ret,
                blocks: Vec::new(),
                current: None,
            });
            continue;
        };

        if toks == ["}"] {
            let mut f = cur.take().expect("inside function");
            f.close_block()?;
            if f.blocks.is_empty() {
                return Err(syntax(line, format!("function {:?} has no blocks", f.name)));
            }
            functions.push(IrFunction {
                name: f.name,
                role: f.role,
                return_type_tag: f.ret,
                blocks: f.blocks,
            });
            continue;
        }

        if toks.len() == 1 && toks[0].ends_with(':') {
            let label = &toks[0][..toks[0].len() - 1];
            if !is_ident(label) {
                return Err(syntax(line, format!("invalid label {label:?}")));
            }
            func.close_block()?;
            func.current = Some(PartialBlock {
                label: label.to_string(),
                line,
                stmts: Vec::new(),
                term: None,
            });
            continue;
        }

        let ret_type = func.ret.clone();
        let block = func
            .current
            .as_mut()
            .ok_or_else(|| syntax(line, "statement outside of a labelled block"))?;
        if block.term.is_some() {
            return Err(syntax(
                line,
                format!("block {:?} continues after its terminator", block.label),
            ));
        }
        match toks[0] {
            "call" => {
                if toks.len() != 2 {
                    return Err(syntax(line, "expected `call FUNCTION`"));
                }
                block.stmts.push(Stmt::Call(ident(line, toks.get(1), "function name")?));
            }
            "io" => {
                let units: u64 = toks
                    .get(1)
                    .and_then(|u| u.parse().ok())
                    .ok_or_else(|| syntax(line, "io needs an integer cost"))?;
                let (mode, target) = match &toks[2..] {
                    [t] => (IoMode::Read, *t),
                    ["read", t] => (IoMode::Read, *t),
                    ["write", t] => (IoMode::Write, *t),
                    _ => return Err(syntax(line, "expected `io UNITS [read|write] TARGET`")),
                };
                let target = if target == "object" {
                    PathExpr::Object
                } else if target.starts_with('/') {
                    PathExpr::Literal(
                        normalize_path(target).map_err(|e| syntax(line, e.to_string()))?,
                    )
                } else {
                    return Err(syntax(line, format!("io target must be `object` or an absolute path, got {target:?}")));
                };
                block.stmts.push(Stmt::Io {
                    units,
                    mode,
                    target,
                });
            }
            "log" => {
                let expr = match toks.get(1).copied() {
                    Some("allow") if toks.len() == 2 => LogExpr::Allow,
                    Some("deny") if toks.len() == 2 => LogExpr::Deny,
                    Some(s) if toks.len() == 2 && s.starts_with("result(") && s.ends_with(')') => {
                        let id = &s["result(".len()..s.len() - 1];
                        LogExpr::Result(ident(line, Some(&id), "check id")?)
                    }
                    _ => return Err(syntax(line, "expected `log allow|deny|result(CHECK)`")),
                };
                block.stmts.push(Stmt::Log(expr));
            }
            "goto" => {
                if toks.len() != 2 {
                    return Err(syntax(line, "expected `goto LABEL`"));
                }
                block.term = Some(Terminator::Goto(ident(line, toks.get(1), "label")?));
            }
            "return" => {
                let code = match toks.get(1).copied() {
                    Some("$") if toks.len() == 2 => ReturnCode::Callee,
                    Some(c) if toks.len() == 2 => ReturnCode::Literal(
                        c.parse()
                            .map_err(|_| syntax(line, format!("invalid return code {c:?}")))?,
                    ),
                    _ => return Err(syntax(line, "expected `return CODE` or `return $`")),
                };
                block.term = Some(Terminator::Return(code));
            }
            "check" => {
                let (site, rest) = parse_site(line, &toks[1..], &ret_type)?;
                let (allow, deny) = parse_two_targets(line, rest)?;
                block.term = Some(Terminator::Check { site, allow, deny });
            }
            "probe" => {
                let (site, rest) = parse_site(line, &toks[1..], &ret_type)?;
                let jump = match rest {
                    ["=>", l] => ident(line, Some(l), "label")?,
                    _ => return Err(syntax(line, "expected `=> LABEL`")),
                };
                block.term = Some(Terminator::Probe { site, jump });
            }
            "branch" => {
                let cond = parse_predicate(
                    line,
                    toks.get(1).ok_or_else(|| syntax(line, "missing predicate"))?,
                )?;
                let (then, otherwise) = parse_two_targets(line, &toks[2..])?;
                block.term = Some(Terminator::Branch {
                    cond,
                    then,
                    otherwise,
                });
            }
            other => return Err(syntax(line, format!("unknown statement {other:?}"))),
        }
    }
    if let Some(f) = cur {
        return Err(syntax(
            last_line.max(1),
            format!("function {:?} is not closed", f.name),
        ));
    }
    if functions.is_empty() {
        return Err(syntax(last_line.max(1), "program has no functions"));
    }
    IrProgram::new(functions)
}
