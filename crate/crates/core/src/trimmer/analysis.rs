use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use super::{AccRef, AccSet, MergedCfg, TrimError};
use crate::hir::{CheckSite, IrProgram, Stmt, Terminator};

/// Check-routine names and return types learned from the checks CFG-diff
/// identified. A site is treated as an access-control check when either
/// tag matches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccTags {
    pub fn_names: BTreeSet<String>,
    pub return_types: BTreeSet<String>,
}

impl AccTags {
    pub fn from_accs<'a>(accs: impl IntoIterator<Item = &'a AccRef>) -> Self {
        let mut tags = AccTags::default();
        for a in accs {
            tags.fn_names.insert(a.fn_name_tag.clone());
            tags.return_types.insert(a.return_type_tag.clone());
        }
        tags
    }

    pub fn is_acc(&self, site: &CheckSite) -> bool {
        self.fn_names.contains(&site.fn_name_tag) || self.return_types.contains(&site.return_type_tag)
    }
}

/// A node of the expanded graph: a run of statements inside a block.
/// Segment `k` starts after the block's `k`-th call, so a callee returns
/// to the segment after its call site rather than to the block start.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegKey {
    pub func: String,
    pub block: String,
    pub seg: usize,
}

/// The functions seen in a merged dynamic CFG, statically expanded
/// together with every function they can call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExpandedCfg {
    pub nodes: Vec<SegKey>,
    pub edges: BTreeSet<(usize, usize)>,
    /// Functions that appeared in the dynamic CFG.
    pub dynamic: BTreeSet<String>,
    /// Functions pulled in only by static expansion.
    pub expanded: BTreeSet<String>,
    index: HashMap<SegKey, usize>,
    succ: BTreeMap<usize, Vec<usize>>,
    pred: BTreeMap<usize, Vec<usize>>,
}

impl ExpandedCfg {
    pub fn build(cfg: &MergedCfg, prog: &IrProgram) -> Self {
        let mut g = ExpandedCfg::default();
        let mut queue: VecDeque<String> = VecDeque::new();
        for n in &cfg.nodes {
            if prog.function(&n.key.func).is_some() && g.dynamic.insert(n.key.func.clone()) {
                queue.push_back(n.key.func.clone());
            }
        }
        let mut done = BTreeSet::new();
        while let Some(fname) = queue.pop_front() {
            if !done.insert(fname.clone()) {
                continue;
            }
            let f = prog.function(&fname).expect("queued functions exist");
            for b in &f.blocks {
                let calls: Vec<&str> = b.calls().collect();
                let last = calls.len();
                for (k, callee) in calls.iter().enumerate() {
                    let site = g.node(&fname, &b.label, k);
                    let after = g.node(&fname, &b.label, k + 1);
                    let cf = prog.function(callee).expect("validated call");
                    let entry = g.node(callee, &cf.blocks[0].label, 0);
                    g.edge(site, entry);
                    for rb in cf.blocks.iter().filter(|rb| matches!(rb.term, Terminator::Return(_))) {
                        let ret = g.node(callee, &rb.label, rb.calls().count());
                        g.edge(ret, after);
                    }
                    if !g.dynamic.contains(*callee) && !done.contains(*callee) {
                        g.expanded.insert(callee.to_string());
                    }
                    queue.push_back(callee.to_string());
                }
                let tail = g.node(&fname, &b.label, last);
                for target in b.term.successors() {
                    let t = g.node(&fname, target, 0);
                    g.edge(tail, t);
                }
            }
        }
        g
    }

    fn node(&mut self, func: &str, block: &str, seg: usize) -> usize {
        let key = SegKey {
            func: func.to_string(),
            block: block.to_string(),
            seg,
        };
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.nodes.push(key.clone());
        self.index.insert(key, self.nodes.len() - 1);
        self.nodes.len() - 1
    }

    fn edge(&mut self, a: usize, b: usize) {
        if self.edges.insert((a, b)) {
            self.succ.entry(a).or_default().push(b);
            self.pred.entry(b).or_default().push(a);
        }
    }

    pub fn contains_function(&self, name: &str) -> bool {
        self.dynamic.contains(name) || self.expanded.contains(name)
    }

    fn lookup(&self, func: &str, block: &str, seg: usize) -> Option<usize> {
        self.index
            .get(&SegKey {
                func: func.to_string(),
                block: block.to_string(),
                seg,
            })
            .copied()
    }

    fn closure(&self, starts: Vec<usize>, adj: &BTreeMap<usize, Vec<usize>>) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = starts;
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                if let Some(next) = adj.get(&n) {
                    stack.extend(next.iter().copied().filter(|x| !seen.contains(x)));
                }
            }
        }
        seen
    }

    /// Segments that can execute after `acc`'s check is evaluated.
    pub fn called_after(&self, acc: &AccRef, prog: &IrProgram) -> BTreeSet<usize> {
        let Some(block) = prog.function(&acc.function).and_then(|f| f.block(&acc.block)) else {
            return BTreeSet::new();
        };
        let starts = block
            .term
            .successors()
            .into_iter()
            .filter_map(|l| self.lookup(&acc.function, l, 0))
            .collect();
        self.closure(starts, &self.succ)
    }

    /// Segments that can execute before `acc`'s check is evaluated.
    pub fn called_before(&self, acc: &AccRef, prog: &IrProgram) -> BTreeSet<usize> {
        let Some(block) = prog.function(&acc.function).and_then(|f| f.block(&acc.block)) else {
            return BTreeSet::new();
        };
        let Some(tail) = self.lookup(&acc.function, &acc.block, block.calls().count()) else {
            return BTreeSet::new();
        };
        let starts = self.pred.get(&tail).cloned().unwrap_or_default();
        self.closure(starts, &self.pred)
    }

    /// The access-control checks among `segments`, by tag.
    fn accs_in(&self, segments: &BTreeSet<usize>, prog: &IrProgram, tags: &AccTags) -> BTreeSet<AccRef> {
        let mut out = BTreeSet::new();
        for &i in segments {
            let k = &self.nodes[i];
            let Some(b) = prog.function(&k.func).and_then(|f| f.block(&k.block)) else {
                continue;
            };
            if k.seg != b.stmts.iter().filter(|s| matches!(s, Stmt::Call(_))).count() {
                continue;
            }
            if let Terminator::Check { site, .. } = &b.term {
                if tags.is_acc(site) {
                    out.insert(AccRef {
                        function: k.func.clone(),
                        block: k.block.clone(),
                        check_id: site.id.clone(),
                        fn_name_tag: site.fn_name_tag.clone(),
                        return_type_tag: site.return_type_tag.clone(),
                    });
                }
            }
        }
        out
    }
}

/// `acc` plus every tagged check that can run after it, including checks
/// in functions the dynamic runs never reached.
pub fn forward_analysis(
    acc: &AccRef,
    cfg: &MergedCfg,
    prog: &IrProgram,
    tags: &AccTags,
) -> (BTreeSet<AccRef>, ExpandedCfg) {
    let g = ExpandedCfg::build(cfg, prog);
    (forward_in(acc, &g, prog, tags), g)
}

/// Every tagged check that can run before `acc`. Those are not final:
/// `acc` decides later on the same path.
pub fn backward_analysis(
    acc: &AccRef,
    cfg: &MergedCfg,
    prog: &IrProgram,
    tags: &AccTags,
) -> (BTreeSet<AccRef>, ExpandedCfg) {
    let g = ExpandedCfg::build(cfg, prog);
    (backward_in(acc, &g, prog, tags), g)
}

fn forward_in(acc: &AccRef, g: &ExpandedCfg, prog: &IrProgram, tags: &AccTags) -> BTreeSet<AccRef> {
    let mut out = g.accs_in(&g.called_after(acc, prog), prog, tags);
    out.insert(acc.clone());
    out
}

fn backward_in(acc: &AccRef, g: &ExpandedCfg, prog: &IrProgram, tags: &AccTags) -> BTreeSet<AccRef> {
    let mut out = g.accs_in(&g.called_before(acc, prog), prog, tags);
    out.remove(acc);
    out
}

fn check_exists(acc: &AccRef, prog: &IrProgram) -> bool {
    prog.function(&acc.function)
        .and_then(|f| f.block(&acc.block))
        .and_then(|b| match &b.term {
            Terminator::Check { site, .. } => Some(site.id == acc.check_id),
            _ => None,
        })
        .unwrap_or(false)
}

/// Completes the CFG-diff results to a fixed point: checks found after a
/// candidate join the worklist (on the same CFG), checks found before one
/// are dropped. Each (check, CFG) pair is analysed once.
pub fn find_final_accs(pairs: &[(AccRef, MergedCfg)], prog: &IrProgram) -> Result<AccSet, TrimError> {
    for (acc, _) in pairs {
        if !check_exists(acc, prog) {
            return Err(TrimError::UnknownAcc(acc.to_string()));
        }
    }
    let tags = AccTags::from_accs(pairs.iter().map(|(a, _)| a));
    let graphs: Vec<ExpandedCfg> = pairs.iter().map(|(_, m)| ExpandedCfg::build(m, prog)).collect();

    let mut candidates = BTreeSet::new();
    let mut deleted = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut work: VecDeque<(AccRef, usize)> = pairs
        .iter()
        .enumerate()
        .map(|(i, (a, _))| (a.clone(), i))
        .collect();
    while let Some((acc, gi)) = work.pop_front() {
        if !seen.insert((acc.clone(), gi)) {
            continue;
        }
        let g = &graphs[gi];
        for a in forward_in(&acc, g, prog, &tags) {
            if !seen.contains(&(a.clone(), gi)) {
                work.push_back((a.clone(), gi));
            }
            candidates.insert(a);
        }
        deleted.extend(backward_in(&acc, g, prog, &tags));
    }
    let finals: BTreeSet<AccRef> = candidates.difference(&deleted).cloned().collect();
    if finals.is_empty() && !pairs.is_empty() {
        return Err(TrimError::EmptyResult);
    }
    Ok(AccSet { finals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hir::{CheckInfo, NodeKey};
    use crate::trimmer::{Color, MergedNode};

    /// Entry with a config check, then a GET path and a PUT path each
    /// handled by a sub-handler with its own check.
    const TWO_PATHS: &str = r#"
fn main entry -> status {
start:
    check gate directive_match via check_access ? route : no
route:
    branch method_is(GET) ? get : put
get:
    call reader
    return $
put:
    call writer
    return $
no:
    log result(gate)
    return 403
}

fn reader sub -> status {
open:
    check read file_perm(READ) via file_open ? ok : no
ok:
    log result(read)
    return 200
no:
    log result(read)
    return 403
}

fn writer sub -> status {
open:
    check write file_perm(WRITE) via file_open ? ok : no
ok:
    log result(write)
    return 200
no:
    log result(write)
    return 403
}
"#;

    /// Three checks in a row, the last one untagged.
    const CHAIN: &str = r#"
fn main entry -> status {
a:
    check c1 directive_match via chk ? b : no
b:
    check c2 method_is(GET) via chk ? c : no
c:
    check c3 ip_in(10.0.0.0/8) via chk ? d : no
d:
    check c4 object_exists via other -> other ? yes : no
yes:
    log result(c4)
    return 200
no:
    log deny
    return 403
}
"#;

    fn merged(prog: &IrProgram, visited: &[(&str, &str)]) -> MergedCfg {
        let nodes = visited
            .iter()
            .enumerate()
            .map(|(i, (f, b))| {
                let site = prog.function(f).unwrap().block(b).unwrap().term.check_site();
                MergedNode {
                    key: NodeKey::new(*f, *b),
                    color: Color::Mixed,
                    allow_seq: Some(i),
                    deny_seq: Some(i),
                    check: site.map(|s| CheckInfo {
                        check_id: s.id.clone(),
                        fn_name_tag: s.fn_name_tag.clone(),
                        return_type_tag: s.return_type_tag.clone(),
                    }),
                }
            })
            .collect();
        MergedCfg {
            nodes,
            edges: (1..visited.len()).map(|i| (i - 1, i)).collect(),
            allow_config: "a".into(),
            deny_config: "d".into(),
        }
    }

    fn acc(prog: &IrProgram, id: &str) -> AccRef {
        AccRef::all_in(prog).into_iter().find(|a| a.check_id == id).unwrap()
    }

    fn ids(set: &BTreeSet<AccRef>) -> Vec<&str> {
        set.iter().map(|a| a.check_id.as_str()).collect()
    }

    #[test]
    fn forward_reaches_unexecuted_sub_handlers() {
        let prog = IrProgram::parse(TWO_PATHS).unwrap();
        let m = merged(&prog, &[("main", "start"), ("main", "no")]);
        let gate = acc(&prog, "gate");
        let tags = AccTags::from_accs([&gate]);
        let (add, g) = forward_analysis(&gate, &m, &prog, &tags);
        let mut got = ids(&add);
        got.sort();
        assert_eq!(got, vec!["gate", "read", "write"]);
        assert!(g.expanded.contains("reader") && g.expanded.contains("writer"));
    }

    #[test]
    fn forward_from_a_last_check_is_just_itself() {
        let prog = IrProgram::parse(TWO_PATHS).unwrap();
        let m = merged(&prog, &[("main", "start"), ("main", "route"), ("main", "get"), ("reader", "open")]);
        let read = acc(&prog, "read");
        let (add, _) = forward_analysis(&read, &m, &prog, &AccTags::from_accs([&read]));
        assert_eq!(ids(&add), vec!["read"]);
    }

    #[test]
    fn forward_adds_tagged_chain_members_only() {
        let prog = IrProgram::parse(CHAIN).unwrap();
        let m = merged(&prog, &[("main", "a")]);
        let c1 = acc(&prog, "c1");
        let (add, _) = forward_analysis(&c1, &m, &prog, &AccTags::from_accs([&c1]));
        assert_eq!(ids(&add), vec!["c1", "c2", "c3"]);
    }

    #[test]
    fn backward_finds_earlier_checks() {
        let prog = IrProgram::parse(TWO_PATHS).unwrap();
        let m = merged(&prog, &[("main", "start"), ("main", "route"), ("main", "get"), ("reader", "open")]);
        let read = acc(&prog, "read");
        let gate = acc(&prog, "gate");
        let tags = AccTags::from_accs([&read, &gate]);
        let (del, _) = backward_analysis(&read, &m, &prog, &tags);
        assert_eq!(ids(&del), vec!["gate"]);
        let (del, _) = backward_analysis(&gate, &m, &prog, &tags);
        assert!(del.is_empty());
    }

    #[test]
    fn backward_ignores_io_and_logs() {
        let src = "fn m entry {\na:\n    io 5 read object\n    log allow\n    goto b\nb:\n    check c directive_match ? y : y\ny:\n    log result(c)\n    return 200\n}\n";
        let prog = IrProgram::parse(src).unwrap();
        let m = merged(&prog, &[("m", "a"), ("m", "b")]);
        let c = acc(&prog, "c");
        assert!(backward_analysis(&c, &m, &prog, &AccTags::from_accs([&c])).0.is_empty());
    }

    #[test]
    fn callee_return_does_not_precede_the_call() {
        // A check in code that runs after the call returns is not "before"
        // the callee's check.
        let src = r#"
fn m entry -> s {
a:
    call h
    check late directive_match via chk ? y : y
y:
    log result(late)
    return 200
}
fn h sub -> s {
b:
    check inner directive_match via chk ? r : r
r:
    log result(inner)
    return 1
}
"#;
        let prog = IrProgram::parse(src).unwrap();
        let m = merged(&prog, &[("m", "a"), ("h", "b"), ("h", "r")]);
        let inner = acc(&prog, "inner");
        let late = acc(&prog, "late");
        let tags = AccTags::from_accs([&inner]);
        assert!(backward_analysis(&inner, &m, &prog, &tags).0.is_empty());
        assert_eq!(ids(&forward_analysis(&inner, &m, &prog, &tags).0), vec!["inner", "late"]);
        assert_eq!(ids(&backward_analysis(&late, &m, &prog, &tags).0), vec!["inner"]);
    }

    #[test]
    fn later_final_on_a_shared_path_wins() {
        let prog = IrProgram::parse(TWO_PATHS).unwrap();
        let gate = acc(&prog, "gate");
        let read = acc(&prog, "read");
        let m1 = merged(&prog, &[("main", "start"), ("main", "no")]);
        let m2 = merged(&prog, &[("main", "start"), ("main", "route"), ("main", "get"), ("reader", "open")]);
        let set = find_final_accs(&[(gate, m1), (read, m2)], &prog).unwrap();
        assert_eq!(set.check_ids(), ["read", "write"].into());
    }

    #[test]
    fn disjoint_paths_keep_both_finals() {
        let src = TWO_PATHS.replace("via file_open", "via own_check");
        let prog = IrProgram::parse(&src).unwrap();
        let read = acc(&prog, "read");
        let write = acc(&prog, "write");
        let m1 = merged(&prog, &[("main", "start"), ("main", "route"), ("main", "get"), ("reader", "open")]);
        let m2 = merged(&prog, &[("main", "start"), ("main", "route"), ("main", "put"), ("writer", "open")]);
        let set = find_final_accs(&[(read, m1), (write, m2)], &prog).unwrap();
        assert_eq!(set.check_ids(), ["read", "write"].into());
    }

    #[test]
    fn unknown_acc_is_rejected() {
        let prog = IrProgram::parse(TWO_PATHS).unwrap();
        let mut bogus = acc(&prog, "gate");
        bogus.check_id = "nope".into();
        let m = merged(&prog, &[("main", "start")]);
        assert!(matches!(
            find_final_accs(&[(bogus, m)], &prog),
            Err(TrimError::UnknownAcc(_))
        ));
    }

    #[test]
    fn cyclic_checks_empty_the_result() {
        // Each check both precedes and follows the other.
        let src = r#"
fn m entry -> s {
a:
    check x directive_match via chk ? b : done
b:
    check y directive_match via chk ? a : done
done:
    log result(x)
    return 1
}
"#;
        let prog = IrProgram::parse(src).unwrap();
        let x = acc(&prog, "x");
        let m = merged(&prog, &[("m", "a"), ("m", "b")]);
        assert_eq!(find_final_accs(&[(x, m)], &prog), Err(TrimError::EmptyResult));
    }
}
