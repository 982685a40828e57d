use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AccRef, TrimError};
use crate::hir::{CheckInfo, DynCfg, NodeKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    /// Only in the allowed run.
    #[serde(rename = "GREEN")]
    Green,
    /// Only in the denied run.
    #[serde(rename = "RED")]
    Red,
    #[serde(rename = "GREEN_RED_MIXED")]
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedNode {
    #[serde(flatten)]
    pub key: NodeKey,
    pub color: Color,
    /// First-visit sequence in the allowed run, if visited there.
    pub allow_seq: Option<usize>,
    pub deny_seq: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckInfo>,
}

impl MergedNode {
    pub fn first_seq(&self) -> usize {
        self.allow_seq
            .into_iter()
            .chain(self.deny_seq)
            .min()
            .expect("merged node comes from at least one run")
    }
}

/// Union of an allowed-run and a denied-run CFG with every node coloured
/// by which runs visited it. Allowed-run nodes come first, in visit order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedCfg {
    pub nodes: Vec<MergedNode>,
    pub edges: BTreeSet<(usize, usize)>,
    pub allow_config: String,
    pub deny_config: String,
}

impl MergedCfg {
    pub fn index_of(&self, key: &NodeKey) -> Option<usize> {
        self.nodes.iter().position(|n| &n.key == key)
    }

    pub fn color_of(&self, key: &NodeKey) -> Option<Color> {
        self.index_of(key).map(|i| self.nodes[i].color)
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.range((i, 0)..=(i, usize::MAX)).map(|&(_, j)| j)
    }

    pub fn count(&self, color: Color) -> usize {
        self.nodes.iter().filter(|n| n.color == color).count()
    }

    /// Graphviz rendering of the coloured graph.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph merged_cfg {\n    node [shape=box, style=filled];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let fill = match n.color {
                Color::Green => "palegreen",
                Color::Red => "lightcoral",
                Color::Mixed => "khaki",
            };
            let label = match &n.check {
                Some(c) => format!("{}\\ncheck {} via {}", n.key, c.check_id, c.fn_name_tag),
                None => n.key.to_string(),
            };
            let _ = writeln!(out, "    n{i} [label=\"{label}\", fillcolor={fill}];");
        }
        for (a, b) in &self.edges {
            let _ = writeln!(out, "    n{a} -> n{b};");
        }
        out.push_str("}\n");
        out
    }
}

/// Merges the two graphs and colours every node.
pub fn diff_cfg(a: &DynCfg, d: &DynCfg) -> Result<MergedCfg, TrimError> {
    match (a.entry(), d.entry()) {
        (Some(ea), Some(ed)) if ea == ed => {}
        (ea, ed) => {
            let show = |k: Option<&NodeKey>| k.map_or("<empty>".to_string(), |k| k.to_string());
            return Err(TrimError::DisjointCfgs(show(ea), show(ed)));
        }
    }
    let mut nodes: Vec<MergedNode> = Vec::new();
    let mut index: HashMap<&NodeKey, usize> = HashMap::new();
    for n in &a.nodes {
        index.insert(&n.key, nodes.len());
        nodes.push(MergedNode {
            key: n.key.clone(),
            color: Color::Green,
            allow_seq: Some(n.seq),
            deny_seq: None,
            check: n.check.clone(),
        });
    }
    for n in &d.nodes {
        match index.get(&n.key) {
            Some(&i) => {
                nodes[i].color = Color::Mixed;
                nodes[i].deny_seq = Some(n.seq);
            }
            None => {
                index.insert(&n.key, nodes.len());
                nodes.push(MergedNode {
                    key: n.key.clone(),
                    color: Color::Red,
                    allow_seq: None,
                    deny_seq: Some(n.seq),
                    check: n.check.clone(),
                });
            }
        }
    }
    let map = |g: &DynCfg, i: usize| index[&g.nodes[i].key];
    let edges = a
        .edges
        .iter()
        .map(|&(i, j)| (map(a, i), map(a, j)))
        .chain(d.edges.iter().map(|&(i, j)| (map(d, i), map(d, j))))
        .collect();
    Ok(MergedCfg {
        nodes,
        edges,
        allow_config: a.config_id.clone(),
        deny_config: d.config_id.clone(),
    })
}

/// Number of `color` nodes reachable from `start` through `color` nodes.
fn reach_count(m: &MergedCfg, starts: impl Iterator<Item = usize>, color: Color) -> usize {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<usize> = starts.filter(|&s| m.nodes[s].color == color).collect();
    while let Some(n) = stack.pop() {
        if !seen.insert(n) {
            continue;
        }
        stack.extend(m.children(n).filter(|&c| m.nodes[c].color == color && !seen.contains(&c)));
    }
    seen.len()
}

/// Size of the allow-only and deny-only regions hanging off node `i`.
pub fn divergence(m: &MergedCfg, i: usize) -> usize {
    reach_count(m, m.children(i), Color::Green) + reach_count(m, m.children(i), Color::Red)
}

/// Locates the check that decides the request: among mixed nodes with
/// both an allow-only and a deny-only child, the one with the largest
/// divergence, earliest first visit on ties.
pub fn find_final_acc(a: &DynCfg, d: &DynCfg) -> Result<(AccRef, MergedCfg), TrimError> {
    let m = diff_cfg(a, d)?;
    let winner = (0..m.nodes.len())
        .filter(|&i| m.nodes[i].color == Color::Mixed)
        .filter(|&i| {
            m.children(i).any(|c| m.nodes[c].color == Color::Green)
                && m.children(i).any(|c| m.nodes[c].color == Color::Red)
        })
        .max_by(|&x, &y| {
            divergence(&m, x)
                .cmp(&divergence(&m, y))
                .then(m.nodes[y].first_seq().cmp(&m.nodes[x].first_seq()))
        })
        .ok_or(TrimError::NoCandidates)?;
    let node = &m.nodes[winner];
    let acc = match &node.check {
        Some(info) => AccRef::from_check(&node.key, info),
        None => return Err(TrimError::NoAccFound(node.key.to_string())),
    };
    Ok((acc, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hir::DynNode;
    use crate::reqgen::{Action, Request, Subject};

    fn graph(path: &[&str], checks: &[&str]) -> DynCfg {
        let nodes: Vec<DynNode> = path
            .iter()
            .enumerate()
            .map(|(i, b)| DynNode {
                key: NodeKey::new("main", *b),
                seq: i,
                check: checks.contains(b).then(|| CheckInfo {
                    check_id: format!("chk_{b}"),
                    fn_name_tag: "check".into(),
                    return_type_tag: "status".into(),
                }),
            })
            .collect();
        let edges = (1..nodes.len()).map(|i| (i - 1, i)).collect();
        DynCfg {
            request: Request::new(Subject::anonymous(), "/", Action::Get, "10.0.0.1".parse().unwrap()).unwrap(),
            config_id: "test".into(),
            nodes,
            edges,
        }
    }

    #[test]
    fn identical_graphs_are_all_mixed() {
        let g = graph(&["a", "b", "c"], &[]);
        let m = diff_cfg(&g, &g).unwrap();
        assert_eq!(m.count(Color::Mixed), 3);
        assert_eq!(m.count(Color::Green) + m.count(Color::Red), 0);
        assert_eq!(find_final_acc(&g, &g).unwrap_err(), TrimError::NoCandidates);
    }

    #[test]
    fn strict_prefix_is_mixed_then_green() {
        let a = graph(&["a", "b", "c", "d"], &[]);
        let d = graph(&["a", "b"], &[]);
        let m = diff_cfg(&a, &d).unwrap();
        let colors: Vec<Color> = m.nodes.iter().map(|n| n.color).collect();
        assert_eq!(colors, vec![Color::Mixed, Color::Mixed, Color::Green, Color::Green]);
        assert_eq!(m.count(Color::Red), 0);
    }

    #[test]
    fn disjoint_entries() {
        let a = graph(&["a", "b"], &[]);
        let d = graph(&["x", "b"], &[]);
        assert!(matches!(diff_cfg(&a, &d), Err(TrimError::DisjointCfgs(_, _))));
    }

    #[test]
    fn largest_divergence_wins_and_must_be_a_check() {
        // Nondeterministic 1-node wobble at `n`, real decision at `c`.
        let a = graph(&["s", "n", "x", "j", "c", "ok1", "ok2", "ok3"], &["c"]);
        let d = graph(&["s", "n", "y", "j", "c", "no"], &["c"]);
        let (acc, m) = find_final_acc(&a, &d).unwrap();
        assert_eq!(acc.check_id, "chk_c");
        assert_eq!(divergence(&m, m.index_of(&NodeKey::new("main", "n")).unwrap()), 2);
        assert_eq!(divergence(&m, m.index_of(&NodeKey::new("main", "c")).unwrap()), 4);

        let a = graph(&["s", "n", "x1", "x2", "x3", "j"], &[]);
        let d = graph(&["s", "n", "y", "j"], &[]);
        assert_eq!(
            find_final_acc(&a, &d).unwrap_err(),
            TrimError::NoAccFound("main/n".into())
        );
    }

    #[test]
    fn ties_go_to_the_earliest_node() {
        let a = graph(&["s", "c1", "g1", "m", "c2", "g2"], &["c1", "c2"]);
        let d = graph(&["s", "c1", "r1", "m", "c2", "r2"], &["c1", "c2"]);
        let (acc, _) = find_final_acc(&a, &d).unwrap();
        assert_eq!(acc.check_id, "chk_c1");
    }

    #[test]
    fn dot_output_lists_every_node() {
        let a = graph(&["a", "b"], &["a"]);
        let d = graph(&["a", "c"], &["a"]);
        let dot = diff_cfg(&a, &d).unwrap().to_dot();
        assert!(dot.starts_with("digraph"));
        assert_eq!(dot.matches("fillcolor").count(), 3);
        assert!(dot.contains("n0 -> n1"));
    }
}
