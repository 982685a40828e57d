use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Direction, ImpactTuple};
use crate::acdl::path_has_prefix;
use crate::reqgen::Action;

const SAMPLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateKey {
    Directory(String),
    Suffix(String),
    SubjectGroup(String),
    Action(Action),
}

impl fmt::Display for AggregateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregateKey::Directory(d) => write!(f, "dir {d}"),
            AggregateKey::Suffix(s) if s.is_empty() => f.write_str("suffix (none)"),
            AggregateKey::Suffix(s) => write!(f, "suffix {s}"),
            AggregateKey::SubjectGroup(g) => write!(f, "group {g}"),
            AggregateKey::Action(a) => write!(f, "action {a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub key: AggregateKey,
    pub direction: Direction,
    pub count: usize,
    /// A few member objects, for display.
    pub sample: Vec<String>,
    /// Indices into the impact list.
    pub members: Vec<usize>,
}

impl AggregateEntry {
    fn new(key: AggregateKey, direction: Direction, members: Vec<usize>, impacts: &[ImpactTuple]) -> Self {
        let sample: BTreeSet<&str> = members.iter().map(|&i| impacts[i].object.as_str()).collect();
        AggregateEntry {
            key,
            direction,
            count: members.len(),
            sample: sample.into_iter().take(SAMPLE).map(str::to_string).collect(),
            members,
        }
    }
}

/// The basename's extension from its first dot, e.g. `.sql.gz`. Dotfiles
/// keep their whole name.
pub fn suffix_of(object: &str) -> &str {
    let base = object.rsplit('/').next().unwrap_or(object);
    base.find('.').map_or("", |i| &base[i..])
}

fn ancestors(path: &str) -> impl Iterator<Item = &str> {
    let mut cut = Some(path.len());
    std::iter::from_fn(move || {
        let end = cut?;
        let i = path[..end].rfind('/')?;
        cut = if i == 0 { None } else { Some(i) };
        Some(if i == 0 { "/" } else { &path[..i] })
    })
}

/// Groups impacts for display.
///
/// Directories collapse first: a directory becomes one entry when it holds
/// at least two tested objects, every one of them has an impact, and all
/// impacts under it share a direction. Only the outermost such directory
/// is kept. Remaining impacts are grouped by suffix (always), and by
/// action and subject group where a group has two or more members.
pub fn aggregate(impacts: &[ImpactTuple], tested_objects: &[String]) -> Vec<AggregateEntry> {
    let impacted: BTreeSet<&str> = impacts.iter().map(|t| t.object.as_str()).collect();
    let tested: BTreeSet<&str> = tested_objects.iter().map(String::as_str).collect();

    let mut candidates: BTreeSet<&str> = BTreeSet::new();
    for t in impacts {
        candidates.extend(ancestors(&t.object));
    }
    // Shallow directories first so outer collapses shadow inner ones.
    let mut candidates: Vec<&str> = candidates.into_iter().collect();
    candidates.sort_by_key(|d| (if *d == "/" { 0 } else { d.matches('/').count() }, *d));

    let mut out = Vec::new();
    let mut covered = vec![false; impacts.len()];
    let mut collapsed: Vec<&str> = Vec::new();
    for dir in candidates {
        if collapsed.iter().any(|c| path_has_prefix(dir, c)) {
            continue;
        }
        let under: Vec<&str> = tested
            .iter()
            .copied()
            .filter(|o| *o != dir && path_has_prefix(o, dir))
            .collect();
        if under.len() < 2 || !under.iter().all(|o| impacted.contains(o)) {
            continue;
        }
        let members: Vec<usize> = (0..impacts.len())
            .filter(|&i| path_has_prefix(&impacts[i].object, dir))
            .collect();
        let dirs: BTreeSet<Direction> = members.iter().map(|&i| impacts[i].direction()).collect();
        if dirs.len() != 1 {
            continue;
        }
        for &i in &members {
            covered[i] = true;
        }
        collapsed.push(dir);
        let direction = dirs.into_iter().next().expect("one direction");
        out.push(AggregateEntry::new(
            AggregateKey::Directory(dir.to_string()),
            direction,
            members,
            impacts,
        ));
    }

    let rest: Vec<usize> = (0..impacts.len()).filter(|&i| !covered[i]).collect();
    let mut suffixes: BTreeMap<(String, Direction), Vec<usize>> = BTreeMap::new();
    let mut actions: BTreeMap<(Action, Direction), Vec<usize>> = BTreeMap::new();
    let mut groups: BTreeMap<(String, Direction), Vec<usize>> = BTreeMap::new();
    for &i in &rest {
        let t = &impacts[i];
        let d = t.direction();
        suffixes
            .entry((suffix_of(&t.object).to_string(), d.clone()))
            .or_default()
            .push(i);
        actions.entry((t.action, d.clone())).or_default().push(i);
        if t.subject.is_anonymous() {
            groups.entry(("anonymous".into(), d.clone())).or_default().push(i);
        }
        for g in t.subject.groups() {
            groups.entry((g.clone(), d.clone())).or_default().push(i);
        }
    }
    for ((s, d), m) in suffixes {
        out.push(AggregateEntry::new(AggregateKey::Suffix(s), d, m, impacts));
    }
    for ((a, d), m) in actions.into_iter().filter(|(_, m)| m.len() >= 2) {
        out.push(AggregateEntry::new(AggregateKey::Action(a), d, m, impacts));
    }
    for ((g, d), m) in groups.into_iter().filter(|(_, m)| m.len() >= 2) {
        out.push(AggregateEntry::new(AggregateKey::SubjectGroup(g), d, m, impacts));
    }
    out
}
