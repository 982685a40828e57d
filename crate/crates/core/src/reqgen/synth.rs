//! Request synthesis over subjects × objects × actions × source IPs.

use std::collections::{BTreeSet, HashSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{Action, ReqGenError, Request, Subject};
use crate::acdl::{path_has_prefix, AcConfig, Block, Cidr, Selector};
use crate::datastate::{normalize_path, OverlayStore};
use crate::impact::{ChangeSpec, DataChange};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SubjectSource {
    /// Rows with a `name` column and an optional comma-separated `groups`
    /// column.
    Table {
        table: String,
        #[serde(default)]
        include_anonymous: bool,
    },
    Inline { inline: Vec<Subject> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ObjectSource {
    /// Every file at or below this path in the data state.
    Root { root: String },
    Inline { inline: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    ChangeRelated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisSpec {
    pub subjects: SubjectSource,
    pub objects: ObjectSource,
    pub actions: Vec<Action>,
    /// Empty means: one representative per CIDR in the change's configs
    /// plus one address outside all of them.
    #[serde(default)]
    pub ips: Vec<Ipv4Addr>,
    #[serde(default)]
    pub scope: Scope,
}

/// Subjects listed in a table with `name` and comma-separated `groups`
/// columns.
pub fn subjects_from_table(store: &OverlayStore, table: &str) -> Result<Vec<Subject>, ReqGenError> {
    resolve_subjects(
        &SubjectSource::Table {
            table: table.to_string(),
            include_anonymous: false,
        },
        store,
    )
}

fn resolve_subjects(
    src: &SubjectSource,
    store: &OverlayStore,
) -> Result<Vec<Subject>, ReqGenError> {
    match src {
        SubjectSource::Inline { inline } => Ok(inline.clone()),
        SubjectSource::Table {
            table,
            include_anonymous,
        } => {
            let rows = store
                .table_query(table, |_| true)
                .map_err(|_| ReqGenError::UnknownTable(table.clone()))?;
            let mut out = Vec::new();
            if *include_anonymous {
                out.push(Subject::anonymous());
            }
            for row in rows {
                let Some(name) = row.get("name").and_then(|v| v.as_str()) else {
                    continue;
                };
                let groups = row
                    .get("groups")
                    .and_then(|v| v.as_str())
                    .unwrap_or("")
                    .split(',')
                    .map(str::trim)
                    .filter(|g| !g.is_empty())
                    .map(str::to_string)
                    .collect::<Vec<_>>();
                out.push(Subject::user(name, groups));
            }
            Ok(out)
        }
    }
}

fn resolve_objects(
    src: &ObjectSource,
    store: &OverlayStore,
    change: Option<&ChangeSpec>,
) -> Result<Vec<String>, ReqGenError> {
    match src {
        ObjectSource::Inline { inline } => inline
            .iter()
            .map(|p| normalize_path(p).map_err(ReqGenError::from))
            .collect(),
        ObjectSource::Root { root } => {
            let root = normalize_path(root)?;
            let mut objects: BTreeSet<String> = store.list(&root).into_iter().collect();
            // Files that only exist after the change must be testable too.
            if let Some(change) = change {
                for d in &change.data_delta {
                    if let DataChange::AddFile { path, .. } = d {
                        if path_has_prefix(path, &root) {
                            objects.insert(path.clone());
                        }
                    }
                }
            }
            Ok(objects.into_iter().collect())
        }
    }
}

/// Objects the change syntactically refers to: blocks added, removed or
/// edited between the two configurations (by selector), and data-delta
/// paths, each with its subtree. A changed `root` block or default policy
/// refers to everything.
pub fn change_related_objects(change: &ChangeSpec, objects: &[String]) -> Vec<String> {
    let mut changed: Vec<&Block> = Vec::new();
    let mut unmatched_new: Vec<&Block> = change.config_new.blocks.iter().collect();
    for b in &change.config_old.blocks {
        if let Some(pos) = unmatched_new.iter().position(|n| *n == b) {
            unmatched_new.remove(pos);
        } else {
            changed.push(b);
        }
    }
    changed.extend(unmatched_new);
    let everything = change.config_old.default_policy != change.config_new.default_policy
        || changed.iter().any(|b| b.selector == Selector::Root);
    objects
        .iter()
        .filter(|o| {
            everything
                || changed.iter().any(|b| b.selector.matches(o))
                || change
                    .data_delta
                    .iter()
                    .any(|d| path_has_prefix(o, d.path()))
        })
        .cloned()
        .collect()
}

/// One host per distinct CIDR mentioned by the configs, then one address
/// none of them contains.
pub fn representative_ips<'a>(configs: impl IntoIterator<Item = &'a AcConfig>) -> Vec<Ipv4Addr> {
    let cidrs: BTreeSet<Cidr> = configs.into_iter().flat_map(|c| c.cidrs()).collect();
    let mut out: Vec<Ipv4Addr> = Vec::new();
    for c in &cidrs {
        let ip = c.representative();
        if !out.contains(&ip) {
            out.push(ip);
        }
    }
    let fallbacks = [
        Ipv4Addr::new(203, 0, 113, 7),
        Ipv4Addr::new(198, 51, 100, 7),
        Ipv4Addr::new(192, 0, 2, 7),
    ];
    let outside = fallbacks
        .into_iter()
        .chain((1..=255u8).map(|a| Ipv4Addr::new(a, 1, 2, 3)))
        .find(|ip| !cidrs.iter().any(|c| c.contains(*ip)));
    if let Some(ip) = outside {
        out.push(ip);
    }
    out
}

/// Deduplicated product in subject, object, action, IP order.
pub fn synthesize(
    spec: &SynthesisSpec,
    store: &OverlayStore,
    change: Option<&ChangeSpec>,
) -> Result<Vec<Request>, ReqGenError> {
    let subjects = resolve_subjects(&spec.subjects, store)?;
    if subjects.is_empty() {
        return Err(ReqGenError::EmptySource("subject"));
    }
    let mut objects = resolve_objects(&spec.objects, store, change)?;
    if spec.scope == Scope::ChangeRelated {
        objects = match change {
            Some(c) => change_related_objects(c, &objects),
            None => Vec::new(),
        };
    }
    if objects.is_empty() {
        return Err(ReqGenError::EmptySource("object"));
    }
    if spec.actions.is_empty() {
        return Err(ReqGenError::EmptySource("action"));
    }
    let ips = if spec.ips.is_empty() {
        match change {
            Some(c) => representative_ips([&c.config_old, &c.config_new]),
            None => representative_ips([]),
        }
    } else {
        spec.ips.clone()
    };

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(subjects.len() * objects.len() * spec.actions.len() * ips.len());
    for s in &subjects {
        for o in &objects {
            for &a in &spec.actions {
                for &ip in &ips {
                    let r = Request::new(s.clone(), o, a, ip)?;
                    if seen.insert(r.clone()) {
                        out.push(r);
                    }
                }
            }
        }
    }
    Ok(out)
}
