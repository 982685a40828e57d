use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AggregateEntry, ImpactTuple};
use crate::reqgen::Action;

#[derive(Debug, Error)]
pub enum RuleParseError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid rule set: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Dangerous,
    LessDangerous,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Dangerous => "DANGEROUS",
            Severity::LessDangerous => "LESS_DANGEROUS",
        })
    }
}

/// Triage rules. An entry is dangerous if any of its member requests
/// matches any rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    /// Some path segment starts with a dot (`.htaccess`, `.git/config`).
    #[serde(default)]
    pub dot_prefix: bool,
    #[serde(default)]
    pub suffixes: Vec<String>,
    #[serde(default)]
    pub substrings: Vec<String>,
    #[serde(default)]
    pub methods: Vec<Action>,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            dot_prefix: true,
            suffixes: vec![".sql".into(), ".sql.gz".into()],
            substrings: vec!["phpunit".into()],
            methods: vec![Action::Trace],
        }
    }
}

impl RuleSet {
    pub fn parse(text: &str) -> Result<Self, RuleParseError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, RuleParseError> {
        let text = fs::read_to_string(path).map_err(|source| RuleParseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The rules `t` matches, as short labels.
    pub fn matches(&self, t: &ImpactTuple) -> Vec<String> {
        let mut hits = Vec::new();
        if self.dot_prefix && t.object.split('/').any(|s| s.starts_with('.')) {
            hits.push("dot_prefix".to_string());
        }
        for s in &self.suffixes {
            if t.object.ends_with(s.as_str()) {
                hits.push(format!("suffix {s}"));
            }
        }
        for s in &self.substrings {
            if t.object.contains(s.as_str()) {
                hits.push(format!("substring {s}"));
            }
        }
        if self.methods.contains(&t.action) {
            hits.push(format!("method {}", t.action));
        }
        hits
    }
}

/// Classifies each entry by its members. Returns `(severity, matched rule
/// labels)` per entry, in order.
pub fn triage(
    entries: &[AggregateEntry],
    impacts: &[ImpactTuple],
    rules: &RuleSet,
) -> Vec<(Severity, Vec<String>)> {
    entries
        .iter()
        .map(|e| {
            let mut reasons: Vec<String> = e
                .members
                .iter()
                .flat_map(|&i| rules.matches(&impacts[i]))
                .collect();
            reasons.sort();
            reasons.dedup();
            let severity = if reasons.is_empty() {
                Severity::LessDangerous
            } else {
                Severity::Dangerous
            };
            (severity, reasons)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acdl::Decision;
    use crate::impact::aggregate;
    use crate::reqgen::Subject;

    fn tuple(object: &str, action: Action) -> ImpactTuple {
        ImpactTuple {
            subject: Subject::anonymous(),
            object: object.into(),
            action,
            source_ip: "10.0.0.1".parse().unwrap(),
            r_old: Decision::Deny,
            r_new: Decision::Allow,
            object_new: false,
        }
    }

    fn severity(object: &str, action: Action) -> Severity {
        let impacts = vec![tuple(object, action)];
        let entries = aggregate(&impacts, &[object.to_string()]);
        triage(&entries, &impacts, &RuleSet::default())[0].0
    }

    #[test]
    fn default_rules() {
        assert_eq!(severity("/db/light.sql.gz", Action::Get), Severity::Dangerous);
        assert_eq!(severity("/.htaccess", Action::Get), Severity::Dangerous);
        assert_eq!(severity("/vendor/phpunit/phpunit/src/Util/PHP/eval-stdin.php", Action::Get), Severity::Dangerous);
        assert_eq!(severity("/index.html", Action::Trace), Severity::Dangerous);
        assert_eq!(severity("/public/logo.png", Action::Get), Severity::LessDangerous);
    }

    #[test]
    fn rules_json() {
        let r = RuleSet::parse(r#"{"dot_prefix":false,"suffixes":[".bak"],"substrings":[],"methods":["DELETE"]}"#)
            .unwrap();
        assert!(!r.dot_prefix);
        assert_eq!(r.matches(&tuple("/x.bak", Action::Delete)).len(), 2);
        assert!(RuleSet::parse(r#"{"suffix":[".bak"]}"#).is_err());
        assert!(RuleSet::parse(r#"{"methods":["FETCH"]}"#).is_err());
        let round = serde_json::to_string(&RuleSet::default()).unwrap();
        assert_eq!(RuleSet::parse(&round).unwrap(), RuleSet::default());
    }
}
