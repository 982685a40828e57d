use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    aggregate, triage, AggregateEntry, AggregateKey, Direction, ImpactRun, ImpactTuple,
    RequestFailure, RuleSet, Severity,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriagedEntry {
    /// Index into `aggregates`.
    pub entry: usize,
    pub key: AggregateKey,
    pub direction: Direction,
    pub severity: Severity,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub impacts: usize,
    pub deny_to_allow: usize,
    pub allow_to_deny: usize,
    pub entries: usize,
    pub dangerous_entries: usize,
    pub failures: usize,
}

fn triaged(aggregates: &[AggregateEntry], impacts: &[ImpactTuple], rules: &RuleSet) -> Vec<TriagedEntry> {
    triage(aggregates, impacts, rules)
        .into_iter()
        .zip(aggregates)
        .enumerate()
        .map(|(entry, ((severity, reasons), agg))| TriagedEntry {
            entry,
            key: agg.key.clone(),
            direction: agg.direction.clone(),
            severity,
            reasons,
        })
        .collect()
}

/// Everything one change-impact run found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub summary: Summary,
    pub impacts: Vec<ImpactTuple>,
    pub aggregates: Vec<AggregateEntry>,
    pub triage: Vec<TriagedEntry>,
    pub failures: Vec<RequestFailure>,
}

impl ImpactReport {
    pub fn build(run: ImpactRun, tested_objects: &[String], rules: &RuleSet) -> Self {
        let ImpactRun {
            mut impacts,
            failures,
        } = run;
        impacts.sort();
        let aggregates = aggregate(&impacts, tested_objects);
        let triage = triaged(&aggregates, &impacts, rules);
        let count = |d: Direction| impacts.iter().filter(|t| t.direction() == d).count();
        let summary = Summary {
            impacts: impacts.len(),
            deny_to_allow: count(Direction::DenyToAllow),
            allow_to_deny: count(Direction::AllowToDeny),
            entries: aggregates.len(),
            dangerous_entries: triage
                .iter()
                .filter(|t| t.severity == Severity::Dangerous)
                .count(),
            failures: failures.len(),
        };
        ImpactReport {
            summary,
            impacts,
            aggregates,
            triage,
            failures,
        }
    }

    /// Reclassifies the existing entries under different rules.
    pub fn retriage(&mut self, rules: &RuleSet) {
        self.triage = triaged(&self.aggregates, &self.impacts, rules);
        self.summary.dangerous_entries = self
            .triage
            .iter()
            .filter(|t| t.severity == Severity::Dangerous)
            .count();
    }

    pub fn has_dangerous(&self) -> bool {
        self.summary.dangerous_entries > 0
    }

    /// Human-readable table. Newly allowed requests come first.
    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} impacted requests: {} DENY->ALLOW, {} ALLOW->DENY; {} entries, {} dangerous",
            s.impacts, s.deny_to_allow, s.allow_to_deny, s.entries, s.dangerous_entries
        );
        if s.failures > 0 {
            let _ = writeln!(out, "{} requests failed to evaluate", s.failures);
        }
        if self.triage.is_empty() {
            return out;
        }
        let mut rows: Vec<&TriagedEntry> = self.triage.iter().collect();
        rows.sort_by_key(|t| (t.direction.clone(), t.severity, t.entry));
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<14} {:<13} {:<32} {:>6}  SAMPLE",
            "SEVERITY", "DIRECTION", "KEY", "COUNT"
        );
        for t in rows {
            let agg = &self.aggregates[t.entry];
            let dir = match t.direction {
                Direction::DenyToAllow => "DENY->ALLOW",
                Direction::AllowToDeny => "ALLOW->DENY",
            };
            let _ = writeln!(
                out,
                "{:<14} {:<13} {:<32} {:>6}  {}",
                t.severity.to_string(),
                dir,
                agg.key.to_string(),
                agg.count,
                agg.sample.join(", ")
            );
        }
        out
    }
}
