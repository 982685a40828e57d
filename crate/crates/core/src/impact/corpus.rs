use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::acdl::{AcConfig, Decision};
use crate::datastate::OverlayStore;
use crate::hir::{interpret_with, HirError, IrProgram, RunOptions};
use crate::reqgen::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub decision: Decision,
    pub return_code: u16,
    pub cost: u64,
}

/// Per-request outcomes of one corpus run. Failed requests are recorded,
/// not fatal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusRun {
    pub outcomes: BTreeMap<Request, Result<Outcome, HirError>>,
}

impl CorpusRun {
    pub fn decisions(&self) -> BTreeMap<&Request, Decision> {
        self.outcomes
            .iter()
            .filter_map(|(r, o)| o.as_ref().ok().map(|o| (r, o.decision)))
            .collect()
    }

    pub fn decision(&self, req: &Request) -> Option<Decision> {
        self.outcomes.get(req)?.as_ref().ok().map(|o| o.decision)
    }

    pub fn total_cost(&self) -> u64 {
        self.outcomes
            .values()
            .filter_map(|o| o.as_ref().ok())
            .map(|o| o.cost)
            .sum()
    }

    pub fn errors(&self) -> impl Iterator<Item = (&Request, &HirError)> {
        self.outcomes
            .iter()
            .filter_map(|(r, o)| o.as_ref().err().map(|e| (r, e)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePhase {
    Start,
    Finish,
}

/// Emitted around every request execution; `index` is the request's
/// position in the submitted corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub worker: usize,
    pub index: usize,
    pub phase: SchedulePhase,
}

pub fn run_corpus(
    prog: &IrProgram,
    cfg: &AcConfig,
    store: &OverlayStore,
    requests: &[Request],
    workers: usize,
) -> CorpusRun {
    run_corpus_with(prog, cfg, store, requests, workers, &RunOptions::default(), None)
}

/// Runs every request with up to `workers` threads.
///
/// Requests are partitioned by (subject, source IP). A partition is
/// handled by one worker in submission order, so requests from the same
/// requester never run concurrently or out of order.
pub fn run_corpus_with(
    prog: &IrProgram,
    cfg: &AcConfig,
    store: &OverlayStore,
    requests: &[Request],
    workers: usize,
    opts: &RunOptions,
    observer: Option<&(dyn Fn(ScheduleEvent) + Sync)>,
) -> CorpusRun {
    let mut partitions: BTreeMap<(Option<&str>, Ipv4Addr), Vec<usize>> = BTreeMap::new();
    for (i, r) in requests.iter().enumerate() {
        partitions.entry(r.order_key()).or_default().push(i);
    }
    let partitions: Vec<Vec<usize>> = partitions.into_values().collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(requests.len()));
    let workers = workers.clamp(1, partitions.len().max(1));

    let work = |worker: usize| {
        let mut local = Vec::new();
        loop {
            let p = next.fetch_add(1, Ordering::Relaxed);
            let Some(part) = partitions.get(p) else { break };
            for &index in part {
                if let Some(obs) = observer {
                    obs(ScheduleEvent {
                        worker,
                        index,
                        phase: SchedulePhase::Start,
                    });
                }
                let out = interpret_with(prog, &requests[index], cfg, store, opts).map(|r| Outcome {
                    decision: r.decision,
                    return_code: r.return_code,
                    cost: r.cost,
                });
                if let Some(obs) = observer {
                    obs(ScheduleEvent {
                        worker,
                        index,
                        phase: SchedulePhase::Finish,
                    });
                }
                local.push((index, out));
            }
        }
        results.lock().expect("results lock poisoned").extend(local);
    };

    if workers == 1 {
        work(0);
    } else {
        thread::scope(|s| {
            for w in 0..workers {
                let work = &work;
                s.spawn(move || work(w));
            }
        });
    }

    let mut outcomes = BTreeMap::new();
    for (index, out) in results.into_inner().expect("results lock poisoned") {
        outcomes.insert(requests[index].clone(), out);
    }
    CorpusRun { outcomes }
}
