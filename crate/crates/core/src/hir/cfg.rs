use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{interpret_with, HirError, IrProgram, RunOptions, RunResult};
use crate::acdl::AcConfig;
use crate::datastate::OverlayStore;
use crate::reqgen::Request;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    #[serde(rename = "fn")]
    pub func: String,
    pub block: String,
}

impl NodeKey {
    pub fn new(func: impl Into<String>, block: impl Into<String>) -> Self {
        NodeKey {
            func: func.into(),
            block: block.into(),
        }
    }
}

impl std::fmt::Display for NodeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.func, self.block)
    }
}

/// The check a block ends in, if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckInfo {
    pub check_id: String,
    pub fn_name_tag: String,
    pub return_type_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynNode {
    #[serde(flatten)]
    pub key: NodeKey,
    /// Trace position of the first visit.
    pub seq: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckInfo>,
}

/// Dynamic CFG of one run. Nodes are in first-visit order, so node 0 is
/// the entry; edges index into `nodes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynCfg {
    pub request: Request,
    pub config_id: String,
    pub nodes: Vec<DynNode>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl DynCfg {
    pub fn entry(&self) -> Option<&NodeKey> {
        self.nodes.first().map(|n| &n.key)
    }

    pub fn index_of(&self, key: &NodeKey) -> Option<usize> {
        self.nodes.iter().position(|n| &n.key == key)
    }

    pub fn node_keys(&self) -> BTreeSet<&NodeKey> {
        self.nodes.iter().map(|n| &n.key).collect()
    }

    pub fn edge_keys(&self) -> BTreeSet<(&NodeKey, &NodeKey)> {
        self.edges
            .iter()
            .map(|&(a, b)| (&self.nodes[a].key, &self.nodes[b].key))
            .collect()
    }

    pub fn from_run(prog: &IrProgram, req: &Request, cfg: &AcConfig, run: &RunResult) -> Self {
        let mut nodes: Vec<DynNode> = Vec::new();
        let mut index: HashMap<NodeKey, usize> = HashMap::new();
        let mut edges = BTreeSet::new();
        let mut prev = None;
        for t in &run.trace {
            let key = NodeKey::new(&t.func, &t.block);
            let i = *index.entry(key.clone()).or_insert_with(|| {
                let check = prog
                    .function(&t.func)
                    .and_then(|f| f.block(&t.block))
                    .and_then(|b| b.term.check_site())
                    .map(|s| CheckInfo {
                        check_id: s.id.clone(),
                        fn_name_tag: s.fn_name_tag.clone(),
                        return_type_tag: s.return_type_tag.clone(),
                    });
                nodes.push(DynNode {
                    key,
                    seq: t.seq,
                    check,
                });
                nodes.len() - 1
            });
            if let Some(p) = prev {
                edges.insert((p, i));
            }
            prev = Some(i);
        }
        DynCfg {
            request: req.clone(),
            config_id: config_id(cfg),
            nodes,
            edges,
        }
    }
}

/// Short content hash of a configuration's canonical text.
pub fn config_id(cfg: &AcConfig) -> String {
    let digest = Sha256::digest(cfg.to_string().as_bytes());
    hex::encode(&digest[..6])
}

pub fn trace_run(
    prog: &IrProgram,
    req: &Request,
    cfg: &AcConfig,
    store: &OverlayStore,
) -> Result<(RunResult, DynCfg), HirError> {
    trace_run_with(prog, req, cfg, store, &RunOptions::default())
}

pub fn trace_run_with(
    prog: &IrProgram,
    req: &Request,
    cfg: &AcConfig,
    store: &OverlayStore,
    opts: &RunOptions,
) -> Result<(RunResult, DynCfg), HirError> {
    let run = interpret_with(prog, req, cfg, store, opts)?;
    let dyn_cfg = DynCfg::from_run(prog, req, cfg, &run);
    Ok((run, dyn_cfg))
}
