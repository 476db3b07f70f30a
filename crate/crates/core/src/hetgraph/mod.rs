//! Heterogeneous graphs, meta-path adjacency and relation subgraphs.
//!
//! A meta-path is written as a sequence of relation steps. A step names a
//! stored relation (`"AP"`) or its reverse (`"AP^-1"`); a separately stored
//! reverse relation (`"PA"` with its own edge file) works as a plain step.
//! Consecutive steps must compose: the destination type of step `k` is the
//! source type of step `k + 1`, and both ends of the path are the target
//! type.

mod io;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub use io::{
    load_dataset, parse_edges_tsv, parse_features_bin, parse_features_csv, parse_nodes_tsv,
    write_dataset, write_features_bin, GraphConfig, IdSpace, MetaPathEntry, NodeEntry,
    FEATURES_MAGIC,
};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}:{line}: {node_type} id `{id}` out of range ({count} {node_type} nodes)")]
    UnknownNode {
        file: String,
        line: usize,
        node_type: String,
        id: String,
        count: usize,
    },
    #[error("unknown node type `{0}`")]
    UnknownType(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("meta-path `{metapath}`: relation `{first}` does not compose with `{second}`")]
    NonComposing {
        metapath: String,
        first: String,
        second: String,
    },
    #[error("meta-path `{metapath}` must start and end at target type `{target}`")]
    EndpointNotTarget { metapath: String, target: String },
    #[error("meta-path `{0}` has no relations")]
    EmptyMetaPath(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeType {
    pub name: String,
    /// External ids in file order; index `i` is node `i` of this type.
    pub ids: Vec<String>,
}

impl NodeType {
    pub fn count(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub name: String,
    pub src: usize,
    pub dst: usize,
    pub edges: Vec<(u32, u32)>,
}

/// One hop of a meta-path: a stored relation, optionally traversed backwards.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationStep {
    pub relation: String,
    pub reversed: bool,
}

impl RelationStep {
    pub fn parse(s: &str) -> Self {
        match s.strip_suffix("^-1") {
            Some(base) => Self {
                relation: base.to_owned(),
                reversed: true,
            },
            None => Self {
                relation: s.to_owned(),
                reversed: false,
            },
        }
    }
}

impl fmt::Display for RelationStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.reversed {
            write!(f, "{}^-1", self.relation)
        } else {
            f.write_str(&self.relation)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MetaPathSpec {
    pub name: String,
    pub steps: Vec<RelationStep>,
}

impl MetaPathSpec {
    pub fn new(name: impl Into<String>, steps: &[&str]) -> Self {
        Self {
            name: name.into(),
            steps: steps.iter().map(|s| RelationStep::parse(s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A resolved meta-path hop with concrete type indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub relation: usize,
    pub reversed: bool,
    pub src_type: usize,
    pub dst_type: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub node_types: Vec<NodeType>,
    pub relations: Vec<Relation>,
    /// Per node type, in `node_types` order.
    pub features: Vec<Option<Matrix>>,
    /// Per target node; `None` marks an unlabeled node.
    pub labels: Option<Vec<Option<u32>>>,
    pub target: usize,
    pub metapaths: Vec<MetaPathSpec>,
}

/// Bipartite edge list of one relation, oriented `src -> dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSubgraph {
    pub src_type: String,
    pub dst_type: String,
    pub n_src: usize,
    pub n_dst: usize,
    pub edges: Vec<(u32, u32)>,
}

/// A violated graph invariant, reported by [`HeteroGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl HeteroGraph {
    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t.name == name)
    }

    pub fn node_count(&self, t: usize) -> usize {
        self.node_types[t].count()
    }

    pub fn target_count(&self) -> usize {
        self.node_count(self.target)
    }

    pub fn target_name(&self) -> &str {
        &self.node_types[self.target].name
    }

    pub fn target_features(&self) -> Option<&Matrix> {
        self.features[self.target].as_ref()
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    pub fn metapath(&self, name: &str) -> Option<&MetaPathSpec> {
        self.metapaths.iter().find(|m| m.name == name)
    }

    fn step_types(&self, step: &RelationStep) -> Result<Hop, GraphError> {
        let relation = self
            .relation_index(&step.relation)
            .ok_or_else(|| GraphError::UnknownRelation(step.to_string()))?;
        let r = &self.relations[relation];
        let (src_type, dst_type) = if step.reversed {
            (r.dst, r.src)
        } else {
            (r.src, r.dst)
        };
        Ok(Hop {
            relation,
            reversed: step.reversed,
            src_type,
            dst_type,
        })
    }

    /// Resolve a meta-path to hops, checking composition and endpoints.
    pub fn resolve(&self, spec: &MetaPathSpec) -> Result<Vec<Hop>, GraphError> {
        if spec.steps.is_empty() {
            return Err(GraphError::EmptyMetaPath(spec.name.clone()));
        }
        let hops = spec
            .steps
            .iter()
            .map(|s| self.step_types(s))
            .collect::<Result<Vec<_>, _>>()?;
        for (k, w) in hops.windows(2).enumerate() {
            if w[0].dst_type != w[1].src_type {
                return Err(GraphError::NonComposing {
                    metapath: spec.name.clone(),
                    first: spec.steps[k].to_string(),
                    second: spec.steps[k + 1].to_string(),
                });
            }
        }
        let first = hops[0].src_type;
        let last = hops[hops.len() - 1].dst_type;
        if first != self.target || last != self.target {
            return Err(GraphError::EndpointNotTarget {
                metapath: spec.name.clone(),
                target: self.target_name().to_owned(),
            });
        }
        Ok(hops)
    }

    /// Node type names visited along `spec`, both endpoints included.
    pub fn node_type_sequence(&self, spec: &MetaPathSpec) -> Result<Vec<String>, GraphError> {
        let hops = self.resolve(spec)?;
        let mut seq = vec![self.node_types[hops[0].src_type].name.clone()];
        seq.extend(hops.iter().map(|h| self.node_types[h.dst_type].name.clone()));
        Ok(seq)
    }

    /// Edges of one hop oriented along the traversal direction.
    pub fn hop_edges(&self, hop: &Hop) -> Vec<(u32, u32)> {
        let r = &self.relations[hop.relation];
        if hop.reversed {
            r.edges.iter().map(|&(s, d)| (d, s)).collect()
        } else {
            r.edges.clone()
        }
    }

    /// Bipartite view of a relation. `id` is a relation name, optionally
    /// suffixed with `^-1` for the reverse direction.
    pub fn extract_relation_subgraph(&self, id: &str) -> Result<RelationSubgraph, GraphError> {
        let hop = self.step_types(&RelationStep::parse(id))?;
        Ok(RelationSubgraph {
            src_type: self.node_types[hop.src_type].name.clone(),
            dst_type: self.node_types[hop.dst_type].name.clone(),
            n_src: self.node_count(hop.src_type),
            n_dst: self.node_count(hop.dst_type),
            edges: self.hop_edges(&hop),
        })
    }

    /// Binarized meta-path adjacency: `u -> v` iff some typed walk along
    /// `spec` leads from target node `u` to target node `v`.
    pub fn build_metapath_adjacency(
        &self,
        spec: &MetaPathSpec,
        self_loops: bool,
    ) -> Result<MetaPathGraph, GraphError> {
        let hops = self.resolve(spec)?;
        let adj: Vec<Vec<Vec<u32>>> = hops
            .iter()
            .map(|h| {
                let mut lists = vec![Vec::new(); self.node_count(h.src_type)];
                for (s, d) in self.hop_edges(h) {
                    lists[s as usize].push(d);
                }
                lists
            })
            .collect();

        let n = self.target_count();
        let max_width = hops
            .iter()
            .map(|h| self.node_count(h.dst_type))
            .max()
            .unwrap_or(0);
        let mut mark = vec![false; max_width];
        let mut edges = Vec::new();
        let mut frontier: Vec<u32> = Vec::new();
        let mut next: Vec<u32> = Vec::new();
        for start in 0..n {
            frontier.clear();
            frontier.push(start as u32);
            for lists in &adj {
                next.clear();
                for &u in &frontier {
                    for &v in &lists[u as usize] {
                        if !mark[v as usize] {
                            mark[v as usize] = true;
                            next.push(v);
                        }
                    }
                }
                for &v in &next {
                    mark[v as usize] = false;
                }
                std::mem::swap(&mut frontier, &mut next);
                if frontier.is_empty() {
                    break;
                }
            }
            frontier.sort_unstable();
            edges.extend(
                frontier
                    .iter()
                    .filter(|&&v| self_loops || v as usize != start)
                    .map(|&v| (start as u32, v)),
            );
        }
        Ok(MetaPathGraph::from_edges(&spec.name, n, edges))
    }

    /// List every violated invariant; an empty list means the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out: Vec<String> = Vec::new();
        if self.target >= self.node_types.len() {
            out.push(format!("target type index {} out of range", self.target));
            return vec![Violation(out.remove(0))];
        }
        if self.features.len() != self.node_types.len() {
            out.push(format!(
                "{} feature slots for {} node types",
                self.features.len(),
                self.node_types.len()
            ));
        }
        for r in &self.relations {
            if r.src >= self.node_types.len() || r.dst >= self.node_types.len() {
                out.push(format!("relation `{}` references an unknown node type", r.name));
                continue;
            }
            let (ns, nd) = (self.node_count(r.src), self.node_count(r.dst));
            if let Some(&(s, d)) = r
                .edges
                .iter()
                .find(|&&(s, d)| s as usize >= ns || d as usize >= nd)
            {
                out.push(format!(
                    "relation `{}` has edge ({s}, {d}) outside {ns}x{nd}",
                    r.name
                ));
            }
        }
        for (t, f) in self.features.iter().enumerate() {
            if let (Some(m), Some(nt)) = (f, self.node_types.get(t)) {
                if m.rows() != nt.count() {
                    out.push(format!(
                        "features of `{}` have {} rows for {} nodes",
                        nt.name,
                        m.rows(),
                        nt.count()
                    ));
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.target_count() {
                out.push(format!(
                    "{} labels for {} target nodes",
                    labels.len(),
                    self.target_count()
                ));
            }
        }
        for m in &self.metapaths {
            if let Err(e) = self.resolve(m) {
                out.push(e.to_string());
            }
        }
        out.into_iter().map(Violation).collect()
    }

    /// Labels as dense class ids, or `None` if any target node is unlabeled.
    pub fn labeled_nodes(&self) -> Vec<(usize, u32)> {
        self.labels
            .as_ref()
            .map(|ls| {
                ls.iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.map(|c| (i, c)))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Directed adjacency among target nodes induced by one meta-path.
///
/// Edges are kept sorted by `(src, dst)`; edge indices used by masking refer
/// to this order. Rows are also held as packed bitsets for dense access.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaPathGraph {
    pub name: String,
    n: usize,
    edges: Vec<(u32, u32)>,
    words: usize,
    rows: Vec<u64>,
    out_degree: Vec<u32>,
    in_degree: Vec<u32>,
}

impl MetaPathGraph {
    /// Duplicate edges are collapsed.
    pub fn from_edges(name: &str, n: usize, mut edges: Vec<(u32, u32)>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        let words = n.div_ceil(64);
        let mut rows = vec![0u64; n * words];
        let mut out_degree = vec![0u32; n];
        let mut in_degree = vec![0u32; n];
        for &(s, d) in &edges {
            let (s, d) = (s as usize, d as usize);
            assert!(s < n && d < n, "edge ({s}, {d}) outside {n} nodes");
            rows[s * words + d / 64] |= 1 << (d % 64);
            out_degree[s] += 1;
            in_degree[d] += 1;
        }
        Self {
            name: name.to_owned(),
            n,
            edges,
            words,
            rows,
            out_degree,
            in_degree,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn out_degree(&self) -> &[u32] {
        &self.out_degree
    }

    pub fn in_degree(&self) -> &[u32] {
        &self.in_degree
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.rows[src * self.words + dst / 64] >> (dst % 64) & 1 == 1
    }

    pub fn row_is_empty(&self, v: usize) -> bool {
        self.out_degree[v] == 0
    }

    /// Dense `n x n` 0/1 adjacency.
    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for &(s, d) in &self.edges {
            m.set(s as usize, d as usize, 1.0);
        }
        m
    }

    /// Copy with the given edge indices removed.
    pub fn without_edges(&self, removed: &[usize]) -> Self {
        let mut drop = vec![false; self.edges.len()];
        for &i in removed {
            drop[i] = true;
        }
        let kept = self
            .edges
            .iter()
            .zip(&drop)
            .filter(|(_, &d)| !d)
            .map(|(&e, _)| e)
            .collect();
        Self::from_edges(&self.name, self.n, kept)
    }

    /// Union of several graphs over the same node set.
    pub fn union(name: &str, graphs: &[&MetaPathGraph]) -> Self {
        let n = graphs.first().map_or(0, |g| g.n);
        let edges = graphs
            .iter()
            .flat_map(|g| g.edges.iter().copied())
            .collect();
        Self::from_edges(name, n, edges)
    }

    pub fn transpose(&self) -> Self {
        Self::from_edges(
            &self.name,
            self.n,
            self.edges.iter().map(|&(s, d)| (d, s)).collect(),
        )
    }
}
