//! Dataset directory format.
//!
//! ```text
//! graph.json             node types, relation triples, meta-paths, target type
//! nodes_<type>.tsv       one id per line; target lines may carry `\t<label>`
//! edges_<relation>.tsv   `src_id \t dst_id` per line
//! features_<type>.bin    b"HGF1", u64 N, u64 d, N*d f32 (all little-endian)
//! features_<type>.csv    alternative to .bin: N lines of d comma-separated reals
//! ```
//!
//! Label `-1` (or no label column) marks an unlabeled node. Duplicate edges
//! are collapsed at load time.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphError, HeteroGraph, MetaPathSpec, NodeType, Relation, RelationStep};
use crate::matrix::Matrix;

pub const FEATURES_MAGIC: &[u8; 4] = b"HGF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub node_types: Vec<String>,
    pub target_type: String,
    /// `(src_type, relation_name, dst_type)`
    pub relations: Vec<(String, String, String)>,
    pub metapaths: Vec<MetaPathEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaPathEntry {
    pub name: String,
    pub relations: Vec<String>,
}

impl GraphConfig {
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let cfg: GraphConfig = serde_json::from_str(text).map_err(|e| GraphError::Format {
            file: "graph.json".into(),
            msg: e.to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), GraphError> {
        let bad = |msg: String| GraphError::Format {
            file: "graph.json".into(),
            msg,
        };
        let mut seen = std::collections::HashSet::new();
        for t in &self.node_types {
            check_name(t).map_err(&bad)?;
            if !seen.insert(t) {
                return Err(bad(format!("duplicate node type `{t}`")));
            }
        }
        if !self.node_types.contains(&self.target_type) {
            return Err(bad(format!("target type `{}` is not a node type", self.target_type)));
        }
        let mut rel_seen = std::collections::HashSet::new();
        for (s, r, d) in &self.relations {
            check_name(r).map_err(&bad)?;
            if !rel_seen.insert(r) {
                return Err(bad(format!("duplicate relation `{r}`")));
            }
            for t in [s, d] {
                if !self.node_types.contains(t) {
                    return Err(bad(format!("relation `{r}` uses unknown node type `{t}`")));
                }
            }
        }
        let mut mp_seen = std::collections::HashSet::new();
        for m in &self.metapaths {
            if !mp_seen.insert(&m.name) {
                return Err(bad(format!("duplicate meta-path `{}`", m.name)));
            }
        }
        Ok(())
    }
}

fn check_name(name: &str) -> Result<(), String> {
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(format!(
            "name `{name}` must be non-empty and use only ASCII letters, digits, `_` or `-`"
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeEntry {
    pub id: String,
    pub label: Option<u32>,
}

/// Parse a node list. `file` is used in error messages only.
pub fn parse_nodes_tsv(text: &str, file: &str) -> Result<Vec<NodeEntry>, GraphError> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| GraphError::Parse {
            file: file.to_owned(),
            line,
            msg,
        };
        let mut fields = raw.split('\t');
        let id = fields.next().unwrap_or_default().trim();
        if id.is_empty() {
            return Err(err("empty node id".into()));
        }
        let label = match fields.next().map(str::trim) {
            None | Some("") => None,
            Some(s) => {
                let v: i64 = s
                    .parse()
                    .map_err(|_| err(format!("label `{s}` is not an integer")))?;
                match v {
                    -1 => None,
                    v if v >= 0 && v <= u32::MAX as i64 => Some(v as u32),
                    v => return Err(err(format!("label {v} out of range"))),
                }
            }
        };
        if fields.next().is_some() {
            return Err(err("expected `id` or `id<TAB>label`".into()));
        }
        if let Some(prev) = seen.insert(id.to_owned(), line) {
            return Err(err(format!("duplicate id `{id}` (first on line {prev})")));
        }
        out.push(NodeEntry {
            id: id.to_owned(),
            label,
        });
    }
    Ok(out)
}

/// Endpoint id lookup for one side of an edge file.
pub struct IdSpace<'a> {
    pub type_name: &'a str,
    pub ids: &'a HashMap<String, u32>,
}

/// Parse an edge list against the id spaces of its endpoint types.
pub fn parse_edges_tsv(
    text: &str,
    file: &str,
    src: &IdSpace<'_>,
    dst: &IdSpace<'_>,
) -> Result<Vec<(u32, u32)>, GraphError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split('\t');
        let (Some(s), Some(d), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(GraphError::Parse {
                file: file.to_owned(),
                line,
                msg: "expected `src_id<TAB>dst_id`".into(),
            });
        };
        let lookup = |space: &IdSpace<'_>, id: &str| {
            space
                .ids
                .get(id.trim())
                .copied()
                .ok_or_else(|| GraphError::UnknownNode {
                    file: file.to_owned(),
                    line,
                    node_type: space.type_name.to_owned(),
                    id: id.trim().to_owned(),
                    count: space.ids.len(),
                })
        };
        let e = (lookup(src, s)?, lookup(dst, d)?);
        if seen.insert(e) {
            out.push(e);
        }
    }
    Ok(out)
}

pub fn parse_features_bin(bytes: &[u8], file: &str) -> Result<Matrix, GraphError> {
    let err = |msg: String| GraphError::Format {
        file: file.to_owned(),
        msg,
    };
    if bytes.len() < 20 || &bytes[..4] != FEATURES_MAGIC {
        return Err(err("missing HGF1 header".into()));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let d = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[20..];
    let expected = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| err(format!("dims {n}x{d} overflow")))?;
    if expected != body.len() as u64 {
        return Err(err(format!(
            "dims {n}x{d} need {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(err("non-finite feature value".into()));
    }
    Ok(Matrix::from_vec(n as usize, d as usize, data))
}

pub fn parse_features_csv(text: &str, file: &str) -> Result<Matrix, GraphError> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, raw) in text.lines().enumerate() {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let err = |msg: String| GraphError::Parse {
            file: file.to_owned(),
            line: i + 1,
            msg,
        };
        let before = data.len();
        for field in raw.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(format!("`{}` is not a number", field.trim())))?;
            if !v.is_finite() {
                return Err(err("non-finite feature value".into()));
            }
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(err(format!("row has {width} values, expected {c}")));
            }
            _ => {}
        }
        rows += 1;
    }
    Ok(Matrix::from_vec(rows, cols.unwrap_or(0), data))
}

pub fn write_features_bin(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + m.len() * 4);
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_text(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Load and validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<HeteroGraph, GraphError> {
    let cfg = GraphConfig::from_json(&read_text(&dir.join("graph.json"))?)?;

    let mut node_types = Vec::new();
    let mut id_maps = Vec::new();
    let mut labels = None;
    for name in &cfg.node_types {
        let path = dir.join(format!("nodes_{name}.tsv"));
        let entries = parse_nodes_tsv(&read_text(&path)?, &file_name(&path))?;
        let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
        id_maps.push(
            ids.iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), i as u32))
                .collect::<HashMap<_, _>>(),
        );
        if *name == cfg.target_type && entries.iter().any(|e| e.label.is_some()) {
            labels = Some(entries.iter().map(|e| e.label).collect());
        }
        node_types.push(NodeType {
            name: name.clone(),
            ids,
        });
    }
    let type_idx = |t: &str| {
        cfg.node_types
            .iter()
            .position(|n| n == t)
            .ok_or_else(|| GraphError::UnknownType(t.to_owned()))
    };

    let mut relations = Vec::new();
    for (s, r, d) in &cfg.relations {
        let (si, di) = (type_idx(s)?, type_idx(d)?);
        let path = dir.join(format!("edges_{r}.tsv"));
        let edges = parse_edges_tsv(
            &read_text(&path)?,
            &file_name(&path),
            &IdSpace {
                type_name: s,
                ids: &id_maps[si],
            },
            &IdSpace {
                type_name: d,
                ids: &id_maps[di],
            },
        )?;
        relations.push(Relation {
            name: r.clone(),
            src: si,
            dst: di,
            edges,
        });
    }

    let mut features = Vec::new();
    for nt in &node_types {
        let bin = dir.join(format!("features_{}.bin", nt.name));
        let csv = dir.join(format!("features_{}.csv", nt.name));
        let (m, path) = if bin.exists() {
            let bytes = fs::read(&bin).map_err(|source| GraphError::Io {
                path: bin.display().to_string(),
                source,
            })?;
            (parse_features_bin(&bytes, &file_name(&bin))?, bin)
        } else if csv.exists() {
            (parse_features_csv(&read_text(&csv)?, &file_name(&csv))?, csv)
        } else {
            features.push(None);
            continue;
        };
        if m.rows() != nt.count() {
            return Err(GraphError::Format {
                file: file_name(&path),
                msg: format!("{} feature rows for {} `{}` nodes", m.rows(), nt.count(), nt.name),
            });
        }
        features.push(Some(m));
    }

    let metapaths = cfg
        .metapaths
        .iter()
        .map(|m| MetaPathSpec {
            name: m.name.clone(),
            steps: m.relations.iter().map(|s| RelationStep::parse(s)).collect(),
        })
        .collect();

    let g = HeteroGraph {
        node_types,
        relations,
        features,
        labels,
        target: type_idx(&cfg.target_type)?,
        metapaths,
    };
    for m in &g.metapaths {
        g.resolve(m)?;
    }
    let report = g.validate();
    if !report.is_empty() {
        let msgs: Vec<String> = report.iter().map(|v| v.to_string()).collect();
        return Err(GraphError::Invalid(msgs.join("; ")));
    }
    Ok(g)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), GraphError> {
    fs::write(path, bytes).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write `g` in the directory format read by [`load_dataset`]. Features are
/// written as `.bin` (f32). Output bytes depend only on `g`.
pub fn write_dataset(g: &HeteroGraph, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let cfg = GraphConfig {
        node_types: g.node_types.iter().map(|t| t.name.clone()).collect(),
        target_type: g.target_name().to_owned(),
        relations: g
            .relations
            .iter()
            .map(|r| {
                (
                    g.node_types[r.src].name.clone(),
                    r.name.clone(),
                    g.node_types[r.dst].name.clone(),
                )
            })
            .collect(),
        metapaths: g
            .metapaths
            .iter()
            .map(|m| MetaPathEntry {
                name: m.name.clone(),
                relations: m.steps.iter().map(|s| s.to_string()).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&cfg).expect("graph config serializes");
    write(&dir.join("graph.json"), format!("{json}\n").as_bytes())?;

    for (t, nt) in g.node_types.iter().enumerate() {
        let mut text = String::new();
        for (i, id) in nt.ids.iter().enumerate() {
            text.push_str(id);
            if t == g.target {
                if let Some(labels) = &g.labels {
                    match labels[i] {
                        Some(l) => text.push_str(&format!("\t{l}")),
                        None => text.push_str("\t-1"),
                    }
                }
            }
            text.push('\n');
        }
        write(&dir.join(format!("nodes_{}.tsv", nt.name)), text.as_bytes())?;
        if let Some(f) = &g.features[t] {
            write(
                &dir.join(format!("features_{}.bin", nt.name)),
                &write_features_bin(f),
            )?;
        }
    }
    for r in &g.relations {
        let (src, dst) = (&g.node_types[r.src], &g.node_types[r.dst]);
        let mut text = String::new();
        for &(s, d) in &r.edges {
            text.push_str(&src.ids[s as usize]);
            text.push('\t');
            text.push_str(&dst.ids[d as usize]);
            text.push('\n');
        }
        write(&dir.join(format!("edges_{}.tsv", r.name)), text.as_bytes())?;
    }
    Ok(())
}
