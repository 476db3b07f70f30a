//! Encoder, non-target projection, intra-meta-path propagation, semantic
//! fusion and decoder, recorded on a [`Tape`].
//!
//! Parameter names:
//!
//! ```text
//! mask_token                 1 x d_tar
//! proj.<target>.weight       d_tar x d
//! enc.<path>.l<k>.weight     d x d
//! enc.<path>.l<k>.att        2d x 1
//! sem.weight, sem.bias, sem.query
//! mlp.<type>.w1 b1 w2 b2 prelu1 prelu2
//! prop.<path>.h<k>.att       2d x 1
//! dec.weight, dec.att, dec.out, dec.bias
//! ```

use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::config::{Activation, Config};
use crate::hetgraph::{GraphError, HeteroGraph, MetaPathGraph};
use crate::matrix::Matrix;
use crate::params::{ParamStore, ParamVars};
use crate::tape::{Tape, TapeError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node type `{0}` has no features")]
    MissingFeatures(String),
    #[error("{0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Destination-grouped edge list for attention layers. `src[e] -> dst[e]`.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub n_dst: usize,
    /// `n_dst x 1`, 1 where a destination has no incoming edge.
    pub isolated: Matrix,
}

impl EdgeIndex {
    pub fn new(edges: &[(u32, u32)], n_dst: usize) -> Self {
        let mut isolated = Matrix::filled(n_dst, 1, 1.0);
        for &(_, d) in edges {
            isolated.set(d as usize, 0, 0.0);
        }
        Self {
            src: edges.iter().map(|&(s, _)| s as usize).collect(),
            dst: edges.iter().map(|&(_, d)| d as usize).collect(),
            n_dst,
            isolated,
        }
    }

    /// Edges of a target-to-target graph, optionally followed by one self
    /// loop per node.
    pub fn from_graph(g: &MetaPathGraph, self_loops: bool) -> Self {
        let n = g.num_nodes();
        let mut edges = g.edges().to_vec();
        if self_loops {
            edges.extend((0..n as u32).map(|i| (i, i)));
        }
        Self::new(&edges, n)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn any_isolated(&self) -> bool {
        self.isolated.data().iter().any(|&v| v != 0.0)
    }
}

/// `leaky_relu(a · [h_dst[i] ‖ h_src[j]])` for every edge `j -> i`; `E x 1`.
pub fn node_attention_scores(
    tape: &mut Tape,
    h_dst: Var,
    h_src: Var,
    edges: &EdgeIndex,
    att: Var,
    slope: f64,
) -> Result<Var> {
    let hd = tape.gather_rows(h_dst, edges.dst.clone())?;
    let hs = tape.gather_rows(h_src, edges.src.clone())?;
    let cat = tape.concat_cols(hd, hs)?;
    let s = tape.matmul(cat, att)?;
    Ok(tape.leaky_relu(s, slope)?)
}

/// Softmax of edge scores over each destination's incoming edges.
pub fn normalize_attention(tape: &mut Tape, scores: Var, edges: &EdgeIndex) -> Result<Var> {
    Ok(tape.segment_softmax(scores, edges.dst.clone(), edges.n_dst)?)
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    Ok(match act {
        Activation::Elu => tape.elu(x)?,
        Activation::Tanh => tape.tanh(x)?,
        Activation::Identity => x,
    })
}

/// `act(sum_j alpha_ij h_src[j])` per destination; destinations without
/// edges get `act(0)`.
pub fn aggregate(
    tape: &mut Tape,
    alpha: Var,
    h_src: Var,
    edges: &EdgeIndex,
    act: Activation,
) -> Result<Var> {
    let hs = tape.gather_rows(h_src, edges.src.clone())?;
    let weighted = tape.mul(hs, alpha)?;
    let summed = tape.scatter_add_rows(weighted, edges.dst.clone(), edges.n_dst)?;
    activate(tape, summed, act)
}

/// One attention layer. Returns the aggregated output and the normalized
/// attention column. With `fallback`, destinations without edges take the
/// matching row of `fallback` instead of `act(0)`.
fn attention_layer(
    tape: &mut Tape,
    h_dst: Var,
    h_src: Var,
    edges: &EdgeIndex,
    att: Var,
    cfg: &Config,
    fallback: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let (z, alpha) = if edges.is_empty() {
        let d = tape.shape(h_src).1;
        let zero = tape.constant(Matrix::zeros(edges.n_dst, d));
        (activate(tape, zero, cfg.activation)?, None)
    } else {
        let s = node_attention_scores(tape, h_dst, h_src, edges, att, cfg.attention_slope)?;
        let a = normalize_attention(tape, s, edges)?;
        (aggregate(tape, a, h_src, edges, cfg.activation)?, Some(a))
    };
    let z = match fallback {
        Some(f) if edges.any_isolated() => {
            let ind = tape.constant(edges.isolated.clone());
            let keep = tape.mul(f, ind)?;
            // act(0) is 0 for every supported activation, so isolated rows
            // of `z` are zero and the sum replaces them.
            tape.add(z, keep)?
        }
        _ => z,
    };
    Ok((z, alpha))
}

/// Semantic attention over per-path embeddings: returns the fused embedding
/// and the `P x 1` weight column.
pub fn semantic_attention(
    tape: &mut Tape,
    per_path: &[Var],
    weight: Var,
    bias: Var,
    query: Var,
) -> Result<(Var, Var)> {
    if per_path.is_empty() {
        return Err(ModelError::Shape("semantic attention needs at least one path".into()));
    }
    let mut logits = Vec::with_capacity(per_path.len());
    for &h in per_path {
        let t = tape.matmul(h, weight)?;
        let t = tape.add(t, bias)?;
        let t = tape.tanh(t)?;
        let s = tape.matmul(t, query)?;
        logits.push(tape.reduce_mean(s)?);
    }
    let w = tape.concat_rows(&logits)?;
    let seg: Rc<[usize]> = vec![0; per_path.len()].into();
    let alpha = tape.segment_softmax(w, seg, 1)?;
    let fused = weighted_sum(tape, per_path, alpha)?;
    Ok((fused, alpha))
}

/// `sum_k alpha[k] * xs[k]` for a `P x 1` column `alpha`.
fn weighted_sum(tape: &mut Tape, xs: &[Var], alpha: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &x) in xs.iter().enumerate() {
        let a = tape.gather_rows(alpha, vec![k].into())?;
        let term = tape.mul(x, a)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Two-layer perceptron with prelu activations mapping a non-target type's
/// features to the hidden dimension.
pub fn project_nontarget(tape: &mut Tape, x: Var, p: &ParamVars, type_name: &str) -> Result<Var> {
    let g = |s: &str| p.get(&format!("mlp.{type_name}.{s}"));
    let h = tape.matmul(x, g("w1"))?;
    let h = tape.add(h, g("b1"))?;
    let h = tape.prelu(h, g("prelu1"))?;
    let h = tape.matmul(h, g("w2"))?;
    let h = tape.add(h, g("b2"))?;
    Ok(tape.prelu(h, g("prelu2"))?)
}

/// One propagation hop between two node types.
#[derive(Debug, Clone)]
pub struct PropHop {
    pub src_type: usize,
    pub dst_type: usize,
    pub edges: EdgeIndex,
}

#[derive(Debug, Clone)]
pub struct PathPlan {
    pub name: String,
    /// Hops from the middle of the path outward to the target, in order.
    pub hops: Vec<PropHop>,
}

/// Static model structure derived from a graph and a configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub target: usize,
    pub type_names: Vec<String>,
    pub target_count: usize,
    pub target_dim: usize,
    /// Features of the non-target types used by propagation.
    pub nontarget_features: Vec<Option<Matrix>>,
    pub paths: Vec<PathPlan>,
}

/// Everything the model sees for one forward pass.
pub struct ForwardInput<'a> {
    /// Target features with masked rows and entries already zeroed.
    pub x_tar: &'a Matrix,
    /// `N x 1` indicator of rows replaced by the mask token.
    pub mask_rows: Option<&'a Matrix>,
    /// Per meta-path, the (masked) graph used by the encoder and decoder.
    pub graphs: &'a [MetaPathGraph],
}

pub struct Encoded {
    pub per_path: Vec<Var>,
    /// Last-layer attention per path, aligned with the graph's edge list.
    pub attention: Vec<Vec<f64>>,
}

pub struct Forward {
    pub per_path: Vec<Var>,
    pub attention: Vec<Vec<f64>>,
    pub alpha: Var,
    pub fused: Var,
    pub enhanced: Var,
    pub decoded: Var,
}

impl Model {
    pub fn new(g: &HeteroGraph, config: &Config) -> Result<Self> {
        let target_features = g
            .target_features()
            .ok_or_else(|| ModelError::MissingFeatures(g.target_name().to_owned()))?;
        if g.metapaths.is_empty() {
            return Err(ModelError::Shape("graph defines no meta-paths".into()));
        }
        let mut nontarget_features = vec![None; g.node_types.len()];
        let mut paths = Vec::new();
        for spec in &g.metapaths {
            let hops = g.resolve(spec)?;
            let len = hops.len();
            let n_hops = config.propagation_hops.unwrap_or(len - len / 2).min(len);
            let mut plan = Vec::new();
            if config.enhancement {
                for hop in &hops[len - n_hops..] {
                    for t in [hop.src_type, hop.dst_type] {
                        if t != g.target && nontarget_features[t].is_none() {
                            let f = g.features[t].as_ref().ok_or_else(|| {
                                ModelError::MissingFeatures(g.node_types[t].name.clone())
                            })?;
                            nontarget_features[t] = Some(f.clone());
                        }
                    }
                    plan.push(PropHop {
                        src_type: hop.src_type,
                        dst_type: hop.dst_type,
                        edges: EdgeIndex::new(&g.hop_edges(hop), g.node_count(hop.dst_type)),
                    });
                }
            }
            paths.push(PathPlan {
                name: spec.name.clone(),
                hops: plan,
            });
        }
        Ok(Self {
            config: config.clone(),
            target: g.target,
            type_names: g.node_types.iter().map(|t| t.name.clone()).collect(),
            target_count: g.target_count(),
            target_dim: target_features.cols(),
            nontarget_features,
            paths,
        })
    }

    pub fn target_name(&self) -> &str {
        &self.type_names[self.target]
    }

    /// Freshly initialized parameters: Glorot-uniform weight matrices,
    /// N(0, 0.02) attention vectors and mask token, zero biases, prelu
    /// slopes 0.25.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let d = self.config.hidden_dim;
        let mut s = ParamStore::new();
        let mut put = |name: String, m: Matrix| s.insert(name, m).expect("unique parameter names");
        put("mask_token".into(), Matrix::normal(1, self.target_dim, 0.02, rng));
        put(
            format!("proj.{}.weight", self.target_name()),
            Matrix::glorot(self.target_dim, d, rng),
        );
        for p in &self.paths {
            for l in 0..self.config.encoder_layers {
                put(format!("enc.{}.l{l}.weight", p.name), Matrix::glorot(d, d, rng));
                put(format!("enc.{}.l{l}.att", p.name), Matrix::normal(2 * d, 1, 0.02, rng));
            }
        }
        put("sem.weight".into(), Matrix::glorot(d, d, rng));
        put("sem.bias".into(), Matrix::zeros(1, d));
        put("sem.query".into(), Matrix::normal(d, 1, 0.02, rng));
        for (t, f) in self.nontarget_features.iter().enumerate() {
            if let Some(f) = f {
                let n = &self.type_names[t];
                put(format!("mlp.{n}.w1"), Matrix::glorot(f.cols(), d, rng));
                put(format!("mlp.{n}.b1"), Matrix::zeros(1, d));
                put(format!("mlp.{n}.w2"), Matrix::glorot(d, d, rng));
                put(format!("mlp.{n}.b2"), Matrix::zeros(1, d));
                put(format!("mlp.{n}.prelu1"), Matrix::scalar(0.25));
                put(format!("mlp.{n}.prelu2"), Matrix::scalar(0.25));
            }
        }
        for p in &self.paths {
            for k in 0..p.hops.len() {
                put(format!("prop.{}.h{k}.att", p.name), Matrix::normal(2 * d, 1, 0.02, rng));
            }
        }
        put("dec.weight".into(), Matrix::glorot(d, d, rng));
        put("dec.att".into(), Matrix::normal(2 * d, 1, 0.02, rng));
        put("dec.out".into(), Matrix::glorot(d, self.target_dim, rng));
        put("dec.bias".into(), Matrix::zeros(1, self.target_dim));
        s
    }

    fn check_input(&self, input: &ForwardInput<'_>) -> Result<()> {
        if input.x_tar.shape() != (self.target_count, self.target_dim) {
            return Err(ModelError::Shape(format!(
                "target features {:?}, expected {:?}",
                input.x_tar.shape(),
                (self.target_count, self.target_dim)
            )));
        }
        if input.graphs.len() != self.paths.len() {
            return Err(ModelError::Shape(format!(
                "{} meta-path graphs for {} meta-paths",
                input.graphs.len(),
                self.paths.len()
            )));
        }
        if let Some(g) = input.graphs.iter().find(|g| g.num_nodes() != self.target_count) {
            return Err(ModelError::Shape(format!(
                "graph `{}` has {} nodes, expected {}",
                g.name,
                g.num_nodes(),
                self.target_count
            )));
        }
        Ok(())
    }

    /// Masked input features: `x_tar` plus the mask token on masked rows.
    fn input_features(&self, tape: &mut Tape, p: &ParamVars, input: &ForwardInput<'_>) -> Result<Var> {
        let x = tape.constant(input.x_tar.clone());
        match input.mask_rows {
            Some(m) if m.data().iter().any(|&v| v != 0.0) => {
                let ind = tape.constant(m.clone());
                let tok = tape.matmul(ind, p.get("mask_token"))?;
                Ok(tape.add(x, tok)?)
            }
            _ => Ok(x),
        }
    }

    /// Per meta-path target embeddings from stacked attention layers.
    pub fn encode(&self, tape: &mut Tape, p: &ParamVars, input: &ForwardInput<'_>) -> Result<Encoded> {
        self.check_input(input)?;
        let x = self.input_features(tape, p, input)?;
        let h0 = tape.matmul(x, p.get(&format!("proj.{}.weight", self.target_name())))?;
        let mut per_path = Vec::new();
        let mut attention = Vec::new();
        for (plan, g) in self.paths.iter().zip(input.graphs) {
            let edges = EdgeIndex::from_graph(g, self.config.gat_self_loops);
            let mut h = h0;
            let mut last = None;
            for l in 0..self.config.encoder_layers {
                let w = p.get(&format!("enc.{}.l{l}.weight", plan.name));
                let a = p.get(&format!("enc.{}.l{l}.att", plan.name));
                let gh = tape.matmul(h, w)?;
                let (z, alpha) = attention_layer(tape, gh, gh, &edges, a, &self.config, Some(h))?;
                h = z;
                last = alpha;
            }
            let att = match last {
                Some(a) => tape.value(a).data()[..g.edge_count()].to_vec(),
                None => Vec::new(),
            };
            per_path.push(h);
            attention.push(att);
        }
        Ok(Encoded {
            per_path,
            attention,
        })
    }

    /// Walk each meta-path from its middle to the target end and return the
    /// per-path messages arriving at target nodes.
    pub fn propagate(&self, tape: &mut Tape, p: &ParamVars, h_tar: Var) -> Result<Vec<Var>> {
        let mut projected: Vec<Option<Var>> = vec![None; self.type_names.len()];
        let mut embedding = |tape: &mut Tape, t: usize| -> Result<Var> {
            if t == self.target {
                return Ok(h_tar);
            }
            if let Some(v) = projected[t] {
                return Ok(v);
            }
            let f = self.nontarget_features[t]
                .as_ref()
                .ok_or_else(|| ModelError::MissingFeatures(self.type_names[t].clone()))?;
            let x = tape.constant(f.clone());
            let v = project_nontarget(tape, x, p, &self.type_names[t])?;
            projected[t] = Some(v);
            Ok(v)
        };
        let mut out = Vec::new();
        for plan in &self.paths {
            let Some(first) = plan.hops.first() else {
                continue;
            };
            let mut cur = embedding(tape, first.src_type)?;
            for (k, hop) in plan.hops.iter().enumerate() {
                let init = embedding(tape, hop.dst_type)?;
                let att = p.get(&format!("prop.{}.h{k}.att", plan.name));
                let last = k + 1 == plan.hops.len();
                let fallback = if last { None } else { Some(init) };
                cur = attention_layer(tape, init, cur, &hop.edges, att, &self.config, fallback)?.0;
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// `H' = H + sum_phi alpha_phi Z_phi` (without `H` when the residual is
    /// off); `H` itself when enhancement is off.
    pub fn enhance(&self, tape: &mut Tape, p: &ParamVars, fused: Var, alpha: Var) -> Result<Var> {
        if !self.config.enhancement {
            return Ok(fused);
        }
        let z = self.propagate(tape, p, fused)?;
        if z.len() != self.paths.len() {
            return Ok(fused);
        }
        let mix = weighted_sum(tape, &z, alpha)?;
        if self.config.residual {
            Ok(tape.add(fused, mix)?)
        } else {
            Ok(mix)
        }
    }

    /// One attention layer over the union of the given graphs, then a linear
    /// map back to the target feature dimension.
    pub fn decode(&self, tape: &mut Tape, p: &ParamVars, h: Var, graphs: &[MetaPathGraph]) -> Result<Var> {
        let refs: Vec<&MetaPathGraph> = graphs.iter().collect();
        let union = MetaPathGraph::union("decoder", &refs);
        let edges = EdgeIndex::from_graph(&union, self.config.gat_self_loops);
        let gh = tape.matmul(h, p.get("dec.weight"))?;
        let (z, _) = attention_layer(tape, gh, gh, &edges, p.get("dec.att"), &self.config, Some(h))?;
        let out = tape.matmul(z, p.get("dec.out"))?;
        Ok(tape.add(out, p.get("dec.bias"))?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, input: &ForwardInput<'_>) -> Result<Forward> {
        let enc = self.encode(tape, p, input)?;
        let (fused, alpha) = semantic_attention(
            tape,
            &enc.per_path,
            p.get("sem.weight"),
            p.get("sem.bias"),
            p.get("sem.query"),
        )?;
        let enhanced = self.enhance(tape, p, fused, alpha)?;
        let decoded = self.decode(tape, p, enhanced, input.graphs)?;
        Ok(Forward {
            per_path: enc.per_path,
            attention: enc.attention,
            alpha,
            fused,
            enhanced,
            decoded,
        })
    }

    /// Unmasked forward pass returning the enhanced target embeddings.
    pub fn embed(&self, params: &ParamStore, x_tar: &Matrix, graphs: &[MetaPathGraph]) -> Result<Matrix> {
        let mut tape = Tape::new(self.config.precision);
        let p = params.bind(&mut tape);
        let input = ForwardInput {
            x_tar,
            mask_rows: None,
            graphs,
        };
        let enc = self.encode(&mut tape, &p, &input)?;
        let (fused, alpha) = semantic_attention(
            &mut tape,
            &enc.per_path,
            p.get("sem.weight"),
            p.get("sem.bias"),
            p.get("sem.query"),
        )?;
        let h = self.enhance(&mut tape, &p, fused, alpha)?;
        Ok(tape.value(h).clone())
    }

    /// Last-layer encoder attention on unmasked inputs, per meta-path edge.
    pub fn edge_attention(
        &self,
        params: &ParamStore,
        x_tar: &Matrix,
        graphs: &[MetaPathGraph],
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(self.config.precision);
        let p = params.bind(&mut tape);
        let input = ForwardInput {
            x_tar,
            mask_rows: None,
            graphs,
        };
        Ok(self.encode(&mut tape, &p, &input)?.attention)
    }
}
