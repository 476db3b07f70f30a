//! Meta-path edge masking (random, degree-weighted, attention-weighted) and
//! target feature masking.
//!
//! Weighted strategies draw edges one at a time without replacement, each
//! draw proportional to the weights of the edges still available, so an
//! ordered sample `x1..xk` has probability
//! `w[x1] * w[x2] / (1 - w[x1]) * ... * w[xk] / (1 - w[x1] - ... - w[x(k-1)])`
//! for weights normalized to sum to one. Draws from the same RNG stream are
//! prefix-stable: the first `k` edges of a larger sample equal the sample of
//! size `k`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::MetaPathGraph;
use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("rate {0} outside [0, 1)")]
    RateOutOfRange(f64),
    #[error("cannot weight an empty edge set")]
    EmptyEdgeSet,
    #[error("cannot draw {k} items from a support of {support}")]
    TooManyDraws { k: usize, support: usize },
    #[error("weight {index} is negative or non-finite ({value})")]
    BadWeight { index: usize, value: f64 },
    #[error("attention entry {index} is {value}; expected a value in (0, 1]")]
    AttentionDomain { index: usize, value: f64 },
    #[error("{found} attention values for {expected} edges")]
    AttentionLength { expected: usize, found: usize },
    #[error("mask built for {expected} edges applied to a graph with {found}")]
    StalePlan { expected: usize, found: usize },
    #[error("masked edge index {index} out of range for {count} edges")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("unknown mask strategy `{0}` (expected random, degree or attention)")]
    UnknownStrategy(String),
}

pub type Result<T> = std::result::Result<T, MaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Degree,
    Attention,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [Self::Random, Self::Degree, Self::Attention];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Degree => "degree",
            Self::Attention => "attention",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStrategy {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "degree" => Ok(Self::Degree),
            "attention" => Ok(Self::Attention),
            other => Err(MaskError::UnknownStrategy(other.to_owned())),
        }
    }
}

/// Edges removed from one meta-path graph, in draw order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeMask {
    pub metapath: String,
    /// Edge count of the graph the mask was drawn for.
    pub edge_count: usize,
    pub indices: Vec<usize>,
}

/// Everything removed in one masking round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    pub mask_rate: f64,
    pub node_rate: f64,
    pub attr_rate: f64,
    pub seed: u64,
    pub edges: Vec<EdgeMask>,
    pub masked_nodes: Vec<usize>,
    pub masked_attributes: Vec<(usize, usize)>,
}

impl MaskPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask plan serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Per-edge sampling weights, normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights(Vec<f64>);

impl EdgeWeights {
    /// Normalize non-negative raw weights.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(MaskError::EmptyEdgeSet);
        }
        check_weights(&raw)?;
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(MaskError::TooManyDraws { k: 1, support: 0 });
        }
        Ok(Self(raw.into_iter().map(|w| w / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    match w.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(index) => Err(MaskError::BadWeight {
            index,
            value: w[index],
        }),
        None => Ok(()),
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(MaskError::RateOutOfRange(rate))
    }
}

/// `floor(rate * n)`, tolerant of the representation error in decimal rates
/// (`0.29 * 100` is `28.999…` in binary floating point).
pub fn masked_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) + 1e-9).floor() as usize
}

/// Degree weight of each edge: the mean of the source's out-degree and the
/// destination's in-degree, normalized over the graph.
pub fn edge_degree_weights(mpg: &MetaPathGraph) -> Result<EdgeWeights> {
    let (out, inn) = (mpg.out_degree(), mpg.in_degree());
    let raw = mpg
        .edges()
        .iter()
        .map(|&(s, d)| (out[s as usize] as f64 + inn[d as usize] as f64) / 2.0)
        .collect();
    EdgeWeights::normalized(raw)
}

/// Fenwick tree over non-negative weights supporting weighted draws and
/// removals in `O(log n)`.
struct Fenwick {
    tree: Vec<f64>,
    weights: Vec<f64>,
}

impl Fenwick {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let mut tree = vec![0.0; n + 1];
        for (i, &w) in weights.iter().enumerate() {
            tree[i + 1] += w;
            let parent = (i + 1) + ((i + 1) & (!(i + 1) + 1));
            if parent <= n {
                let carry = tree[i + 1];
                tree[parent] += carry;
            }
        }
        Self {
            tree,
            weights: weights.to_vec(),
        }
    }

    fn total(&self) -> f64 {
        let mut i = self.weights.len();
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }

    fn remove(&mut self, idx: usize) {
        let w = self.weights[idx];
        self.weights[idx] = 0.0;
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] -= w;
            i += i & (!i + 1);
        }
    }

    /// Index whose cumulative interval contains `u` in `[0, total)`.
    fn find(&self, u: f64) -> usize {
        let n = self.weights.len();
        let mut pos = 0;
        let mut rem = u;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        if pos < n && self.weights[pos] > 0.0 {
            return pos;
        }
        // Rounding pushed the search onto a spent or out-of-range slot; take
        // the nearest live entry before it, else after it.
        let back = (0..pos.min(n)).rev().find(|&i| self.weights[i] > 0.0);
        back.or_else(|| (pos..n).find(|&i| self.weights[i] > 0.0))
            .expect("at least one live weight")
    }
}

/// Ordered weighted sample of `k` distinct indices (successive draws
/// proportional to the remaining weights). Weights need not be normalized.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_weights(weights)?;
    let support = weights.iter().filter(|&&w| w > 0.0).count();
    if k > support {
        return Err(MaskError::TooManyDraws { k, support });
    }
    let mut tree = Fenwick::new(weights);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let u = rng.gen::<f64>() * tree.total();
        let idx = tree.find(u);
        tree.remove(idx);
        out.push(idx);
    }
    Ok(out)
}

/// Uniform ordered sample of `k` distinct indices from `0..n` by a partial
/// Fisher-Yates shuffle.
pub fn sample_uniform<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > n {
        return Err(MaskError::TooManyDraws { k, support: n });
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

pub fn mask_edges_random<R: Rng + ?Sized>(
    mpg: &MetaPathGraph,
    rate: f64,
    rng: &mut R,
) -> Result<EdgeMask> {
    check_rate(rate)?;
    let e = mpg.edge_count();
    Ok(EdgeMask {
        metapath: mpg.name.clone(),
        edge_count: e,
        indices: sample_uniform(e, masked_count(rate, e), rng)?,
    })
}

pub fn mask_edges_by_degree<R: Rng + ?Sized>(
    mpg: &MetaPathGraph,
    rate: f64,
    rng: &mut R,
) -> Result<EdgeMask> {
    check_rate(rate)?;
    let e = mpg.edge_count();
    let k = masked_count(rate, e);
    let indices = if k == 0 {
        Vec::new()
    } else {
        let w = edge_degree_weights(mpg)?;
        sample_without_replacement(w.as_slice(), k, rng)?
    };
    Ok(EdgeMask {
        metapath: mpg.name.clone(),
        edge_count: e,
        indices,
    })
}

/// Pre-softmax scores from normalized attention: `z = ln(p) + c`.
pub fn recover_attention_logits(p: &[f64], c: f64) -> Result<Vec<f64>> {
    p.iter()
        .enumerate()
        .map(|(index, &v)| {
            if v > 0.0 && v <= 1.0 {
                Ok(v.ln() + c)
            } else {
                Err(MaskError::AttentionDomain { index, value: v })
            }
        })
        .collect()
}

/// Sample edges with weights `exp(z)` recovered from per-destination
/// attention, normalized across the whole graph. Because every weight
/// carries the same factor `e^c`, the sample distribution does not depend
/// on `c`.
pub fn mask_edges_by_attention<R: Rng + ?Sized>(
    mpg: &MetaPathGraph,
    attention: &[f64],
    rate: f64,
    c: f64,
    rng: &mut R,
) -> Result<EdgeMask> {
    check_rate(rate)?;
    let e = mpg.edge_count();
    if attention.len() != e {
        return Err(MaskError::AttentionLength {
            expected: e,
            found: attention.len(),
        });
    }
    let z = recover_attention_logits(attention, c)?;
    let k = masked_count(rate, e);
    let indices = if k == 0 {
        Vec::new()
    } else {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = EdgeWeights::normalized(z.iter().map(|&v| (v - max).exp()).collect())?;
        sample_without_replacement(w.as_slice(), k, rng)?
    };
    Ok(EdgeMask {
        metapath: mpg.name.clone(),
        edge_count: e,
        indices,
    })
}

/// Dispatch on `strategy`. Attention masking without coefficients (before
/// the first encoder pass) falls back to random masking.
pub fn mask_edges<R: Rng + ?Sized>(
    strategy: MaskStrategy,
    mpg: &MetaPathGraph,
    attention: Option<&[f64]>,
    rate: f64,
    c: f64,
    rng: &mut R,
) -> Result<EdgeMask> {
    match (strategy, attention) {
        (MaskStrategy::Random, _) | (MaskStrategy::Attention, None) => {
            mask_edges_random(mpg, rate, rng)
        }
        (MaskStrategy::Degree, _) => mask_edges_by_degree(mpg, rate, rng),
        (MaskStrategy::Attention, Some(a)) => mask_edges_by_attention(mpg, a, rate, c, rng),
    }
}

/// Masked copy of `mpg`; the input graph is left untouched.
pub fn apply_mask(mpg: &MetaPathGraph, mask: &EdgeMask) -> Result<MetaPathGraph> {
    if mask.edge_count != mpg.edge_count() {
        return Err(MaskError::StalePlan {
            expected: mask.edge_count,
            found: mpg.edge_count(),
        });
    }
    if let Some(&index) = mask.indices.iter().find(|&&i| i >= mpg.edge_count()) {
        return Err(MaskError::IndexOutOfRange {
            index,
            count: mpg.edge_count(),
        });
    }
    Ok(mpg.without_edges(&mask.indices))
}

/// Which target rows and entries are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMask {
    pub masked_nodes: Vec<usize>,
    /// `(node, attribute)` entries zeroed among the remaining nodes.
    pub masked_attributes: Vec<(usize, usize)>,
}

/// Fully mask `floor(node_rate * N)` uniformly chosen rows; zero each entry
/// of the remaining rows independently with probability `attr_rate`.
pub fn mask_node_features<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    node_rate: f64,
    attr_rate: f64,
    rng: &mut R,
) -> Result<FeatureMask> {
    check_rate(node_rate)?;
    check_rate(attr_rate)?;
    let mut masked_nodes = sample_uniform(rows, masked_count(node_rate, rows), rng)?;
    masked_nodes.sort_unstable();
    let mut masked_attributes = Vec::new();
    if attr_rate > 0.0 {
        let mut full = vec![false; rows];
        for &n in &masked_nodes {
            full[n] = true;
        }
        for (r, &is_masked) in full.iter().enumerate() {
            if is_masked {
                continue;
            }
            for c in 0..cols {
                if rng.gen::<f64>() < attr_rate {
                    masked_attributes.push((r, c));
                }
            }
        }
    }
    Ok(FeatureMask {
        masked_nodes,
        masked_attributes,
    })
}

impl FeatureMask {
    /// `x` with masked rows and masked entries set to zero.
    pub fn zeroed(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for &n in &self.masked_nodes {
            out.row_mut(n).fill(0.0);
        }
        for &(r, c) in &self.masked_attributes {
            out.set(r, c, 0.0);
        }
        out
    }

    /// `N x 1` indicator of fully masked rows.
    pub fn row_indicator(&self, rows: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, 1);
        for &n in &self.masked_nodes {
            m.set(n, 0, 1.0);
        }
        m
    }

    /// `x` with masked rows replaced by `token` (length `cols`) and masked
    /// entries zeroed.
    pub fn apply(&self, x: &Matrix, token: &[f64]) -> Matrix {
        let mut out = self.zeroed(x);
        for &n in &self.masked_nodes {
            out.row_mut(n).copy_from_slice(token);
        }
        out
    }
}
