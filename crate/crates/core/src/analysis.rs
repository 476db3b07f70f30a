//! Connectivity of masked meta-path graphs and a synthetic heterogeneous
//! benchmark with planted classes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::mean_std;
use crate::hetgraph::{
    self, GraphError, HeteroGraph, MetaPathGraph, MetaPathSpec, NodeType, Relation,
};
use crate::masking::{self, MaskError, MaskStrategy};
use crate::matrix::Matrix;
use crate::train::derive_seed;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("rates must be ascending within [0, 1)")]
    Rates,
    #[error("attention strategy needs per-edge attention")]
    NoAttention,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Weakly connected components; isolated nodes count as components.
pub fn count_components(g: &MetaPathGraph) -> usize {
    let mut uf = UnionFind::new(g.num_nodes());
    let mut count = g.num_nodes();
    for &(s, d) in g.edges() {
        if uf.union(s as usize, d as usize) {
            count -= 1;
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentRow {
    pub strategy: MaskStrategy,
    pub rate: f64,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentSummary {
    pub strategy: MaskStrategy,
    pub rate: f64,
    pub mean: f64,
    pub std: f64,
}

/// Component counts for every `(strategy, rate, seed)`. Each seed drives
/// one RNG stream reused across rates, so masks are nested in the rate.
pub fn mask_sweep(
    g: &MetaPathGraph,
    strategies: &[MaskStrategy],
    rates: &[f64],
    n_seeds: usize,
    base_seed: u64,
    attention: Option<&[f64]>,
    c: f64,
) -> Result<Vec<ComponentRow>> {
    if rates.windows(2).any(|w| w[0] > w[1]) || rates.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(AnalysisError::Rates);
    }
    let mut rows = Vec::new();
    for &strategy in strategies {
        if strategy == MaskStrategy::Attention && attention.is_none() {
            return Err(AnalysisError::NoAttention);
        }
        for &rate in rates {
            for s in 0..n_seeds as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, s));
                let mask = masking::mask_edges(strategy, g, attention, rate, c, &mut rng)?;
                let masked = masking::apply_mask(g, &mask)?;
                rows.push(ComponentRow {
                    strategy,
                    rate,
                    seed: s,
                    count: count_components(&masked),
                });
            }
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation per `(strategy, rate)`, in first
/// appearance order.
pub fn summarize(rows: &[ComponentRow]) -> Vec<ComponentSummary> {
    let mut keys: Vec<(MaskStrategy, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(s, x)| s == r.strategy && x == r.rate) {
            keys.push((r.strategy, r.rate));
        }
    }
    keys.into_iter()
        .map(|(strategy, rate)| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == strategy && r.rate == rate)
                .map(|r| r.count as f64)
                .collect();
            let (mean, std) = mean_std(&xs);
            ComponentSummary {
                strategy,
                rate,
                mean,
                std,
            }
        })
        .collect()
}

pub fn components_csv(rows: &[ComponentRow]) -> String {
    let mut s = String::from("strategy,rate,seed,count\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.strategy, fmt_rate(r.rate), r.seed, r.count);
    }
    s
}

pub fn summary_csv(rows: &[ComponentSummary]) -> String {
    let mut s = String::from("strategy,rate,mean,std\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.strategy, fmt_rate(r.rate), r.mean, r.std);
    }
    s
}

fn fmt_rate(r: f64) -> String {
    let s = format!("{r:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() {
        "0".into()
    } else {
        s.into()
    }
}

/// Parse `start:stop:step` (inclusive, rounded to 1e-9) or a comma list.
pub fn parse_rates(s: &str) -> Option<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts.iter().map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        let (a, b, st) = (v[0], v[1], v[2]);
        if !(st > 0.0) || b < a {
            return None;
        }
        let n = ((b - a) / st + 1e-9).floor() as usize;
        return Some(
            (0..=n)
                .map(|k| ((a + k as f64 * st) * 1e9).round() / 1e9)
                .collect(),
        );
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// One intermediate node type linked to the target type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntermediateSpec {
    pub name: String,
    pub count: usize,
    pub dim: usize,
    pub noise: f64,
    /// Distinct target nodes linked to each intermediate node.
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub target: String,
    pub target_count: usize,
    pub target_dim: usize,
    pub target_noise: f64,
    pub classes: usize,
    /// Exponent of the power-law target activity. The first member of each
    /// intermediate node is drawn in proportion to activity, the others
    /// uniformly.
    pub exponent: f64,
    /// Upper cutoff of the activity distribution (lower cutoff is 1).
    pub max_activity: f64,
    /// Probability that a member is drawn from the intermediate node's own
    /// class; otherwise it is drawn from all targets.
    pub homophily: f64,
    pub intermediates: Vec<IntermediateSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            target: "author".into(),
            target_count: 500,
            target_dim: 32,
            target_noise: 2.0,
            classes: 3,
            exponent: 2.5,
            max_activity: 50.0,
            homophily: 0.7,
            intermediates: vec![
                IntermediateSpec {
                    name: "paper".into(),
                    count: 600,
                    dim: 16,
                    noise: 1.0,
                    members: 2,
                },
                IntermediateSpec {
                    name: "venue".into(),
                    count: 60,
                    dim: 16,
                    noise: 1.0,
                    members: 3,
                },
            ],
        }
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl SyntheticSpec {
    pub fn from_json(s: &str) -> std::result::Result<Self, String> {
        let spec: SyntheticSpec = serde_json::from_str(s).map_err(|e| e.to_string())?;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AnalysisError::Spec(m.to_owned()));
        if self.classes < 1 || self.target_count < self.classes {
            return bad("need 1 <= classes <= target_count");
        }
        if self.target_dim == 0 || !valid_name(&self.target) {
            return bad("target needs a valid name and dim >= 1");
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return bad("homophily outside [0, 1]");
        }
        if !(self.exponent > 1.0 && self.exponent.is_finite()) {
            return bad("exponent must be > 1");
        }
        if !(self.max_activity >= 1.0 && self.max_activity.is_finite()) {
            return bad("max_activity must be >= 1");
        }
        if !(self.target_noise >= 0.0 && self.target_noise.is_finite()) {
            return bad("noise must be >= 0");
        }
        if self.intermediates.is_empty() {
            return bad("at least one intermediate type is needed");
        }
        let mut names = BTreeSet::from([self.target.as_str()]);
        for i in &self.intermediates {
            if !valid_name(&i.name) || !names.insert(&i.name) {
                return bad("intermediate names must be valid and distinct");
            }
            if i.count < self.classes || i.dim == 0 {
                return bad("each intermediate needs count >= classes and dim >= 1");
            }
            if i.members == 0 || i.members > self.target_count / self.classes {
                return bad("members must be in 1..=target_count/classes");
            }
            if !(i.noise >= 0.0 && i.noise.is_finite()) {
                return bad("noise must be >= 0");
            }
        }
        Ok(())
    }

    fn metapath_name(&self, i: &IntermediateSpec) -> String {
        let initial = |s: &str| s[..1].to_ascii_uppercase();
        let short = format!("{}{}{}", initial(&self.target), initial(&i.name), initial(&self.target));
        let clash = self
            .intermediates
            .iter()
            .filter(|o| initial(&o.name) == initial(&i.name))
            .count()
            > 1;
        if clash {
            format!("{}_{}_{}", self.target, i.name, self.target)
        } else {
            short
        }
    }
}

fn class_centers<R: Rng>(classes: usize, dim: usize, rng: &mut R) -> Matrix {
    Matrix::normal(classes, dim, 1.0, rng)
}

fn features_for<R: Rng>(classes: &[usize], centers: &Matrix, noise: f64, rng: &mut R) -> Matrix {
    let mut x = Matrix::zeros(classes.len(), centers.cols());
    for (r, &c) in classes.iter().enumerate() {
        for (k, v) in x.row_mut(r).iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *v = centers.get(c, k) + noise * z;
        }
    }
    x.map(|v| v as f32 as f64)
}

/// Balanced class assignment, shuffled.
fn balanced<R: Rng>(n: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut c: Vec<usize> = (0..n).map(|i| i % classes).collect();
    c.shuffle(rng);
    c
}

fn weighted_pick<R: Rng>(cum: &[f64], rng: &mut R) -> usize {
    let total = *cum.last().expect("non-empty");
    let u = rng.gen::<f64>() * total;
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// Build the synthetic graph in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_class = balanced(spec.target_count, spec.classes, &mut rng);
    let t_centers = class_centers(spec.classes, spec.target_dim, &mut rng);
    let mut node_types = vec![NodeType {
        name: spec.target.clone(),
        ids: (0..spec.target_count).map(|i| format!("{}{i}", spec.target)).collect(),
    }];
    let mut features = vec![Some(features_for(&t_class, &t_centers, spec.target_noise, &mut rng))];
    let activity: Vec<f64> = (0..spec.target_count)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            u.powf(-1.0 / (spec.exponent - 1.0)).min(spec.max_activity)
        })
        .collect();
    let cumulative = |members: &[usize]| -> Vec<f64> {
        members
            .iter()
            .scan(0.0, |acc, &t| {
                *acc += activity[t];
                Some(*acc)
            })
            .collect()
    };
    let all: Vec<usize> = (0..spec.target_count).collect();
    let all_cum = cumulative(&all);
    let by_class: Vec<Vec<usize>> = (0..spec.classes)
        .map(|c| all.iter().copied().filter(|&t| t_class[t] == c).collect())
        .collect();
    let class_cum: Vec<Vec<f64>> = by_class.iter().map(|m| cumulative(m)).collect();
    let mut relations = Vec::new();
    let mut metapaths = Vec::new();
    for (k, im) in spec.intermediates.iter().enumerate() {
        let i_class = balanced(im.count, spec.classes, &mut rng);
        let centers = class_centers(spec.classes, im.dim, &mut rng);
        features.push(Some(features_for(&i_class, &centers, im.noise, &mut rng)));
        let mut edges = BTreeSet::new();
        for (j, &c) in i_class.iter().enumerate() {
            let mut picked = BTreeSet::new();
            while picked.len() < im.members {
                let own = rng.gen::<f64>() < spec.homophily;
                let t = match (picked.is_empty(), own) {
                    (true, true) => by_class[c][weighted_pick(&class_cum[c], &mut rng)],
                    (true, false) => weighted_pick(&all_cum, &mut rng),
                    (false, true) => by_class[c][rng.gen_range(0..by_class[c].len())],
                    (false, false) => rng.gen_range(0..spec.target_count),
                };
                picked.insert(t);
            }
            edges.extend(picked.into_iter().map(|t| (t as u32, j as u32)));
        }
        let rel = format!("{}_{}", spec.target, im.name);
        relations.push(Relation {
            name: rel.clone(),
            src: 0,
            dst: k + 1,
            edges: edges.into_iter().collect(),
        });
        metapaths.push(MetaPathSpec::new(
            spec.metapath_name(im),
            &[rel.as_str(), &format!("{rel}^-1")],
        ));
        node_types.push(NodeType {
            name: im.name.clone(),
            ids: (0..im.count).map(|i| format!("{}{i}", im.name)).collect(),
        });
    }
    let g = HeteroGraph {
        node_types,
        relations,
        features,
        labels: Some(t_class.iter().map(|&c| Some(c as u32)).collect()),
        target: 0,
        metapaths,
    };
    if let Some(v) = g.validate().first() {
        return Err(AnalysisError::Spec(v.to_string()));
    }
    Ok(g)
}

/// Generate the synthetic dataset into `out_dir`.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> std::result::Result<HeteroGraph, String> {
    let g = synthesize(spec).map_err(|e| e.to_string())?;
    hetgraph::write_dataset(&g, out_dir).map_err(|e| e.to_string())?;
    Ok(g)
}

/// `id<TAB>v1<TAB>...<TAB>vd` per row.
pub fn embeddings_tsv(ids: &[String], emb: &Matrix) -> String {
    let mut s = String::new();
    for (r, id) in ids.iter().enumerate() {
        s.push_str(id);
        for v in emb.row(r) {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

/// `label<TAB>v1<TAB>...<TAB>vd` per row; unlabeled nodes get -1.
pub fn export_for_tsne(emb: &Matrix, labels: &[Option<u32>]) -> String {
    let mut s = String::new();
    for r in 0..emb.rows() {
        match labels.get(r).copied().flatten() {
            Some(l) => {
                let _ = write!(s, "{l}");
            }
            None => s.push_str("-1"),
        }
        for v in emb.row(r) {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}
