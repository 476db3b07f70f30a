#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use hgae_core::hetgraph::{HeteroGraph, MetaPathSpec, NodeType, Relation};
use hgae_core::matrix::Matrix;
use rand::Rng;

/// Author/paper/venue graph with `AP` and `PV` relations and the meta-paths
/// `APA` and `APVPA`. Every type carries random features.
pub fn random_apv<R: Rng>(rng: &mut R, max_per_type: usize, density: f64) -> HeteroGraph {
    let na = rng.gen_range(1..=max_per_type);
    let np = rng.gen_range(1..=max_per_type);
    let nv = rng.gen_range(1..=max_per_type.min(8));
    apv(rng, na, np, nv, density)
}

pub fn apv<R: Rng>(rng: &mut R, na: usize, np: usize, nv: usize, density: f64) -> HeteroGraph {
    let mut ap = Vec::new();
    for a in 0..na {
        for p in 0..np {
            if rng.gen::<f64>() < density {
                ap.push((a as u32, p as u32));
            }
        }
    }
    let mut pv = Vec::new();
    for p in 0..np {
        if rng.gen::<f64>() < 0.9 {
            pv.push((p as u32, rng.gen_range(0..nv) as u32));
        }
        if rng.gen::<f64>() < 0.3 {
            pv.push((p as u32, rng.gen_range(0..nv) as u32));
        }
    }
    pv.sort_unstable();
    pv.dedup();
    let ids = |pre: &str, n: usize| (0..n).map(|i| format!("{pre}{i}")).collect();
    let feats = |rng: &mut R, n: usize, d: usize| {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let fa = feats(rng, na, 5);
    let fp = feats(rng, np, 3);
    let fv = feats(rng, nv, 2);
    let labels = (0..na).map(|_| Some(rng.gen_range(0..3))).collect();
    HeteroGraph {
        node_types: vec![
            NodeType { name: "author".into(), ids: ids("a", na) },
            NodeType { name: "paper".into(), ids: ids("p", np) },
            NodeType { name: "venue".into(), ids: ids("v", nv) },
        ],
        relations: vec![
            Relation { name: "AP".into(), src: 0, dst: 1, edges: ap },
            Relation { name: "PV".into(), src: 1, dst: 2, edges: pv },
        ],
        features: vec![Some(fa), Some(fp), Some(fv)],
        labels: Some(labels),
        target: 0,
        metapaths: vec![
            MetaPathSpec::new("APA", &["AP", "AP^-1"]),
            MetaPathSpec::new("APVPA", &["AP", "PV", "PV^-1", "AP^-1"]),
        ],
    }
}

/// Path multiplicities of every target pair joined by a typed walk along
/// `spec`, found by depth-first enumeration.
pub fn dfs_path_counts(g: &HeteroGraph, spec: &MetaPathSpec) -> BTreeMap<(u32, u32), usize> {
    let mut steps: Vec<HashMap<u32, Vec<u32>>> = Vec::new();
    for s in &spec.steps {
        let r = g.relations.iter().find(|r| r.name == s.relation).unwrap();
        let mut m: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(a, b) in &r.edges {
            let (from, to) = if s.reversed { (b, a) } else { (a, b) };
            m.entry(from).or_default().push(to);
        }
        steps.push(m);
    }
    fn walk(
        steps: &[HashMap<u32, Vec<u32>>],
        depth: usize,
        node: u32,
        start: u32,
        out: &mut BTreeMap<(u32, u32), usize>,
    ) {
        if depth == steps.len() {
            *out.entry((start, node)).or_default() += 1;
            return;
        }
        if let Some(next) = steps[depth].get(&node) {
            for &v in next {
                walk(steps, depth + 1, v, start, out);
            }
        }
    }
    let mut out = BTreeMap::new();
    for start in 0..g.target_count() as u32 {
        walk(&steps, 0, start, start, &mut out);
    }
    out
}

pub fn dfs_adjacency(g: &HeteroGraph, spec: &MetaPathSpec, self_loops: bool) -> Vec<(u32, u32)> {
    dfs_path_counts(g, spec)
        .into_keys()
        .filter(|(u, v)| self_loops || u != v)
        .collect()
}

/// Weakly connected components by iterative flood fill.
pub fn dfs_components(n: usize, edges: &[(u32, u32)]) -> usize {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u as usize].push(v as usize);
        adj[v as usize].push(u as usize);
    }
    let mut seen = vec![false; n];
    let mut count = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

pub fn brute_micro_f1(y: &[u32], p: &[u32]) -> f64 {
    let classes: BTreeSet<u32> = y.iter().chain(p).copied().collect();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &c in &classes {
        for i in 0..y.len() {
            match (y[i] == c, p[i] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn brute_macro_f1(y: &[u32], p: &[u32]) -> f64 {
    let classes: BTreeSet<u32> = y.iter().chain(p).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for i in 0..y.len() {
            match (y[i] == c, p[i] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        total += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    total / classes.len() as f64
}

/// One-vs-rest AUC by explicit enumeration of positive/negative pairs,
/// averaged over classes present in `y` with at least one negative.
pub fn brute_auc(y: &[u32], scores: &Matrix) -> f64 {
    let classes: BTreeSet<u32> = y.iter().copied().collect();
    let mut sum = 0.0;
    let mut n = 0;
    for &c in &classes {
        let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        let neg: Vec<usize> = (0..y.len()).filter(|&i| y[i] != c).collect();
        if neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for &i in &pos {
            for &j in &neg {
                let (si, sj) = (scores.get(i, c as usize), scores.get(j, c as usize));
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        sum += wins / (pos.len() * neg.len()) as f64;
        n += 1;
    }
    sum / n as f64
}

/// Probability of drawing exactly the ordered sequence `seq` by successive
/// draws proportional to the remaining weights.
pub fn chain_probability(w: &[f64], seq: &[usize]) -> f64 {
    let mut left: f64 = w.iter().sum();
    let mut p = 1.0;
    for &i in seq {
        p *= w[i] / left;
        left -= w[i];
    }
    p
}

/// Every ordered sequence of `k` distinct indices from `0..n`.
pub fn ordered_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for s in ordered_sequences(n, k - 1) {
        for i in 0..n {
            if !s.contains(&i) {
                let mut t = s.clone();
                t.push(i);
                out.push(t);
            }
        }
    }
    out
}

/// Total-variation distance between empirical counts and exact
/// probabilities of the same outcomes.
pub fn total_variation(counts: &HashMap<Vec<usize>, usize>, exact: &[(Vec<usize>, f64)]) -> f64 {
    let n: usize = counts.values().sum();
    let mut tv = 0.0;
    for (seq, p) in exact {
        let f = counts.get(seq).copied().unwrap_or(0) as f64 / n as f64;
        tv += (f - p).abs();
    }
    let unexplained: usize = counts
        .iter()
        .filter(|(s, _)| !exact.iter().any(|(e, _)| e == *s))
        .map(|(_, c)| c)
        .sum();
    0.5 * (tv + unexplained as f64 / n as f64)
}

/// Central-difference check of the full training loss on a 10-author,
/// 2-meta-path graph under one random mask plan, in 64-bit mode.
pub fn end_to_end_grad_check(seed: u64) -> hgae_core::gradcheck::GradCheckReport {
    use hgae_core::config::Config;
    use hgae_core::tape::Precision;
    use hgae_core::train::Prepared;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = apv(&mut rng, 10, 8, 3, 0.25);
    let cfg = Config {
        hidden_dim: 6,
        precision: Precision::F64,
        seed,
        ..Config::default()
    };
    let prep = Prepared::new(&g, &cfg).unwrap();
    let params = prep.init_params();
    let plan = prep.draw_plan(seed, None).unwrap();
    let batch = prep.batch(&plan).unwrap();
    hgae_core::gradcheck::grad_check(
        |tape, vars| {
            let p = params.wrap(vars.to_vec());
            Ok(prep.record_loss(tape, &p, &batch).unwrap().total)
        },
        params.values(),
        1e-5,
    )
    .unwrap()
}
