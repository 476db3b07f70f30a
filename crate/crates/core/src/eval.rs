//! Stratified splits, frozen-embedding linear probe, classification metrics
//! and ablation runs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{AdamConfig, AdamState};
use crate::config::{Config, ProbeConfig};
use crate::hetgraph::HeteroGraph;
use crate::masking::MaskStrategy;
use crate::matrix::Matrix;
use crate::train::{self, derive_seed, Prepared, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} labels vs {1} predictions")]
    Length(usize, usize),
    #[error("class {class} has {count} labeled nodes; at least 3 are needed")]
    SmallClass { class: u32, count: usize },
    #[error("training split contains a single class")]
    SingleClass,
    #[error("class {0} is absent from the true labels")]
    AbsentClass(usize),
    #[error("split {0}% is not one of 20, 40, 60")]
    BadSplit(u32),
    #[error("graph has no labels")]
    NoLabels,
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class, `floor(pct * n_class / 100)` training nodes; the rest is split
/// evenly between validation and test (test takes the odd one). `labeled`
/// holds `(node, class)` pairs; returned indices are node ids.
pub fn make_splits(labeled: &[(usize, u32)], pct: u32, seed: u64) -> Result<Splits> {
    if ![20, 40, 60].contains(&pct) {
        return Err(EvalError::BadSplit(pct));
    }
    if labeled.is_empty() {
        return Err(EvalError::Empty);
    }
    let classes: BTreeSet<u32> = labeled.iter().map(|&(_, c)| c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in classes {
        let mut nodes: Vec<usize> = labeled.iter().filter(|l| l.1 == c).map(|l| l.0).collect();
        if nodes.len() < 3 {
            return Err(EvalError::SmallClass {
                class: c,
                count: nodes.len(),
            });
        }
        nodes.sort_unstable();
        nodes.shuffle(&mut rng);
        let n_train = pct as usize * nodes.len() / 100;
        let n_val = (nodes.len() - n_train) / 2;
        s.train.extend_from_slice(&nodes[..n_train]);
        s.val.extend_from_slice(&nodes[n_train..n_train + n_val]);
        s.test.extend_from_slice(&nodes[n_train + n_val..]);
    }
    Ok(s)
}

fn check_pair(y_true: &[u32], y_pred: &[u32]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::Length(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// `(tp, fp, fn)` for each class in the union of both label sets.
fn per_class_counts(y_true: &[u32], y_pred: &[u32]) -> Vec<(u64, u64, u64)> {
    let classes: BTreeSet<u32> = y_true.iter().chain(y_pred).copied().collect();
    classes
        .into_iter()
        .map(|c| {
            let mut k = (0, 0, 0);
            for (&t, &p) in y_true.iter().zip(y_pred) {
                match (t == c, p == c) {
                    (true, true) => k.0 += 1,
                    (false, true) => k.1 += 1,
                    (true, false) => k.2 += 1,
                    _ => {}
                }
            }
            k
        })
        .collect()
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

pub fn micro_f1(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let (tp, fp, fn_) = per_class_counts(y_true, y_pred)
        .into_iter()
        .fold((0, 0, 0), |a, k| (a.0 + k.0, a.1 + k.1, a.2 + k.2));
    Ok(f1(tp, fp, fn_))
}

pub fn macro_f1(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let counts = per_class_counts(y_true, y_pred);
    let sum: f64 = counts.iter().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).sum();
    Ok(sum / counts.len() as f64)
}

/// One-vs-rest AUC per class from rank sums (ties share their mean rank),
/// averaged over classes. `scores` is `N x C`; every class `0..C` must occur
/// in `y_true` and at least one other class must too.
pub fn auc_ovr(y_true: &[u32], scores: &Matrix) -> Result<f64> {
    if y_true.len() != scores.rows() {
        return Err(EvalError::Length(y_true.len(), scores.rows()));
    }
    if y_true.is_empty() || scores.cols() == 0 {
        return Err(EvalError::Empty);
    }
    let n = y_true.len();
    let mut total = 0.0;
    for c in 0..scores.cols() {
        let n_pos = y_true.iter().filter(|&&y| y as usize == c).count();
        if n_pos == 0 || n_pos == n {
            return Err(EvalError::AbsentClass(c));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores.get(a, c).total_cmp(&scores.get(b, c)));
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && scores.get(order[j + 1], c) == scores.get(order[i], c) {
                j += 1;
            }
            // ranks i+1 ..= j+1 share their mean
            let mean_rank = (i + j + 2) as f64 / 2.0;
            for &k in &order[i..=j] {
                if y_true[k] as usize == c {
                    rank_sum += mean_rank;
                }
            }
            i = j + 1;
        }
        let n_neg = n - n_pos;
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        total += u / (n_pos * n_neg) as f64;
    }
    Ok(total / scores.cols() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn argmax_rows(m: &Matrix) -> Vec<u32> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Multinomial logistic regression on frozen embeddings. Columns are
/// standardized with training-set statistics; weights start at zero and
/// are trained full-batch with Adam on cross-entropy plus `l2/2 * |W|^2`.
/// The last step with the best validation Mi-F1 is scored on the test set.
pub fn linear_probe(
    emb: &Matrix,
    labels: &[Option<u32>],
    splits: &Splits,
    cfg: &ProbeConfig,
) -> Result<Metrics> {
    let n_class = labels.iter().flatten().max().map_or(0, |&m| m as usize + 1);
    let lab = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| labels[i].expect("labeled")).collect() };
    let (y_tr, y_va, y_te) = (lab(&splits.train), lab(&splits.val), lab(&splits.test));
    if y_tr.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(EvalError::SingleClass);
    }
    let d = emb.cols();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &splits.train {
        for (m, &v) in mean.iter_mut().zip(emb.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= splits.train.len() as f64);
    for &i in &splits.train {
        for ((s, &m), &v) in sd.iter_mut().zip(&mean).zip(emb.row(i)) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / splits.train.len() as f64).sqrt().max(1e-12));
    let standardize = |idx: &[usize]| {
        let mut x = emb.gather_rows(idx);
        for r in 0..x.rows() {
            for ((v, &m), &s) in x.row_mut(r).iter_mut().zip(&mean).zip(&sd) {
                *v = (*v - m) / s;
            }
        }
        x
    };
    let (x_tr, x_va, x_te) = (
        standardize(&splits.train),
        standardize(&splits.val),
        standardize(&splits.test),
    );
    let mut y_onehot = Matrix::zeros(y_tr.len(), n_class);
    for (r, &y) in y_tr.iter().enumerate() {
        y_onehot.set(r, y as usize, 1.0);
    }
    let mut params = vec![Matrix::zeros(d, n_class), Matrix::zeros(1, n_class)];
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        [(d, n_class), (1, n_class)],
    );
    let logits = |x: &Matrix, p: &[Matrix]| {
        let mut z = x.matmul(&p[0]);
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(p[1].data()) {
                *v += b;
            }
        }
        z
    };
    let score_val = |p: &[Matrix]| -> f64 {
        if y_va.is_empty() {
            return 0.0;
        }
        micro_f1(&y_va, &argmax_rows(&logits(&x_va, p))).unwrap_or(0.0)
    };
    let mut best = (score_val(&params), params.clone());
    let n = y_tr.len() as f64;
    for _ in 0..cfg.steps {
        let mut g = softmax_rows(&logits(&x_tr, &params));
        g.add_assign(&y_onehot.map(|v| -v));
        g.scale_in_place(1.0 / n);
        let mut gw = x_tr.matmul_tn(&g);
        gw.add_assign(&params[0].map(|w| cfg.l2 * w));
        let mut gb = Matrix::zeros(1, n_class);
        for r in 0..g.rows() {
            for (b, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                *b += v;
            }
        }
        adam.step(&mut params, &[gw, gb]).expect("probe shapes");
        let s = score_val(&params);
        if s >= best.0 {
            best = (s, params.clone());
        }
    }
    let z = logits(&x_te, &best.1);
    let pred = argmax_rows(&z);
    let probs = softmax_rows(&z);
    Ok(Metrics {
        micro_f1: micro_f1(&y_te, &pred)?,
        macro_f1: macro_f1(&y_te, &pred)?,
        auc: auc_ovr(&y_te, &probs)?,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Probe metrics for each of `cfg.seeds` independent splits.
pub fn probe_split(
    emb: &Matrix,
    labels: &[Option<u32>],
    pct: u32,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<Metrics>> {
    let labeled: Vec<(usize, u32)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|c| (i, c)))
        .collect();
    (0..cfg.seeds)
        .map(|s| {
            let splits = make_splits(&labeled, pct, derive_seed(seed, s as u64 + 1000 * pct as u64))?;
            linear_probe(emb, labels, &splits, cfg)
        })
        .collect()
}

/// Probe metrics averaged over `cfg.seeds` independent splits.
pub fn evaluate_split(
    emb: &Matrix,
    labels: &[Option<u32>],
    pct: u32,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Metrics> {
    let acc = probe_split(emb, labels, pct, cfg, seed)?;
    let avg = |f: fn(&Metrics) -> f64| acc.iter().map(f).sum::<f64>() / acc.len() as f64;
    Ok(Metrics {
        micro_f1: avg(|m| m.micro_f1),
        macro_f1: avg(|m| m.macro_f1),
        auc: avg(|m| m.auc),
    })
}

/// Fraction of the most frequent class among labeled nodes.
pub fn majority_fraction(labels: &[Option<u32>]) -> f64 {
    let ys: Vec<u32> = labels.iter().flatten().copied().collect();
    let classes: BTreeSet<u32> = ys.iter().copied().collect();
    let best = classes
        .iter()
        .map(|c| ys.iter().filter(|&y| y == c).count())
        .max()
        .unwrap_or(0);
    best as f64 / ys.len().max(1) as f64
}

/// Model variants compared in ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    FeatOnly,
    MpOnly,
    NoEnhancement,
    Mask(Option<MaskStrategy>),
}

impl Variant {
    pub fn apply(self, base: &Config) -> Config {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::FeatOnly => c.lambda_mp = 0.0,
            Variant::MpOnly => c.lambda_feat = 0.0,
            Variant::NoEnhancement => c.enhancement = false,
            Variant::Mask(Some(s)) => c.mask_strategy = s,
            Variant::Mask(None) => {
                c.mask_rate = 0.0;
                c.node_mask_rate = 0.0;
                c.attr_mask_rate = 0.0;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::FeatOnly => f.write_str("feat_only"),
            Variant::MpOnly => f.write_str("mp_only"),
            Variant::NoEnhancement => f.write_str("no_enhancement"),
            Variant::Mask(None) => f.write_str("mask_none"),
            Variant::Mask(Some(s)) => write!(f, "mask_{s}"),
        }
    }
}

impl FromStr for Variant {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "feat_only" => Variant::FeatOnly,
            "mp_only" => Variant::MpOnly,
            "no_enhancement" => Variant::NoEnhancement,
            "mask_none" => Variant::Mask(None),
            other => match other.strip_prefix("mask_").map(str::parse::<MaskStrategy>) {
                Some(Ok(m)) => Variant::Mask(Some(m)),
                _ => return Err(EvalError::UnknownVariant(other.to_owned())),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub split: u32,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    /// Per-seed values behind `mean` and `std`.
    #[serde(skip)]
    pub values: Vec<f64>,
}

/// Train, embed and probe every variant for `n_seeds` training seeds.
/// Cells run on the current rayon pool; results are assembled in a fixed
/// order.
pub fn run_ablation(
    g: &HeteroGraph,
    base: &Config,
    variants: &[Variant],
    n_seeds: usize,
) -> Result<Vec<AblationRow>> {
    let labels = g.labels.clone().ok_or(EvalError::NoLabels)?;
    let cells: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..n_seeds).map(move |s| (v, s)))
        .collect();
    let results: Vec<Result<Vec<Metrics>>> = cells
        .par_iter()
        .map(|&(v, s)| {
            let mut c = variants[v].apply(base);
            c.seed = derive_seed(base.seed, s as u64);
            let prep = Prepared::new(g, &c)?;
            let out = train::train(&prep, |_| {})?;
            let emb = prep.model.embed(&out.params, &prep.x_tar, &prep.graphs).map_err(TrainError::from)?;
            c.splits
                .iter()
                .map(|&pct| evaluate_split(&emb, &labels, pct, &c.probe, derive_seed(base.seed, 77)))
                .collect()
        })
        .collect();
    let mut per_cell = Vec::with_capacity(results.len());
    for r in results {
        per_cell.push(r?);
    }
    let mut rows = Vec::new();
    for (v, variant) in variants.iter().enumerate() {
        for (k, &pct) in base.splits.iter().enumerate() {
            for (metric, get) in [
                ("micro_f1", (|m: &Metrics| m.micro_f1) as fn(&Metrics) -> f64),
                ("macro_f1", |m: &Metrics| m.macro_f1),
                ("auc", |m: &Metrics| m.auc),
            ] {
                let values: Vec<f64> = (0..n_seeds)
                    .map(|s| get(&per_cell[v * n_seeds + s][k]))
                    .collect();
                let (mean, std) = mean_std(&values);
                rows.push(AblationRow {
                    variant: variant.to_string(),
                    split: pct,
                    metric,
                    mean,
                    std,
                    values,
                });
            }
        }
    }
    Ok(rows)
}

/// `variant,split,metric,mean,std` with a header line.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,split,metric,mean,std\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.variant, r.split, r.metric, r.mean, r.std));
    }
    s
}
