use std::fs;
use std::path::{Path, PathBuf};

use hgae_core::analysis::{self, ComponentRow, ComponentSummary, SyntheticSpec};
use hgae_core::config::Config;
use hgae_core::eval::{self, AblationRow, Variant};
use hgae_core::hetgraph::{load_dataset, HeteroGraph, MetaPathGraph};
use hgae_core::masking::MaskStrategy;
use hgae_core::matrix::Matrix;
use hgae_core::params::ParamStore;
use hgae_core::train::{self, Prepared};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::{dir_hash, Manifest};
use crate::{write_file, AblateArgs, CliError, EmbedArgs, GenArgs, MaskAnalyzeArgs, ProbeArgs, RerunArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn args_json<T: Serialize>(a: &T) -> serde_json::Value {
    serde_json::to_value(a).expect("arguments serialize")
}

fn read_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    Config::from_json(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn load(data: &Path) -> Result<(HeteroGraph, String)> {
    let hash = dir_hash(data)?;
    let g = load_dataset(data).map_err(|e| usage(format!("dataset {}: {e}", data.display())))?;
    Ok((g, hash))
}

fn check_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).ok();
    for i in inputs {
        if canon(out).is_some() && canon(out) == canon(i) {
            return Err(usage(format!("--out {} would overwrite an input directory", out.display())));
        }
    }
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(usage("--jobs must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(runtime)
}

fn read_checkpoint(dir: &Path) -> Result<(Config, ParamStore, String)> {
    let hash = dir_hash(dir)?;
    let (c, p) = train::read_checkpoint(dir).map_err(|e| usage(format!("checkpoint {}: {e}", dir.display())))?;
    Ok((c, p, hash))
}

fn train_config(a: &TrainArgs) -> Result<Config> {
    let mut c = read_config(&a.config)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.lr = lr;
    }
    if let Some(d) = a.hidden_dim {
        c.hidden_dim = d;
    }
    if let Some(s) = &a.mask_strategy {
        c.mask_strategy = s.parse().map_err(usage)?;
    }
    if let Some(r) = a.mask_rate {
        c.mask_rate = r;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

pub fn train(a: &TrainArgs, snapshot: Option<Config>) -> Result<Vec<PathBuf>> {
    let cfg = match snapshot {
        Some(c) => c,
        None => train_config(a)?,
    };
    let (g, hash) = load(&a.data)?;
    let prep = Prepared::new(&g, &cfg).map_err(usage)?;
    check_output(&a.out, &[&a.data])?;

    let mut m = Manifest::new("train", args_json(a), cfg.seed);
    m.config = Some(cfg.clone());
    m.dataset_hash = Some(hash);
    m.write(&a.out)?;

    let last = cfg.epochs - 1;
    let out = train::train(&prep, |r| {
        if r.epoch % 10 == 0 || r.epoch == last {
            eprintln!("epoch {:>4}  L_feat {:.5}  L_mp {:.5}  L_total {:.5}", r.epoch, r.l_feat, r.l_mp, r.l_total);
        }
    })
    .map_err(runtime)?;

    let ckpt = a.out.join("checkpoint");
    train::write_checkpoint(&ckpt, &out.params, &cfg).map_err(runtime)?;
    let log = a.out.join("train_log.jsonl");
    write_file(&log, train::log_to_jsonl(&out.log).as_bytes())?;
    m.finish(&a.out)?;
    Ok(vec![ckpt, log])
}

fn parse_splits(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|p| match p.trim().parse::<u32>() {
            Ok(v @ (20 | 40 | 60)) => Ok(v),
            _ => Err(usage(format!("split `{}` is not one of 20, 40, 60", p.trim()))),
        })
        .collect()
}

fn embeddings(g: &HeteroGraph, cfg: &Config, params: &ParamStore) -> Result<Matrix> {
    Prepared::new(g, cfg).map_err(usage)?;
    train::embed(g, cfg, params).map_err(usage)
}

pub fn probe(a: &ProbeArgs) -> Result<Vec<PathBuf>> {
    let (mut cfg, params, ckpt_hash) = read_checkpoint(&a.checkpoint)?;
    if let Some(s) = &a.splits {
        cfg.splits = parse_splits(s)?;
    }
    let (g, hash) = load(&a.data)?;
    let labels = g.labels.clone().ok_or_else(|| usage("dataset has no labels"))?;
    let pool = pool(a.jobs)?;
    check_output(&a.out, &[&a.data, &a.checkpoint])?;

    let mut m = Manifest::new("probe", args_json(a), a.seed);
    m.config = Some(cfg.clone());
    m.dataset_hash = Some(hash);
    m.checkpoint_hash = Some(ckpt_hash);
    m.write(&a.out)?;

    let emb = embeddings(&g, &cfg, &params)?;
    eprintln!("majority-class fraction {:.4}", eval::majority_fraction(&labels));
    let per_split: Vec<Vec<eval::Metrics>> = pool
        .install(|| {
            cfg.splits
                .par_iter()
                .map(|&pct| eval::probe_split(&emb, &labels, pct, &cfg.probe, a.seed))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .map_err(runtime)?;
    let mut rows = Vec::new();
    for (&pct, ms) in cfg.splits.iter().zip(&per_split) {
        for (metric, f) in METRICS {
            let values: Vec<f64> = ms.iter().map(f).collect();
            let (mean, std) = eval::mean_std(&values);
            eprintln!("split {pct:>2}%  {metric:<8} {mean:.4} ± {std:.4}");
            rows.push(AblationRow {
                variant: "checkpoint".into(),
                split: pct,
                metric,
                mean,
                std,
                values,
            });
        }
    }
    let path = a.out.join("metrics.csv");
    write_file(&path, eval::rows_to_csv(&rows).as_bytes())?;
    m.finish(&a.out)?;
    Ok(vec![path])
}

const METRICS: [(&str, fn(&eval::Metrics) -> f64); 3] = [
    ("micro_f1", |m| m.micro_f1),
    ("macro_f1", |m| m.macro_f1),
    ("auc", |m| m.auc),
];

fn with_metapath(name: &str, csv: &str, first: bool) -> String {
    csv.lines()
        .enumerate()
        .filter(|(i, _)| first || *i > 0)
        .map(|(i, l)| {
            if i == 0 {
                format!("metapath,{l}\n")
            } else {
                format!("{name},{l}\n")
            }
        })
        .collect()
}

pub fn mask_analyze(a: &MaskAnalyzeArgs) -> Result<Vec<PathBuf>> {
    let strategies: Vec<MaskStrategy> = a
        .strategy
        .split(',')
        .map(|s| s.trim().parse().map_err(usage))
        .collect::<Result<_>>()?;
    let rates = analysis::parse_rates(&a.rates).ok_or_else(|| usage(format!("bad --rates `{}`", a.rates)))?;
    if rates.iter().any(|r| !(0.0..1.0).contains(r)) || rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(usage("rates must be ascending and in [0, 1)"));
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be >= 1"));
    }
    let pool = pool(a.jobs)?;
    let (g, hash) = load(&a.data)?;
    let (mut cfg, stored, ckpt_hash) = match (&a.checkpoint, &a.config) {
        (Some(dir), _) => {
            let (c, p, h) = read_checkpoint(dir)?;
            (c, Some(p), Some(h))
        }
        (None, Some(path)) => (read_config(path)?, None, None),
        (None, None) => (Config::default(), None, None),
    };
    if let Some(c) = a.inverse_softmax_c {
        cfg.inverse_softmax_c = c;
    }
    cfg.validate().map_err(usage)?;
    let chosen: Vec<usize> = match &a.metapath {
        None => (0..g.metapaths.len()).collect(),
        Some(list) => list
            .split(',')
            .map(|n| {
                g.metapaths
                    .iter()
                    .position(|p| p.name == n.trim())
                    .ok_or_else(|| usage(format!("unknown meta-path `{}`", n.trim())))
            })
            .collect::<Result<_>>()?,
    };
    let mut inputs: Vec<&Path> = vec![&a.data];
    if let Some(c) = &a.checkpoint {
        inputs.push(c);
    }
    check_output(&a.out, &inputs)?;

    let mut m = Manifest::new("mask-analyze", args_json(a), a.seed);
    m.config = Some(cfg.clone());
    m.dataset_hash = Some(hash);
    m.checkpoint_hash = ckpt_hash;
    m.write(&a.out)?;

    let graphs: Vec<MetaPathGraph> = g
        .metapaths
        .iter()
        .map(|s| g.build_metapath_adjacency(s, cfg.self_loops))
        .collect::<std::result::Result<_, _>>()
        .map_err(usage)?;
    let attention: Option<Vec<Vec<f64>>> = if strategies.contains(&MaskStrategy::Attention) {
        let prep = Prepared::new(&g, &cfg).map_err(usage)?;
        let params = match &stored {
            Some(p) => {
                let mut params = prep.model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
                params.load_from(p).map_err(usage)?;
                params
            }
            None => prep.init_params(),
        };
        Some(prep.model.edge_attention(&params, &prep.x_tar, &prep.graphs).map_err(runtime)?)
    } else {
        None
    };

    let cells: Vec<(usize, MaskStrategy)> = chosen
        .iter()
        .flat_map(|&k| strategies.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<Vec<ComponentRow>> = pool
        .install(|| {
            cells
                .par_iter()
                .map(|&(k, s)| {
                    let att = attention.as_ref().map(|v| v[k].as_slice());
                    analysis::mask_sweep(&graphs[k], &[s], &rates, a.seeds, a.seed, att, cfg.inverse_softmax_c)
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .map_err(runtime)?;

    let (mut rows_csv, mut summary_csv) = (String::new(), String::new());
    for (i, &k) in chosen.iter().enumerate() {
        let name = &g.metapaths[k].name;
        let rows: Vec<ComponentRow> = results[i * strategies.len()..(i + 1) * strategies.len()].concat();
        let summary: Vec<ComponentSummary> = analysis::summarize(&rows);
        for s in &summary {
            eprintln!("{name:<8} {:<9} rate {:.2}  mean {:.2} ± {:.2}", s.strategy, s.rate, s.mean, s.std);
        }
        rows_csv.push_str(&with_metapath(name, &analysis::components_csv(&rows), i == 0));
        summary_csv.push_str(&with_metapath(name, &analysis::summary_csv(&summary), i == 0));
    }
    let p1 = a.out.join("components.csv");
    let p2 = a.out.join("components_summary.csv");
    write_file(&p1, rows_csv.as_bytes())?;
    write_file(&p2, summary_csv.as_bytes())?;
    m.finish(&a.out)?;
    Ok(vec![p1, p2])
}

pub fn gen_synthetic(a: &GenArgs, snapshot: Option<SyntheticSpec>) -> Result<Vec<PathBuf>> {
    let spec = match snapshot {
        Some(s) => s,
        None => {
            let mut s = match &a.spec {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| usage(format!("spec {}: {e}", p.display())))?;
                    SyntheticSpec::from_json(&text).map_err(|e| usage(format!("spec {}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = a.seed {
                s.seed = seed;
            }
            s.validate().map_err(usage)?;
            s
        }
    };
    check_output(&a.out, &[])?;
    let mut m = Manifest::new("gen-synthetic", args_json(a), spec.seed);
    m.synthetic_spec = Some(spec.clone());
    m.write(&a.out)?;
    analysis::gen_synthetic(&spec, &a.out).map_err(runtime)?;
    m.dataset_hash = Some(dir_hash(&a.out)?);
    m.finish(&a.out)?;
    Ok(vec![a.out.clone()])
}

pub fn embed(a: &EmbedArgs) -> Result<Vec<PathBuf>> {
    let (cfg, params, ckpt_hash) = read_checkpoint(&a.checkpoint)?;
    let (g, hash) = load(&a.data)?;
    check_output(&a.out, &[&a.data, &a.checkpoint])?;
    let mut m = Manifest::new("embed", args_json(a), cfg.seed);
    m.config = Some(cfg.clone());
    m.dataset_hash = Some(hash);
    m.checkpoint_hash = Some(ckpt_hash);
    m.write(&a.out)?;

    let emb = embeddings(&g, &cfg, &params)?;
    let ids = &g.node_types[g.target].ids;
    let p1 = a.out.join("embeddings.tsv");
    write_file(&p1, analysis::embeddings_tsv(ids, &emb).as_bytes())?;
    let labels = g.labels.clone().unwrap_or_else(|| vec![None; ids.len()]);
    let p2 = a.out.join("tsne_input.tsv");
    write_file(&p2, analysis::export_for_tsne(&emb, &labels).as_bytes())?;
    m.finish(&a.out)?;
    Ok(vec![p1, p2])
}

fn ablate_config(a: &AblateArgs) -> Result<Config> {
    let mut c = read_config(&a.config)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

pub fn ablate(a: &AblateArgs, snapshot: Option<Config>) -> Result<Vec<PathBuf>> {
    let cfg = match snapshot {
        Some(c) => c,
        None => ablate_config(a)?,
    };
    let variants: Vec<Variant> = a
        .variants
        .split(',')
        .map(|v| v.trim().parse().map_err(usage))
        .collect::<Result<_>>()?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be >= 1"));
    }
    let pool = pool(a.jobs)?;
    let (g, hash) = load(&a.data)?;
    let labels = g.labels.clone().ok_or_else(|| usage("dataset has no labels"))?;
    for v in &variants {
        Prepared::new(&g, &v.apply(&cfg)).map_err(usage)?;
    }
    check_output(&a.out, &[&a.data])?;
    let mut m = Manifest::new("ablate", args_json(a), cfg.seed);
    m.config = Some(cfg.clone());
    m.dataset_hash = Some(hash);
    m.write(&a.out)?;

    eprintln!(
        "{} variants x {} seeds on {} jobs; majority-class fraction {:.4}",
        variants.len(),
        a.seeds,
        a.jobs,
        eval::majority_fraction(&labels)
    );
    let rows = pool
        .install(|| eval::run_ablation(&g, &cfg, &variants, a.seeds))
        .map_err(runtime)?;
    for r in rows.iter().filter(|r| r.metric == "micro_f1") {
        eprintln!("{:<16} split {:>2}%  Mi-F1 {:.4} ± {:.4}", r.variant, r.split, r.mean, r.std);
    }
    let path = a.out.join("metrics.csv");
    write_file(&path, eval::rows_to_csv(&rows).as_bytes())?;
    m.finish(&a.out)?;
    Ok(vec![path])
}

fn args_from<T: serde::de::DeserializeOwned>(m: &Manifest) -> Result<T> {
    serde_json::from_value(m.args.clone()).map_err(|e| usage(format!("manifest args: {e}")))
}

fn check_hash(data: &Path, recorded: &Option<String>) -> Result<()> {
    if let Some(h) = recorded {
        let now = dir_hash(data)?;
        if &now != h {
            return Err(usage(format!("{} changed since the recorded run ({now} != {h})", data.display())));
        }
    }
    Ok(())
}

pub fn rerun(a: &RerunArgs) -> Result<Vec<PathBuf>> {
    let m = Manifest::read(&a.manifest)?;
    let out = a.out.clone();
    match m.command.as_str() {
        "train" => {
            let mut t: TrainArgs = args_from(&m)?;
            check_hash(&t.data, &m.dataset_hash)?;
            t.out = out;
            let cfg = m.config.clone().ok_or_else(|| usage("manifest lacks a config"))?;
            train(&t, Some(cfg))
        }
        "probe" => {
            let mut t: ProbeArgs = args_from(&m)?;
            check_hash(&t.data, &m.dataset_hash)?;
            check_hash(&t.checkpoint, &m.checkpoint_hash)?;
            t.out = out;
            probe(&t)
        }
        "mask-analyze" => {
            let mut t: MaskAnalyzeArgs = args_from(&m)?;
            check_hash(&t.data, &m.dataset_hash)?;
            if let Some(c) = &t.checkpoint {
                check_hash(c, &m.checkpoint_hash)?;
            }
            t.out = out;
            mask_analyze(&t)
        }
        "gen-synthetic" => {
            let mut t: GenArgs = args_from(&m)?;
            t.out = out;
            gen_synthetic(&t, m.synthetic_spec.clone())
        }
        "embed" => {
            let mut t: EmbedArgs = args_from(&m)?;
            check_hash(&t.data, &m.dataset_hash)?;
            check_hash(&t.checkpoint, &m.checkpoint_hash)?;
            t.out = out;
            embed(&t)
        }
        "ablate" => {
            let mut t: AblateArgs = args_from(&m)?;
            check_hash(&t.data, &m.dataset_hash)?;
            t.out = out;
            let cfg = m.config.clone().ok_or_else(|| usage("manifest lacks a config"))?;
            ablate(&t, Some(cfg))
        }
        other => Err(usage(format!("unknown command `{other}` in manifest"))),
    }
}
