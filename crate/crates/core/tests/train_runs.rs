mod common;

use common::apv;
use hgae_core::analysis::{synthesize, SyntheticSpec};
use hgae_core::config::Config;
use hgae_core::hetgraph::HeteroGraph;
use hgae_core::train::{embed, log_to_jsonl, read_checkpoint, train, write_checkpoint, Prepared, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> HeteroGraph {
    apv(&mut ChaCha8Rng::seed_from_u64(9), 10, 8, 3, 0.3)
}

fn toy_config(epochs: usize) -> Config {
    Config {
        hidden_dim: 8,
        epochs,
        ..Config::default()
    }
}

#[test]
fn one_epoch_smoke() {
    let prep = Prepared::new(&toy(), &toy_config(1)).unwrap();
    let mut seen = 0;
    let out = train(&prep, |_| seen += 1).unwrap();
    assert_eq!((seen, out.log.len()), (1, 1));
    let r = &out.log[0];
    assert!(r.l_total.is_finite() && r.l_total > 0.0);
    assert_eq!(r.metapaths.len(), 2);
    let alpha: f64 = r.metapaths.iter().map(|m| m.alpha).sum();
    assert!((alpha - 1.0).abs() < 1e-5);
    assert_eq!(log_to_jsonl(&out.log).lines().count(), 1);
}

#[test]
fn same_seed_gives_identical_log_and_params() {
    let g = toy();
    for strategy in ["random", "degree", "attention"] {
        let cfg = Config {
            mask_strategy: strategy.parse().unwrap(),
            ..toy_config(6)
        };
        let run = || {
            let out = train(&Prepared::new(&g, &cfg).unwrap(), |_| {}).unwrap();
            (log_to_jsonl(&out.log), out.params.encode())
        };
        assert_eq!(run(), run(), "{strategy}");
    }
    let other = Config { seed: 1, ..toy_config(6) };
    let a = train(&Prepared::new(&g, &toy_config(6)).unwrap(), |_| {}).unwrap();
    let b = train(&Prepared::new(&g, &other).unwrap(), |_| {}).unwrap();
    assert_ne!(a.params.encode(), b.params.encode());
}

#[test]
fn loss_descends_over_200_epochs_on_synthetic() {
    let g = synthesize(&SyntheticSpec::default()).unwrap();
    let prep = Prepared::new(&g, &Config::default()).unwrap();
    let out = train(&prep, |_| {}).unwrap();
    assert_eq!(out.log.len(), 200);
    let (first, last) = (out.log[0].l_total, out.log[199].l_total);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let g = toy();
    let cfg = toy_config(3);
    let out = train(&Prepared::new(&g, &cfg).unwrap(), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), &out.params, &cfg).unwrap();
    let (cfg2, params2) = read_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(params2.encode(), out.params.encode());
    assert_eq!(embed(&g, &cfg, &out.params).unwrap(), embed(&g, &cfg2, &params2).unwrap());
}

#[test]
fn embed_rejects_a_mismatched_checkpoint() {
    let g = toy();
    let out = train(&Prepared::new(&g, &toy_config(1)).unwrap(), |_| {}).unwrap();
    let wider = Config { hidden_dim: 12, ..toy_config(1) };
    assert!(embed(&g, &wider, &out.params).is_err());
}

#[test]
fn trained_embeddings_differ_from_raw_features() {
    let g = toy();
    let cfg = Config { hidden_dim: 5, ..toy_config(20) };
    let out = train(&Prepared::new(&g, &cfg).unwrap(), |_| {}).unwrap();
    let emb = embed(&g, &cfg, &out.params).unwrap();
    let x = g.target_features().unwrap();
    assert_eq!((emb.rows(), emb.cols()), (x.rows(), x.cols()));
    let diff: f64 = (0..x.rows())
        .flat_map(|r| (0..x.cols()).map(move |c| (r, c)))
        .map(|(r, c)| (emb.get(r, c) - x.get(r, c)).powi(2))
        .sum();
    assert!(diff.sqrt() > 0.0);
}

#[test]
fn divergence_names_the_epoch() {
    let cfg = Config { lr: 1e6, ..toy_config(200) };
    let err = train(&Prepared::new(&toy(), &cfg).unwrap(), |_| {}).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TrainError::Epoch { .. }), "{msg}");
    assert!(msg.starts_with("epoch "), "{msg}");
    assert!(msg.contains("non-finite"), "{msg}");
}
