mod common;

use std::collections::HashMap;

use common::{chain_probability, ordered_sequences, total_variation};
use hgae_core::hetgraph::MetaPathGraph;
use hgae_core::masking::*;
use hgae_core::tape::segment_softmax_values;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_counts(w: &[f64], k: usize, trials: usize, seed: u64) -> HashMap<Vec<usize>, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = HashMap::new();
    for _ in 0..trials {
        *counts
            .entry(sample_without_replacement(w, k, &mut rng).unwrap())
            .or_insert(0) += 1;
    }
    counts
}

fn exact_chain(w: &[f64], k: usize) -> Vec<(Vec<usize>, f64)> {
    ordered_sequences(w.len(), k)
        .into_iter()
        .map(|s| {
            let p = chain_probability(w, &s);
            (s, p)
        })
        .collect()
}

#[test]
fn chain_probability_of_worked_sequence() {
    assert!((chain_probability(&[0.5, 0.3, 0.2], &[0, 1]) - 0.3).abs() < 1e-15);
    let total: f64 = exact_chain(&[0.5, 0.3, 0.2], 2).iter().map(|(_, p)| p).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn three_weights_match_exact_chain() {
    let w = [0.5, 0.3, 0.2];
    let tv = total_variation(&sample_counts(&w, 2, 100_000, 1), &exact_chain(&w, 2));
    assert!(tv < 0.01, "tv {tv}");
}

#[test]
fn small_weight_vectors_match_exact_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    // (6, 3) has 120 outcomes; 100k draws alone give a noise distance near 0.013
    for (n, k, trials) in [(4, 1, 100_000), (5, 2, 100_000), (4, 3, 100_000), (6, 3, 1_000_000)] {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let tv = total_variation(&sample_counts(&w, k, trials, n as u64), &exact_chain(&w, k));
        assert!(tv < 0.01, "n={n} k={k} tv {tv}");
    }
}

#[test]
fn zero_weight_edges_are_never_drawn() {
    let w = [0.0, 1.0, 0.0, 2.0];
    let counts = sample_counts(&w, 2, 2000, 3);
    assert!(counts.keys().all(|s| !s.contains(&0) && !s.contains(&2)));
    assert!(sample_without_replacement(&w, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn random_masking_is_uniform_per_edge() {
    let g = MetaPathGraph::from_edges("p", 4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut hits = [0usize; 4];
    let trials = 50_000;
    for _ in 0..trials {
        for i in mask_edges_random(&g, 0.25, &mut rng).unwrap().indices {
            hits[i] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / trials as f64;
        assert!((f - 0.25).abs() < 0.01, "{f}");
    }
}

fn seq_counts(
    trials: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<usize>,
) -> HashMap<Vec<usize>, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut out = HashMap::new();
    for _ in 0..trials {
        *out.entry(draw(&mut rng)).or_insert(0) += 1;
    }
    out
}

#[test]
fn uniform_attention_behaves_like_random() {
    let g = MetaPathGraph::from_edges("p", 4, vec![(0, 1), (2, 1), (0, 3), (2, 3)]);
    let att = [0.5; 4];
    let trials = 50_000;
    let a = seq_counts(trials, |r| {
        mask_edges_by_attention(&g, &att, 0.5, 0.0, r).unwrap().indices
    });
    let b = seq_counts(trials, |r| mask_edges_random(&g, 0.5, r).unwrap().indices);
    let uniform: Vec<(Vec<usize>, f64)> =
        ordered_sequences(4, 2).into_iter().map(|s| (s, 1.0 / 12.0)).collect();
    let b_as_exact: Vec<(Vec<usize>, f64)> = b
        .iter()
        .map(|(s, &c)| (s.clone(), c as f64 / trials as f64))
        .collect();
    assert!(total_variation(&a, &b_as_exact) < 0.02);
    assert!(total_variation(&a, &uniform) < 0.02);
}

#[test]
fn dominant_attention_edge_is_masked_first() {
    let g = MetaPathGraph::from_edges("p", 5, vec![(1, 0), (2, 0), (3, 0), (4, 0)]);
    let att = segment_softmax_values(&[8.0, 0.0, 0.0, 0.0], &[0, 0, 0, 0], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 10_000;
    let hits = (0..trials)
        .filter(|_| mask_edges_by_attention(&g, &att, 0.25, 0.0, &mut rng).unwrap().indices == [0])
        .count();
    assert!(hits as f64 / trials as f64 > 0.9);
}

fn random_graph(rng: &mut ChaCha8Rng) -> MetaPathGraph {
    let n = rng.gen_range(2..25);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.gen::<f64>() < 0.2 {
                edges.push((u as u32, v as u32));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, 1));
    }
    MetaPathGraph::from_edges("r", n, edges)
}

/// Attention coefficients that sum to one over each destination.
fn random_attention(g: &MetaPathGraph, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scores: Vec<f64> = (0..g.edge_count()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let seg: Vec<usize> = g.edges().iter().map(|&(_, d)| d as usize).collect();
    segment_softmax_values(&scores, &seg, g.num_nodes())
}

#[test]
fn inverse_softmax_offset_does_not_change_plans() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..100 {
        let g = random_graph(&mut rng);
        let att = random_attention(&g, &mut rng);
        let rate = rng.gen_range(0.1..0.9);
        let a = mask_edges_by_attention(&g, &att, rate, 0.0, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        let b = mask_edges_by_attention(&g, &att, rate, 10.0, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        assert_eq!(a, b, "graph {i}");
    }
}

#[test]
fn hub_edges_are_first_draw_favourites() {
    // node 0 is a hub joined both ways to 1..=5; 6 <-> 7 is a separate pair
    let mut edges = Vec::new();
    for v in 1..=5 {
        edges.push((0, v));
        edges.push((v, 0));
    }
    edges.push((6, 7));
    edges.push((7, 6));
    let g = MetaPathGraph::from_edges("hub", 8, edges);
    let w = edge_degree_weights(&g).unwrap();
    let first = |e: usize| -> f64 {
        ordered_sequences(g.edge_count(), 2)
            .iter()
            .filter(|s| s[0] == e)
            .map(|s| chain_probability(w.as_slice(), s))
            .sum()
    };
    let hub_min = (0..g.edge_count())
        .filter(|&e| g.edges()[e].0 == 0 || g.edges()[e].1 == 0)
        .map(first)
        .fold(f64::INFINITY, f64::min);
    let other_max = (0..g.edge_count())
        .filter(|&e| g.edges()[e].0 != 0 && g.edges()[e].1 != 0)
        .map(first)
        .fold(0.0, f64::max);
    assert!(hub_min > other_max, "{hub_min} vs {other_max}");
}

#[test]
fn denser_community_loses_more_edges() {
    let mut edges = Vec::new();
    for u in 0..5u32 {
        for v in 0..5u32 {
            if u != v {
                edges.push((u, v));
            }
        }
    }
    for i in 0..10u32 {
        edges.push((5 + i, 5 + (i + 1) % 10));
        edges.push((5 + i, 5 + (i + 2) % 10));
    }
    let g = MetaPathGraph::from_edges("two", 15, edges);
    let mut frac = 0.0;
    for seed in 0..1000 {
        let m = mask_edges_by_degree(&g, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let dense = m.indices.iter().filter(|&&e| g.edges()[e].0 < 5).count();
        frac += dense as f64 / m.indices.len() as f64;
    }
    assert!(frac / 1000.0 > 0.5);
}

#[test]
fn node_masking_counts_and_attribute_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fm = mask_node_features(4, 3, 0.5, 0.0, &mut rng).unwrap();
    assert_eq!(fm.masked_nodes.len(), 2);
    assert!(fm.masked_attributes.is_empty());
    let x = hgae_core::matrix::Matrix::filled(4, 3, 1.0);
    let y = fm.apply(&x, &[7.0, 7.0, 7.0]);
    let token_rows = (0..4).filter(|&r| y.row(r) == [7.0, 7.0, 7.0]).count();
    assert_eq!(token_rows, 2);
    let untouched = (0..4).filter(|&r| y.row(r) == [1.0, 1.0, 1.0]).count();
    assert_eq!(untouched, 2);

    let fm = mask_node_features(100, 50, 0.0, 0.3, &mut rng).unwrap();
    let f = fm.masked_attributes.len() as f64 / 5000.0;
    assert!((f - 0.3).abs() < 0.02, "{f}");
}

proptest! {
    #[test]
    fn count_contract_holds(seed in any::<u64>(), rate_tenths in 0u32..10, s in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng);
        let att = random_attention(&g, &mut rng);
        let rate = rate_tenths as f64 / 10.0;
        let strategy = MaskStrategy::ALL[s];
        let m = mask_edges(strategy, &g, Some(&att), rate, 0.0, &mut rng).unwrap();
        prop_assert_eq!(m.indices.len(), masked_count(rate, g.edge_count()));
        let mut sorted = m.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m.indices.len());
        let masked = apply_mask(&g, &m).unwrap();
        prop_assert_eq!(masked.edge_count(), g.edge_count() - m.indices.len());
    }

    #[test]
    fn same_seed_same_plan(seed in any::<u64>(), s in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng);
        let att = random_attention(&g, &mut rng);
        let strategy = MaskStrategy::ALL[s];
        let a = mask_edges(strategy, &g, Some(&att), 0.4, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = mask_edges(strategy, &g, Some(&att), 0.4, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn degree_weights_form_a_distribution(seed in any::<u64>()) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed));
        let w = edge_degree_weights(&g).unwrap();
        let total: f64 = w.as_slice().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(w.as_slice().iter().all(|&v| v > 0.0));
    }
}
