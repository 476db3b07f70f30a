mod common;

use common::{apv, end_to_end_grad_check};
use hgae_core::config::{Activation, Config};
use hgae_core::hetgraph::{HeteroGraph, MetaPathGraph, MetaPathSpec, NodeType, Relation};
use hgae_core::matrix::Matrix;
use hgae_core::model::*;
use hgae_core::params::ParamStore;
use hgae_core::tape::{Precision, Tape};
use hgae_core::train::Prepared;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f64_config() -> Config {
    Config {
        hidden_dim: 6,
        precision: Precision::F64,
        ..Config::default()
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.2 * v
    }
}

#[test]
fn attention_layer_matches_dense_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.gen_range(2..=20);
        let d = rng.gen_range(1..5);
        let h = Matrix::normal(n, d, 1.0, &mut rng);
        let a = Matrix::normal(2 * d, 1, 1.0, &mut rng);
        let mut edges = Vec::new();
        for j in 0..n as u32 {
            for i in 0..n as u32 {
                if rng.gen::<f64>() < 0.3 {
                    edges.push((j, i));
                }
            }
        }
        let idx = EdgeIndex::new(&edges, n);
        let mut t = Tape::new(Precision::F64);
        let (hv, av) = (t.leaf(h.clone()), t.leaf(a.clone()));
        let s = node_attention_scores(&mut t, hv, hv, &idx, av, 0.2).unwrap();
        let alpha = normalize_attention(&mut t, s, &idx).unwrap();
        let z = aggregate(&mut t, alpha, hv, &idx, Activation::Identity).unwrap();

        // dense oracle: E[i][j] = leaky(a1.h_i + a2.h_j) on edges j -> i
        let mut e = vec![vec![None; n]; n];
        for &(j, i) in &edges {
            let (i, j) = (i as usize, j as usize);
            let mut v = 0.0;
            for k in 0..d {
                v += a.get(k, 0) * h.get(i, k) + a.get(d + k, 0) * h.get(j, k);
            }
            e[i][j] = Some(leaky(v));
        }
        for i in 0..n {
            let max = e[i].iter().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let total: f64 = e[i].iter().flatten().map(|v| (v - max).exp()).sum();
            for k in 0..d {
                let want: f64 = (0..n)
                    .filter_map(|j| e[i][j].map(|v| (v - max).exp() / total * h.get(j, k)))
                    .sum();
                assert!((t.value(z).get(i, k) - want).abs() < 1e-12);
            }
        }
        let mut sums = vec![0.0; n];
        for (k, &(_, i)) in edges.iter().enumerate() {
            sums[i as usize] += t.value(alpha).get(k, 0);
        }
        for (i, s) in sums.iter().enumerate() {
            if e[i].iter().any(Option::is_some) {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn semantic_weights_sum_to_one_and_keep_order_under_sharpening() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let paths = rng.gen_range(1..5);
        let hs: Vec<Matrix> = (0..paths).map(|_| Matrix::normal(7, 4, 1.0, &mut rng)).collect();
        let w = Matrix::normal(4, 4, 1.0, &mut rng);
        let b = Matrix::normal(1, 4, 0.1, &mut rng);
        let q = Matrix::normal(4, 1, 1.0, &mut rng);
        let run = |q: Matrix| -> Vec<f64> {
            let mut t = Tape::new(Precision::F64);
            let vars: Vec<_> = hs.iter().map(|h| t.leaf(h.clone())).collect();
            let (wv, bv, qv) = (t.leaf(w.clone()), t.leaf(b.clone()), t.leaf(q));
            let (_, a) = semantic_attention(&mut t, &vars, wv, bv, qv).unwrap();
            t.value(a).data().to_vec()
        };
        let argmax = |v: &[f64]| {
            (0..v.len())
                .max_by(|&x, &y| v[x].partial_cmp(&v[y]).unwrap())
                .unwrap()
        };
        let base = run(q.clone());
        assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let sharp = run(q.map(|v| 10.0 * v));
        assert!((sharp.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(argmax(&base), argmax(&sharp));
    }
}

#[test]
fn nontarget_projection_matches_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Matrix::normal(3, 4, 1.0, &mut rng);
    let mut s = ParamStore::new();
    let parts = [
        ("w1", Matrix::normal(4, 5, 1.0, &mut rng)),
        ("b1", Matrix::normal(1, 5, 1.0, &mut rng)),
        ("w2", Matrix::normal(5, 2, 1.0, &mut rng)),
        ("b2", Matrix::normal(1, 2, 1.0, &mut rng)),
        ("prelu1", Matrix::scalar(0.25)),
        ("prelu2", Matrix::scalar(-0.5)),
    ];
    for (n, m) in &parts {
        s.insert(format!("mlp.P.{n}"), m.clone()).unwrap();
    }
    let mut t = Tape::new(Precision::F64);
    let p = s.bind(&mut t);
    let xv = t.constant(x.clone());
    let out = project_nontarget(&mut t, xv, &p, "P").unwrap();
    let got = t.value(out).clone();
    let prelu = |v: f64, a: f64| if v >= 0.0 { v } else { a * v };
    for r in 0..3 {
        let mut hidden = [0.0; 5];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut v = parts[1].1.get(0, j);
            for k in 0..4 {
                v += x.get(r, k) * parts[0].1.get(k, j);
            }
            *hj = prelu(v, 0.25);
        }
        for c in 0..2 {
            let mut v = parts[3].1.get(0, c);
            for (j, hj) in hidden.iter().enumerate() {
                v += hj * parts[2].1.get(j, c);
            }
            assert!((got.get(r, c) - prelu(v, -0.5)).abs() < 1e-12);
        }
    }
}

fn permuted(g: &HeteroGraph, perm: &[usize]) -> HeteroGraph {
    let mut h = g.clone();
    let n = perm.len();
    let mut ids = vec![String::new(); n];
    let old = g.features[0].as_ref().unwrap();
    let mut feats = Matrix::zeros(n, old.cols());
    let mut labels = vec![None; n];
    for i in 0..n {
        ids[perm[i]] = g.node_types[0].ids[i].clone();
        feats.row_mut(perm[i]).copy_from_slice(old.row(i));
        labels[perm[i]] = g.labels.as_ref().unwrap()[i];
    }
    h.node_types[0].ids = ids;
    h.features[0] = Some(feats);
    h.labels = Some(labels);
    for e in &mut h.relations[0].edges {
        e.0 = perm[e.0 as usize] as u32;
    }
    h
}

#[test]
fn embeddings_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let g = apv(&mut rng, 12, 9, 3, 0.25);
        let mut perm: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let h = permuted(&g, &perm);
        let cfg = f64_config();
        let (pg, ph) = (Prepared::new(&g, &cfg).unwrap(), Prepared::new(&h, &cfg).unwrap());
        let params = pg.init_params();
        let eg = pg.model.embed(&params, &pg.x_tar, &pg.graphs).unwrap();
        let eh = ph.model.embed(&params, &ph.x_tar, &ph.graphs).unwrap();

        let decode = |p: &Prepared, e: &Matrix| {
            let mut t = Tape::new(Precision::F64);
            let pv = params.bind(&mut t);
            let ev = t.constant(e.clone());
            let d = p.model.decode(&mut t, &pv, ev, &p.graphs).unwrap();
            t.value(d).clone()
        };
        let (dg, dh) = (decode(&pg, &eg), decode(&ph, &eh));
        for i in 0..12 {
            for (a, b) in eg.row(i).iter().zip(eh.row(perm[i])) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in dg.row(i).iter().zip(dh.row(perm[i])) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn edgeless_graphs_keep_each_node_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = apv(&mut rng, 8, 6, 2, 0.3);
    let cfg = Config {
        enhancement: false,
        ..f64_config()
    };
    let model = Model::new(&g, &cfg).unwrap();
    let params = model.init_params(&mut rng);
    let empty: Vec<MetaPathGraph> = g
        .metapaths
        .iter()
        .map(|p| MetaPathGraph::from_edges(&p.name, 8, Vec::new()))
        .collect();
    let x = g.features[0].clone().unwrap();
    let emb = model.embed(&params, &x, &empty).unwrap();
    let direct = x.matmul(params.get("proj.author.weight").unwrap());
    assert!(emb.max_abs_diff(&direct) < 1e-12);

    let decode = |h: &Matrix| {
        let mut t = Tape::new(Precision::F64);
        let p = params.bind(&mut t);
        let hv = t.constant(h.clone());
        let d = model.decode(&mut t, &p, hv, &empty).unwrap();
        t.value(d).clone()
    };
    let base = decode(&emb);
    let mut bumped = emb.clone();
    bumped.row_mut(3).iter_mut().for_each(|v| *v += 1.0);
    let moved = decode(&bumped);
    assert_eq!(base.shape(), (8, 5));
    for r in 0..8 {
        assert_eq!(base.row(r) == moved.row(r), r != 3, "row {r}");
    }
}

/// a0 wrote p0; a1 wrote p0 and p1; a2 wrote nothing.
fn three_authors() -> HeteroGraph {
    HeteroGraph {
        node_types: vec![
            NodeType { name: "author".into(), ids: vec!["a0".into(), "a1".into(), "a2".into()] },
            NodeType { name: "paper".into(), ids: vec!["p0".into(), "p1".into()] },
        ],
        relations: vec![Relation {
            name: "AP".into(),
            src: 0,
            dst: 1,
            edges: vec![(0, 0), (1, 0), (1, 1)],
        }],
        features: vec![
            Some(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])),
            Some(Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 0.0]])),
        ],
        labels: None,
        target: 0,
        metapaths: vec![MetaPathSpec::new("APA", &["AP", "AP^-1"])],
    }
}

#[test]
fn single_paper_author_receives_that_paper() {
    let g = three_authors();
    let cfg = f64_config();
    let model = Model::new(&g, &cfg).unwrap();
    assert_eq!(model.paths[0].hops.len(), 1);
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(6));
    let mut t = Tape::new(Precision::F64);
    let p = params.bind(&mut t);
    let h = t.constant(Matrix::normal(3, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
    let z = model.propagate(&mut t, &p, h).unwrap()[0];
    let z = t.value(z).clone();
    let xp = t.constant(g.features[1].clone().unwrap());
    let hp = project_nontarget(&mut t, xp, &p, "paper").unwrap();
    let elu = |v: f64| if v > 0.0 { v } else { v.exp() - 1.0 };
    for (got, want) in z.row(0).iter().zip(t.value(hp).row(0)) {
        assert!((got - elu(*want)).abs() < 1e-12);
    }
    assert!(z.row(2).iter().all(|&v| v == 0.0));
}

fn enhanced_and_fused(g: &HeteroGraph, params: &ParamStore, cfg: &Config) -> (Matrix, Matrix) {
    let model = Model::new(g, cfg).unwrap();
    let graphs: Vec<_> = g.metapaths.iter().map(|s| g.build_metapath_adjacency(s, false).unwrap()).collect();
    let x = g.features[0].clone().unwrap();
    let mut t = Tape::new(Precision::F64);
    let p = params.bind(&mut t);
    let input = ForwardInput { x_tar: &x, mask_rows: None, graphs: &graphs };
    let f = model.forward(&mut t, &p, &input).unwrap();
    (t.value(f.enhanced).clone(), t.value(f.fused).clone())
}

#[test]
fn isolated_target_keeps_its_embedding() {
    let g = three_authors();
    let cfg = f64_config();
    let params = Model::new(&g, &cfg).unwrap().init_params(&mut ChaCha8Rng::seed_from_u64(8));
    let (enhanced, fused) = enhanced_and_fused(&g, &params, &cfg);
    assert_eq!(enhanced.row(2), fused.row(2));
    assert_ne!(enhanced.row(0), fused.row(0));
}

#[test]
fn zero_intermediate_features_reduce_to_plain_han() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = apv(&mut rng, 10, 8, 3, 0.3);
    for t in 1..3 {
        let (r, c) = g.features[t].as_ref().unwrap().shape();
        g.features[t] = Some(Matrix::zeros(r, c));
    }
    let on = f64_config();
    let off = Config { enhancement: false, ..on.clone() };
    let params = Model::new(&g, &on).unwrap().init_params(&mut rng);
    let (enhanced, fused) = enhanced_and_fused(&g, &params, &on);
    assert_eq!(enhanced, fused);

    let mut plain = Model::new(&g, &off).unwrap().init_params(&mut rng);
    plain.load_from(&subset(&params, &plain)).unwrap();
    let decoded = |cfg: &Config, params: &ParamStore| {
        let prep = Prepared::new(&g, cfg).unwrap();
        let mut t = Tape::new(Precision::F64);
        let p = params.bind(&mut t);
        let b = prep.unmasked_batch();
        let input = ForwardInput { x_tar: &b.x_masked, mask_rows: None, graphs: &b.graphs };
        let f = prep.model.forward(&mut t, &p, &input).unwrap();
        t.value(f.decoded).clone()
    };
    assert_eq!(decoded(&on, &params), decoded(&off, &plain));
}

fn subset(full: &ParamStore, like: &ParamStore) -> ParamStore {
    let mut s = ParamStore::new();
    for name in like.names() {
        s.insert(name.clone(), full.get(name).unwrap().clone()).unwrap();
    }
    s
}

#[test]
fn every_parameter_gets_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = apv(&mut rng, 15, 12, 3, 0.25);
    let cfg = Config {
        node_mask_rate: 0.3,
        ..f64_config()
    };
    let prep = Prepared::new(&g, &cfg).unwrap();
    let params = prep.init_params();
    let batch = prep.batch(&prep.draw_plan(3, None).unwrap()).unwrap();
    assert!(!batch.masked_nodes.is_empty());
    let mut t = Tape::new(Precision::F64);
    let p = params.bind(&mut t);
    let loss = prep.record_loss(&mut t, &p, &batch).unwrap();
    let grads = t.backward(loss.total).unwrap();
    for (name, &v) in params.names().iter().zip(p.vars()) {
        let gm = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gm.all_finite(), "{name}");
        if !name.contains("prelu") {
            assert!(gm.data().iter().any(|&x| x != 0.0), "{name} has zero gradient");
        }
    }
}

#[test]
fn mask_token_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = apv(&mut rng, 10, 8, 3, 0.3);
    let prep = Prepared::new(&g, &f64_config()).unwrap();
    let params = prep.init_params();
    let batch = prep.batch(&prep.draw_plan(5, None).unwrap()).unwrap();
    let token = params.position("mask_token").unwrap();
    let report = hgae_core::gradcheck::grad_check(
        |tape, vars| {
            let mut all = params.bind(tape).vars().to_vec();
            all[token] = vars[0];
            let p = params.wrap(all);
            Ok(prep.record_loss(tape, &p, &batch).unwrap().l_feat)
        },
        &[params.get("mask_token").unwrap().clone()],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");

    let mut t = Tape::new(Precision::F64);
    let p = params.bind(&mut t);
    let l = prep.record_loss(&mut t, &p, &batch).unwrap();
    let grads = t.backward(l.l_feat).unwrap();
    assert!(grads.get(p.get("mask_token")).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn full_loss_gradient_matches_differences() {
    for seed in 0..5 {
        let r = end_to_end_grad_check(seed);
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {r:?}");
        assert!(r.checked > r.excluded);
    }
}

#[test]
fn unmasked_forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = apv(&mut rng, 10, 8, 3, 0.3);
    let prep = Prepared::new(&g, &Config::default()).unwrap();
    let params = prep.init_params();
    let a = prep.model.embed(&params, &prep.x_tar, &prep.graphs).unwrap();
    let b = prep.model.embed(&params, &prep.x_tar, &prep.graphs).unwrap();
    assert_eq!(a.shape(), (10, 64));
    assert_eq!(a.data(), b.data());
}
