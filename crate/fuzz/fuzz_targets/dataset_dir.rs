#![no_main]
//! Input is `graph.json`, then one NUL-separated file per node type and per
//! relation, in declaration order.
use hgae_core::hetgraph::{load_dataset, GraphConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut parts = data.split(|&b| b == 0);
    let Some(head) = parts.next() else { return };
    let Ok(head) = std::str::from_utf8(head) else { return };
    let Ok(cfg) = GraphConfig::from_json(head) else { return };
    let dir = tempfile::tempdir().unwrap();
    let mut write = |name: String| {
        let _ = std::fs::write(dir.path().join(name), parts.next().unwrap_or_default());
    };
    std::fs::write(dir.path().join("graph.json"), head).unwrap();
    for t in &cfg.node_types {
        write(format!("nodes_{t}.tsv"));
    }
    for (_, r, _) in &cfg.relations {
        write(format!("edges_{r}.tsv"));
    }
    if let Ok(g) = load_dataset(dir.path()) {
        assert!(g.validate().is_empty());
        for spec in &g.metapaths {
            let _ = g.build_metapath_adjacency(spec, false);
        }
    }
});
