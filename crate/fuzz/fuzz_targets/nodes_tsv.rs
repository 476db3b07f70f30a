#![no_main]
use hgae_core::hetgraph::parse_nodes_tsv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(nodes) = parse_nodes_tsv(data, "nodes_fuzz.tsv") {
        let mut ids: Vec<&str> = nodes.iter().map(|n| n.id.as_str()).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n, "accepted duplicate ids");
    }
});
