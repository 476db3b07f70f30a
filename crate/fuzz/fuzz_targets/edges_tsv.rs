#![no_main]
use std::collections::HashMap;

use hgae_core::hetgraph::{parse_edges_tsv, IdSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let a: HashMap<String, u32> = (0..8).map(|i| (format!("a{i}"), i)).collect();
    let p: HashMap<String, u32> = (0..5).map(|i| (format!("p{i}"), i)).collect();
    let src = IdSpace { type_name: "author", ids: &a };
    let dst = IdSpace { type_name: "paper", ids: &p };
    if let Ok(edges) = parse_edges_tsv(data, "edges_fuzz.tsv", &src, &dst) {
        assert!(edges.iter().all(|&(s, d)| s < 8 && d < 5));
    }
});
