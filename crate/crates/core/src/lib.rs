//! Heterogeneous graph masked autoencoder with meta-path masking,
//! intra-meta-path propagation and mask-policy analysis.

pub mod adam;
pub mod analysis;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod hetgraph;
pub mod loss;
pub mod masking;
pub mod matrix;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;
