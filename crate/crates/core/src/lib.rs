//! Reconstruction of the Bitcoin user network from transactions, with
//! weekly structural metrics and a market volatility event study.

pub mod clustering;
pub mod components;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod market;
pub mod metrics;
pub mod pipeline;
