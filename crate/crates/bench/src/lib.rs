//! Benchmarks for retrieval and contrastive training live in `benches/`.
