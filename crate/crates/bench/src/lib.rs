//! Criterion benchmarks for the hiergraph kernels; see `benches/kernels.rs`.
