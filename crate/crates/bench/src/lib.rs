//! Criterion benchmarks for rkb-core live under `benches/`.
