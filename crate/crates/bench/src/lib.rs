//! Criterion benchmarks for the scan kernel and the SSM block; see `benches/`.
