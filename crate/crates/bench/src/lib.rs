//! Criterion benchmarks for the network and metric kernels; see `benches/`.
