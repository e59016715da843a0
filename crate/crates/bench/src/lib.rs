//! Benchmarks for the stormadapt kernels; see `benches/`.
