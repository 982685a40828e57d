//! Benchmarks for the trimming and impact pipeline live in `benches/`.
