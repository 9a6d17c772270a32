//! Criterion benchmarks for the hot paths of the pipeline. Run with
//! `cargo bench -p krill-bench`.
