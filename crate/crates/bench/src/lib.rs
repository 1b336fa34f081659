//! Criterion benchmarks for the gating kernels, the desk-scale model,
//! depth resampling and AUC. Run with `cargo bench -p hcvt-bench`.
