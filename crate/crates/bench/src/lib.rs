//! Criterion benchmarks for the hot paths: STFT/log-mel, codec synthesis,
//! the noise estimator and a full restoration. Run with `cargo bench -p lldm-bench`.
