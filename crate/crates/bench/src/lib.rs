//! Criterion benchmarks for the spectrogram front end and training steps.
//! Run with `cargo bench -p lseq-bench`.
