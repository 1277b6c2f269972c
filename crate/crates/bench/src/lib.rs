//! Criterion benchmarks of the hot paths: geometry generation,
//! homogenization, surrogate evaluation, the training loss and design.
//! Run with `cargo bench -p spinodoid-bench`.
