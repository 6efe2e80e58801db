//! Criterion benchmarks for the toolkit's hot paths: NMS, Hungarian
//! matching, deformable attention, connected components and a full model
//! forward. Run with `cargo bench -p mavlkit-bench`.
