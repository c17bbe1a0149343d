//! Criterion benchmarks for the rasterizer, BA objective and PnP. Run with `cargo bench -p dynsplat-bench`.
