//! Fixtures shared by the criterion benches.

use tvcd_core::generator::{generate_pairs, DatasetPair, GeneratorConfig};
use tvcd_core::harness::RunConfig;

/// Default run configuration at a square image `size`, with generator
/// object sizes scaled to the canvas.
pub fn config(size: usize) -> RunConfig {
    let mut c = RunConfig::default();
    let scale = |(lo, hi): (usize, usize)| ((lo * size / 64).max(1), (hi * size / 64).max(1));
    c.image_size = size;
    c.generator.height = size;
    c.generator.width = size;
    c.generator.land_size = scale(c.generator.land_size);
    c.generator.building_size = scale(c.generator.building_size);
    c
}

pub fn pairs(cfg: &RunConfig, n: usize) -> Vec<DatasetPair> {
    generate_pairs(&GeneratorConfig {
        n,
        ..cfg.generator.clone()
    })
    .expect("bench generator config is valid")
}
