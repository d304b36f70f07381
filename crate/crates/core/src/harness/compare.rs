use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use crate::error::Result;
use crate::generator::{
    apply_edits, mix, overlap_statistic, random_plan, random_scene, render_scene, star_pair, SceneObject,
    SceneSpec, Shape, BUILDING,
};
use crate::raster::{BinaryMask, ImageTensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub nonzero: usize,
    pub values: Vec<f64>,
}

impl OverlapSummary {
    fn new(values: Vec<f64>) -> Self {
        let count = values.len();
        let mean = if count == 0 { 0.0 } else { values.iter().sum::<f64>() / count as f64 };
        Self {
            count,
            mean,
            min: if count == 0 { 0.0 } else { values.iter().copied().fold(f64::INFINITY, f64::min) },
            max: values.iter().copied().fold(0.0, f64::max),
            nonzero: values.iter().filter(|&&v| v > 0.0).count(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairingComparison {
    pub pool_size: usize,
    pub batch_size: usize,
    pub colocated: bool,
    /// Random in-batch pairing of unrelated scenes.
    pub random_pairing: OverlapSummary,
    /// Edited counterparts of the same scenes.
    pub edit_pairing: OverlapSummary,
}

impl PairingComparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

/// Adds a building at the same place in every scene.
fn with_shared_building(mut scene: SceneSpec) -> SceneSpec {
    let side = (scene.height.min(scene.width) / 4).max(2);
    let id = scene.objects.iter().map(|o| o.id).max().unwrap_or(0) + 1;
    scene.objects.push(SceneObject {
        id,
        category: BUILDING,
        shape: Shape::Rect {
            top: (scene.height - side) / 2,
            left: (scene.width - side) / 2,
            height: side,
            width: side,
        },
        texture_seed: mix(scene.seed, id as u64),
    });
    scene
}

/// Builds both kinds of pairs from one pool of scenes and reports their
/// building-overlap statistics.
pub fn compare_pairing(cfg: &RunConfig) -> Result<PairingComparison> {
    cfg.validate()?;
    let gen = &cfg.generator;
    let cc = &cfg.compare;
    let scenes: Vec<SceneSpec> = (0..cc.pool_size)
        .map(|i| {
            let s = random_scene(gen, gen.sample_seed(i));
            if cc.colocated {
                with_shared_building(s)
            } else {
                s
            }
        })
        .collect();

    let mut edit_values = Vec::with_capacity(scenes.len());
    let mut pool: Vec<(ImageTensor, BinaryMask)> = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed, 1 + i as u64));
        let plan = random_plan(gen, scene, &mut rng);
        edit_values.push(overlap_statistic(&apply_edits(scene, &plan)?)?);
        let (img, labels) = render_scene(scene)?;
        pool.push((img, BinaryMask::of_class(&labels, BUILDING)));
    }

    // consecutive batches; a trailing singleton joins the previous batch
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < pool.len() {
        let mut end = (start + cc.batch_size).min(pool.len());
        if pool.len() - end < 2 {
            end = pool.len();
        }
        bounds.push((start, end));
        start = end;
    }
    let mut random_values = Vec::with_capacity(pool.len());
    for (b, &(s, e)) in bounds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, b as u64));
        for pair in star_pair(&pool[s..e], &mut rng)? {
            random_values.push(overlap_statistic(&pair)?);
        }
    }

    Ok(PairingComparison {
        pool_size: cc.pool_size,
        batch_size: cc.batch_size,
        colocated: cc.colocated,
        random_pairing: OverlapSummary::new(random_values),
        edit_pairing: OverlapSummary::new(edit_values),
    })
}
