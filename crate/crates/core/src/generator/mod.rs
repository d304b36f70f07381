//! Procedural single-temporal scenes and the pseudo bi-temporal pairs built
//! from them by controlled category edits.

mod dataset;
mod edit;
mod scene;
mod star;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    generate_dataset, generate_pairs, load_dataset, read_label_png, read_mask_png, read_rgb_png, sample_id, write_mask_png,
    write_rgb_png, Dataset, DatasetPair, Manifest, ManifestEntry, MANIFEST_VERSION,
};
pub use edit::{apply_edits, Edit, EditPlan, PairSample, Provenance};
pub use scene::{
    render_scene, render_with, texel, Photometric, Rendered, SceneObject, SceneSpec, Shape, BACKGROUND, BUILDING,
    CLASS_NAMES, FARMLAND, FOREST, WATER,
};
pub use star::{overlap_statistic, star_pair, BuildingPair, StarPair};

pub(crate) use scene::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    pub master_seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of land-cover objects per scene.
    pub land_objects: (usize, usize),
    /// Inclusive range of buildings per scene.
    pub buildings: (usize, usize),
    /// Inclusive side-length range for land-cover objects.
    pub land_size: (usize, usize),
    pub building_size: (usize, usize),
    /// Share of land-cover objects drawn as polygons rather than rectangles.
    pub blob_fraction: f64,
    /// Probability that a land-cover object changes category.
    pub edit_rate: f64,
    /// Probability that a building gets a photometric edit.
    pub photometric_rate: f64,
    /// Target band for each pair's changed-pixel fraction; plans are redrawn
    /// up to `max_attempts` times to land inside it.
    pub change_band: (f64, f64),
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 64,
            master_seed: 0,
            height: 64,
            width: 64,
            num_classes: 5,
            land_objects: (3, 6),
            buildings: (2, 6),
            land_size: (14, 36),
            building_size: (5, 12),
            blob_fraction: 0.5,
            edit_rate: 0.4,
            photometric_rate: 0.5,
            change_band: (0.02, 0.40),
            max_attempts: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config(
                if self.height < 8 { "height" } else { "width" },
                "must be at least 8",
            ));
        }
        if !(3..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::config(
                "num_classes",
                format!(
                    "generator supports 3..={} categories, got {}",
                    CLASS_NAMES.len(),
                    self.num_classes
                ),
            ));
        }
        let ranges = [
            ("land_objects", self.land_objects, 0),
            ("buildings", self.buildings, 0),
            ("land_size", self.land_size, 1),
            ("building_size", self.building_size, 1),
        ];
        for (name, (lo, hi), min) in ranges {
            if lo > hi || lo < min {
                return Err(Error::config(name, format!("invalid range ({lo}, {hi})")));
            }
        }
        for (name, size) in [("land_size", self.land_size.1), ("building_size", self.building_size.1)] {
            if size > self.height.min(self.width) {
                return Err(Error::config(name, "larger than the canvas"));
            }
        }
        for (name, p) in [
            ("blob_fraction", self.blob_fraction),
            ("edit_rate", self.edit_rate),
            ("photometric_rate", self.photometric_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("must be in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.change_band;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::config("change_band", format!("invalid band ({lo}, {hi})")));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts", "must be positive"));
        }
        Ok(())
    }

    /// Seed of sample `index`, derived from the master seed.
    pub fn sample_seed(&self, index: usize) -> u64 {
        mix(self.master_seed, index as u64)
    }
}

fn range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Random scene: land-cover objects first, buildings painted on top.
pub fn random_scene(cfg: &GeneratorConfig, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let land_categories: Vec<u8> = (2..cfg.num_classes as u8).collect();
    let mut objects = Vec::new();
    let mut next_id = 1u32;

    for _ in 0..range(&mut rng, cfg.land_objects) {
        let category = land_categories[rng.random_range(0..land_categories.len())];
        let shape = if rng.random_bool(cfg.blob_fraction) {
            random_blob(&mut rng, h, w, cfg.land_size)
        } else {
            random_rect(&mut rng, h, w, cfg.land_size)
        };
        objects.push(SceneObject {
            id: next_id,
            category,
            shape,
            texture_seed: rng.random(),
        });
        next_id += 1;
    }
    for _ in 0..range(&mut rng, cfg.buildings) {
        let shape = random_rect(&mut rng, h, w, cfg.building_size);
        objects.push(SceneObject {
            id: next_id,
            category: BUILDING,
            shape,
            texture_seed: rng.random(),
        });
        next_id += 1;
    }
    SceneSpec {
        seed,
        height: h,
        width: w,
        num_classes: cfg.num_classes,
        objects,
    }
}

fn random_rect<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, size: (usize, usize)) -> Shape {
    let height = range(rng, size);
    let width = range(rng, size);
    Shape::Rect {
        top: rng.random_range(0..=h - height),
        left: rng.random_range(0..=w - width),
        height,
        width,
    }
}

fn random_blob<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, size: (usize, usize)) -> Shape {
    let radius = range(rng, size) as f64 / 2.0;
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    let n = rng.random_range(6..=10);
    let vertices = (0..n)
        .map(|i| {
            let angle = (i as f64 + rng.random_range(-0.3..0.3)) * std::f64::consts::TAU / n as f64;
            let r = radius * rng.random_range(0.6..1.0);
            (
                (cx + r * angle.cos()).clamp(0.0, w as f64),
                (cy + r * angle.sin()).clamp(0.0, h as f64),
            )
        })
        .collect();
    Shape::Blob { vertices }
}

/// Random plan obeying the building rule.
pub fn random_plan<R: Rng + ?Sized>(cfg: &GeneratorConfig, scene: &SceneSpec, rng: &mut R) -> EditPlan {
    let mut plan = EditPlan::new();
    for obj in &scene.objects {
        let edit = if obj.category == BUILDING {
            if rng.random_bool(cfg.photometric_rate) {
                Edit::Photometric(Photometric {
                    brightness: rng.random_range(-Photometric::MAX_BRIGHTNESS..=Photometric::MAX_BRIGHTNESS),
                    hue_degrees: rng.random_range(-Photometric::MAX_HUE_DEGREES..=Photometric::MAX_HUE_DEGREES),
                })
            } else {
                Edit::None
            }
        } else if rng.random_bool(cfg.edit_rate) {
            let options: Vec<u8> = (0..scene.num_classes as u8)
                .filter(|&c| c != BUILDING && c != obj.category)
                .collect();
            Edit::CategoryChange {
                target: options[rng.random_range(0..options.len())],
            }
        } else {
            Edit::None
        };
        plan.push(obj.id, edit);
    }
    plan
}

/// Sample `index`: a random scene plus the first drawn plan whose change
/// fraction lies in the configured band (or the closest of all attempts).
pub fn generate_sample(cfg: &GeneratorConfig, index: usize) -> Result<PairSample> {
    cfg.validate()?;
    let seed = cfg.sample_seed(index);
    let scene = random_scene(cfg, seed);
    let (lo, hi) = cfg.change_band;
    let total = (cfg.height * cfg.width) as f64;
    let mut best: Option<(f64, PairSample)> = None;
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, attempt as u64 + 1));
        let plan = random_plan(cfg, &scene, &mut rng);
        let sample = apply_edits(&scene, &plan)?;
        let frac = sample.change.count() as f64 / total;
        let miss = (lo - frac).max(frac - hi).max(0.0);
        if miss == 0.0 {
            return Ok(sample);
        }
        if best.as_ref().is_none_or(|(m, _)| miss < *m) {
            best = Some((miss, sample));
        }
    }
    Ok(best.expect("at least one attempt").1)
}

pub fn generate_samples(cfg: &GeneratorConfig) -> Result<Vec<PairSample>> {
    (0..cfg.n).map(|i| generate_sample(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
        let bad = GeneratorConfig {
            num_classes: 1,
            ..Default::default()
        };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "num_classes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn random_scenes_are_valid() {
        let cfg = GeneratorConfig::default();
        for i in 0..50 {
            random_scene(&cfg, i).validate().unwrap();
        }
    }

    #[test]
    fn samples_respect_invariants() {
        let cfg = GeneratorConfig {
            n: 16,
            master_seed: 3,
            ..Default::default()
        };
        for s in generate_samples(&cfg).unwrap() {
            for i in 0..s.change.len() {
                let (y, x) = (i / 64, i % 64);
                assert_eq!(s.change.get(y, x), s.labels_a.get(y, x) != s.labels_b.get(y, x));
                if !s.edited.get(y, x) {
                    assert_eq!(s.img_a.pixel(y, x), s.img_b.pixel(y, x));
                }
                assert!(!(s.change.get(y, x) && (s.labels_a.get(y, x) == BUILDING || s.labels_b.get(y, x) == BUILDING)));
            }
            assert_eq!(overlap_statistic(&s).unwrap(), 0.0);
        }
    }
}
