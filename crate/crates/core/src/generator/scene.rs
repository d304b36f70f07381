//! Procedural scenes: object geometry, category textures and rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageTensor, LabelMap};

pub const BACKGROUND: u8 = 0;
pub const BUILDING: u8 = 1;
pub const FOREST: u8 = 2;
pub const FARMLAND: u8 = 3;
pub const WATER: u8 = 4;

pub const CLASS_NAMES: [&str; 5] = ["background", "building", "forest", "farmland", "water"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned, `[top, top + height) x [left, left + width)`.
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Simple polygon in pixel coordinates `(x, y)`; a pixel is inside when
    /// its centre is (even-odd rule).
    Blob { vertices: Vec<(f64, f64)> },
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match self {
            Shape::Rect {
                top,
                left,
                height,
                width,
            } => y >= *top && y < top + height && x >= *left && x < left + width,
            Shape::Blob { vertices } => {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (xi, yi) = vertices[i];
                    let (xj, yj) = vertices[(i + n - 1) % n];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    fn within(&self, height: usize, width: usize) -> bool {
        match self {
            Shape::Rect {
                top,
                left,
                height: h,
                width: w,
            } => *h > 0 && *w > 0 && top + h <= height && left + w <= width,
            Shape::Blob { vertices } => {
                vertices.len() >= 3
                    && vertices
                        .iter()
                        .all(|&(x, y)| (0.0..=width as f64).contains(&x) && (0.0..=height as f64).contains(&y))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub category: u8,
    pub shape: Shape,
    pub texture_seed: u64,
}

/// Objects are painted in list order, so later ones occlude earlier ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("empty canvas".into()));
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Invalid(format!(
                "scene class count {} outside 2..={}",
                self.num_classes,
                CLASS_NAMES.len()
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(Error::Invalid(format!("duplicate object id {}", o.id)));
            }
            if o.category as usize >= self.num_classes {
                return Err(Error::Invalid(format!("object {} has category {} >= K", o.id, o.category)));
            }
            if !o.shape.within(self.height, self.width) {
                return Err(Error::Invalid(format!("object {} lies outside the canvas", o.id)));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Appearance change applied on top of an object's texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    /// Added to every channel, in `[-0.3, 0.3]`.
    pub brightness: f64,
    /// Rotation about the grey axis in degrees, in `[-30, 30]`.
    pub hue_degrees: f64,
}

impl Photometric {
    pub const MAX_BRIGHTNESS: f64 = 0.3;
    pub const MAX_HUE_DEGREES: f64 = 30.0;

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, max: f64| (-max..=max).contains(&v);
        if !within(self.brightness, Self::MAX_BRIGHTNESS) || !within(self.hue_degrees, Self::MAX_HUE_DEGREES) {
            return Err(Error::Invalid(format!(
                "photometric edit out of range: brightness {}, hue {}",
                self.brightness, self.hue_degrees
            )));
        }
        Ok(())
    }

    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let a = self.hue_degrees.to_radians();
        let (s, c) = a.sin_cos();
        let k = (1.0 - c) / 3.0;
        let r = (1.0f64 / 3.0).sqrt() * s;
        let m = [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]];
        let mut out = [0.0; 3];
        for (i, row) in m.iter().enumerate() {
            let v: f64 = row.iter().zip(rgb).map(|(w, x)| w * x).sum();
            out[i] = (v + self.brightness).clamp(0.0, 1.0);
        }
        out
    }
}

/// Rendered image, labels, and which object is visible at each pixel
/// (`0` = canvas background, otherwise `object index + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: ImageTensor,
    pub labels: LabelMap,
    pub instances: Vec<u32>,
}

pub fn render_scene(spec: &SceneSpec) -> Result<(ImageTensor, LabelMap)> {
    let r = render_with(spec, &BTreeMap::new())?;
    Ok((r.image, r.labels))
}

/// Renders with optional per-object photometric adjustments.
pub fn render_with(spec: &SceneSpec, photometric: &BTreeMap<u32, Photometric>) -> Result<Rendered> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let bg_seed = mix(spec.seed, 0xB6);
    let mut image = ImageTensor::filled(h, w, [0.0; 3]);
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    let mut instances = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            image.set_pixel(y, x, texel(BACKGROUND, bg_seed, y, x));
        }
    }
    for (idx, obj) in spec.objects.iter().enumerate() {
        let adjust = photometric.get(&obj.id);
        let (y0, y1, x0, x1) = bounds(&obj.shape, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                if !obj.shape.contains(y, x) {
                    continue;
                }
                let mut rgb = texel(obj.category, obj.texture_seed, y, x);
                if let Some(p) = adjust {
                    rgb = p.apply(rgb);
                }
                image.set_pixel(y, x, rgb);
                labels.set(y, x, obj.category);
                instances[y * w + x] = idx as u32 + 1;
            }
        }
    }
    Ok(Rendered {
        image,
        labels,
        instances,
    })
}

fn bounds(shape: &Shape, h: usize, w: usize) -> (usize, usize, usize, usize) {
    match shape {
        Shape::Rect {
            top,
            left,
            height,
            width,
        } => (*top, top + height, *left, left + width),
        Shape::Blob { vertices } => {
            let ys = vertices.iter().map(|v| v.1);
            let xs = vertices.iter().map(|v| v.0);
            let y0 = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let y1 = (ys.fold(0.0, f64::max).ceil() as usize).min(h);
            let x0 = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let x1 = (xs.fold(0.0, f64::max).ceil() as usize).min(w);
            (y0, y1, x0, x1)
        }
    }
}

/// SplitMix64 finalizer over the combined inputs.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash01(seed: u64, y: i64, x: i64) -> f64 {
    let h = mix(mix(seed, y as u64), x as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly interpolated lattice noise with the given cell size.
fn smooth_noise(seed: u64, y: usize, x: usize, cell: usize) -> f64 {
    let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
    let (y0, x0) = (fy.floor() as i64, fx.floor() as i64);
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let a = hash01(seed, y0, x0);
    let b = hash01(seed, y0, x0 + 1);
    let c = hash01(seed, y0 + 1, x0);
    let d = hash01(seed, y0 + 1, x0 + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

fn offset(base: [f64; 3], delta: f64) -> [f64; 3] {
    base.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// Category-characteristic colour at a pixel.
pub fn texel(category: u8, seed: u64, y: usize, x: usize) -> [f64; 3] {
    let fine = hash01(seed, y as i64, x as i64) - 0.5;
    match category {
        BACKGROUND => {
            let blot = smooth_noise(seed, y, x, 8) - 0.5;
            offset([0.58, 0.52, 0.43], 0.10 * blot + 0.05 * fine)
        }
        BUILDING => {
            const ROOFS: [[f64; 3]; 4] = [[0.80, 0.80, 0.82], [0.72, 0.36, 0.30], [0.52, 0.58, 0.72], [0.88, 0.84, 0.72]];
            let roof = ROOFS[(mix(seed, 1) % ROOFS.len() as u64) as usize];
            let ridge = if (x + y / 4).is_multiple_of(4) { -0.06 } else { 0.0 };
            offset(roof, ridge + 0.03 * fine)
        }
        FOREST => {
            let canopy = smooth_noise(seed, y, x, 3) - 0.5;
            offset([0.14, 0.36, 0.14], 0.14 * canopy + 0.04 * fine)
        }
        FARMLAND => {
            let period = 4 + (mix(seed, 2) % 3) as usize;
            let coord = match mix(seed, 3) % 3 {
                0 => y,
                1 => x,
                _ => x + y,
            };
            let base = if (coord / (period / 2)).is_multiple_of(2) {
                [0.80, 0.72, 0.38]
            } else {
                [0.55, 0.66, 0.27]
            };
            offset(base, 0.03 * fine)
        }
        WATER => {
            let ripple = smooth_noise(seed, y, x, 6) - 0.5;
            offset([0.10, 0.24, 0.52], 0.05 * ripple + 0.015 * fine)
        }
        _ => offset([0.5, 0.5, 0.5], 0.1 * fine),
    }
}
