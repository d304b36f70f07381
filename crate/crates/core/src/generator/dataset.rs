//! On-disk dataset layout:
//!
//! ```text
//! <root>/pairs/<id>_a.png, <id>_b.png    8-bit RGB
//! <root>/labels/<id>_a.png, <id>_b.png   8-bit grey, class indices
//! <root>/change/<id>.png                 8-bit grey, 0 or 255
//! <root>/manifest.json
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use super::edit::PairSample;
use super::{generate_sample, GeneratorConfig};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ChangeMask, ImageTensor, LabelMap};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub plan_digest: String,
    pub change_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub generator: GeneratorConfig,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Dataset(format!("manifest: {msg}")));
        if self.format_version != MANIFEST_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes {} out of range", self.num_classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("empty image size".into());
        }
        if self.samples.is_empty() {
            return bad("no samples".into());
        }
        if self.generator.master_seed != self.master_seed
            || self.generator.num_classes != self.num_classes
            || self.generator.n != self.samples.len()
            || (self.generator.height, self.generator.width) != (self.height, self.width)
        {
            return bad("generator settings disagree with header".into());
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if s.id.is_empty() || !s.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("malformed sample id {:?}", s.id));
            }
            if !ids.insert(&s.id) {
                return bad(format!("duplicate sample id {}", s.id));
            }
            if s.plan_digest.len() != 64 || !s.plan_digest.chars().all(|c| c.is_ascii_hexdigit()) {
                return bad(format!("sample {} has a malformed plan digest", s.id));
            }
            if s.change_pixels > self.height * self.width {
                return bad(format!("sample {} change count exceeds image size", s.id));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "manifest".into(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

fn encode_png(width: usize, height: usize, bytes: &[u8], color: ExtendedColorType, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(out)
}

fn write_png(path: &Path, width: usize, height: usize, bytes: &[u8], color: ExtendedColorType) -> Result<()> {
    let data = encode_png(width, height, bytes, color, path)?;
    write_atomic(path, &data)
}

pub fn write_rgb_png(path: &Path, img: &ImageTensor) -> Result<()> {
    write_png(path, img.width(), img.height(), &img.to_rgb8(), ExtendedColorType::Rgb8)
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_png(path, mask.width(), mask.height(), &mask.to_luma8(), ExtendedColorType::L8)
}

fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    write_png(path, labels.width(), labels.height(), labels.data(), ExtendedColorType::L8)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<ImageTensor> {
    let img = decode(path)?.to_rgb8();
    ImageTensor::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn read_mask_png(path: &Path) -> Result<ChangeMask> {
    let img = decode(path)?.to_luma8();
    BinaryMask::from_luma8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn read_label_png(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = decode(path)?.to_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, img.into_raw(), num_classes)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

struct Paths {
    img_a: PathBuf,
    img_b: PathBuf,
    labels_a: PathBuf,
    labels_b: PathBuf,
    change: PathBuf,
}

fn paths(root: &Path, id: &str) -> Paths {
    Paths {
        img_a: root.join("pairs").join(format!("{id}_a.png")),
        img_b: root.join("pairs").join(format!("{id}_b.png")),
        labels_a: root.join("labels").join(format!("{id}_a.png")),
        labels_b: root.join("labels").join(format!("{id}_b.png")),
        change: root.join("change").join(format!("{id}.png")),
    }
}

fn write_sample(root: &Path, id: &str, s: &PairSample) -> Result<()> {
    let p = paths(root, id);
    write_rgb_png(&p.img_a, &s.img_a)?;
    write_rgb_png(&p.img_b, &s.img_b)?;
    write_label_png(&p.labels_a, &s.labels_a)?;
    write_label_png(&p.labels_b, &s.labels_b)?;
    write_mask_png(&p.change, &s.change)
}

/// Generates `cfg.n` pairs into `root` and returns the written manifest.
pub fn generate_dataset(cfg: &GeneratorConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let sample = generate_sample(cfg, i)?;
        let id = sample_id(i);
        write_sample(root, &id, &sample)?;
        samples.push(ManifestEntry {
            id,
            seed: sample.provenance.seed,
            plan_digest: sample.provenance.plan_digest.clone(),
            change_pixels: sample.change.count(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        master_seed: cfg.master_seed,
        num_classes: cfg.num_classes,
        height: cfg.height,
        width: cfg.width,
        generator: cfg.clone(),
        samples,
    };
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        context: "manifest".into(),
        source,
    })?;
    json.push('\n');
    write_atomic(&root.join("manifest.json"), json.as_bytes())?;
    log::info!("wrote {} pairs to {}", cfg.n, root.display());
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub id: String,
    pub img_a: ImageTensor,
    pub img_b: ImageTensor,
    pub labels_a: LabelMap,
    pub labels_b: LabelMap,
    pub change: ChangeMask,
}

impl DatasetPair {
    pub fn from_sample(id: impl Into<String>, s: PairSample) -> Self {
        Self {
            id: id.into(),
            img_a: s.img_a,
            img_b: s.img_b,
            labels_a: s.labels_a,
            labels_b: s.labels_b,
            change: s.change,
        }
    }
}

/// Generates the configured pairs in memory, without touching disk.
pub fn generate_pairs(cfg: &GeneratorConfig) -> Result<Vec<DatasetPair>> {
    cfg.validate()?;
    (0..cfg.n)
        .map(|i| Ok(DatasetPair::from_sample(sample_id(i), generate_sample(cfg, i)?)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub pairs: Vec<DatasetPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Loads and checks a dataset: manifest schema, file presence, image sizes
/// and the recorded change counts.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = Manifest::from_json(&text)?;
    let dims = (manifest.height, manifest.width);
    let mut pairs = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let p = paths(root, &entry.id);
        let pair = DatasetPair {
            id: entry.id.clone(),
            img_a: read_rgb_png(&p.img_a)?,
            img_b: read_rgb_png(&p.img_b)?,
            labels_a: read_label_png(&p.labels_a, manifest.num_classes)?,
            labels_b: read_label_png(&p.labels_b, manifest.num_classes)?,
            change: read_mask_png(&p.change)?,
        };
        let sizes = [
            (pair.img_a.height(), pair.img_a.width()),
            (pair.img_b.height(), pair.img_b.width()),
            (pair.labels_a.height(), pair.labels_a.width()),
            (pair.labels_b.height(), pair.labels_b.width()),
            (pair.change.height(), pair.change.width()),
        ];
        if sizes.iter().any(|&s| s != dims) {
            return Err(Error::Dataset(format!("sample {} has files of the wrong size", entry.id)));
        }
        if pair.change.count() != entry.change_pixels {
            return Err(Error::Dataset(format!(
                "sample {}: change mask has {} pixels, manifest says {}",
                entry.id,
                pair.change.count(),
                entry.change_pixels
            )));
        }
        pairs.push(pair);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        pairs,
    })
}
