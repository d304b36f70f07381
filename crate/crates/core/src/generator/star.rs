//! Random in-batch pairing of single-temporal images and the overlap
//! statistic that exposes its physically impossible building overlaps.

use rand::Rng;

use super::edit::PairSample;
use super::scene::BUILDING;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ChangeMask, ImageTensor};

/// Two unrelated images treated as a pair; the change label is the XOR of
/// their building masks.
#[derive(Clone, Debug, PartialEq)]
pub struct StarPair {
    pub img_a: ImageTensor,
    pub img_b: ImageTensor,
    pub mask_a: BinaryMask,
    pub mask_b: BinaryMask,
    pub change: ChangeMask,
    /// Batch indices of the two source images.
    pub source: (usize, usize),
}

/// Pairs each image with another via a uniformly random cyclic permutation,
/// so no image is paired with itself.
pub fn star_pair<R: Rng + ?Sized>(batch: &[(ImageTensor, BinaryMask)], rng: &mut R) -> Result<Vec<StarPair>> {
    if batch.len() < 2 {
        return Err(Error::Invalid(format!(
            "random pairing needs at least 2 images, got {}",
            batch.len()
        )));
    }
    let dims = (batch[0].1.height(), batch[0].1.width());
    for (img, mask) in batch {
        if (img.height(), img.width()) != dims || (mask.height(), mask.width()) != dims {
            return Err(Error::Shape("pairing batch mixes image sizes".into()));
        }
    }
    // Sattolo's algorithm
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm.iter()
        .enumerate()
        .map(|(i, &j)| {
            let (img_a, mask_a) = &batch[i];
            let (img_b, mask_b) = &batch[j];
            Ok(StarPair {
                img_a: img_a.clone(),
                img_b: img_b.clone(),
                mask_a: mask_a.clone(),
                mask_b: mask_b.clone(),
                change: mask_a.xor(mask_b)?,
                source: (i, j),
            })
        })
        .collect()
}

/// Anything exposing building masks for both temporals.
pub trait BuildingPair {
    fn building_masks(&self) -> (BinaryMask, BinaryMask);
    /// Pixels where the two temporals show the same physical building;
    /// `None` when no such correspondence exists.
    fn consistent(&self) -> Option<BinaryMask>;
}

impl BuildingPair for StarPair {
    fn building_masks(&self) -> (BinaryMask, BinaryMask) {
        (self.mask_a.clone(), self.mask_b.clone())
    }

    fn consistent(&self) -> Option<BinaryMask> {
        None
    }
}

impl BuildingPair for PairSample {
    fn building_masks(&self) -> (BinaryMask, BinaryMask) {
        (
            BinaryMask::of_class(&self.labels_a, BUILDING),
            BinaryMask::of_class(&self.labels_b, BUILDING),
        )
    }

    fn consistent(&self) -> Option<BinaryMask> {
        // geometry is shared, so a building pixel in both temporals belongs
        // to the same object in both
        let (a, b) = self.building_masks();
        a.and(&b).ok()
    }
}

/// `|a & b & !consistent| / |a | b|`, or 0 when the union is empty.
pub fn overlap_statistic<P: BuildingPair + ?Sized>(pair: &P) -> Result<f64> {
    let (a, b) = pair.building_masks();
    let both = a.and(&b)?;
    let clash = match pair.consistent() {
        Some(c) => both.and(&c.not())?,
        None => both,
    };
    let union = a.or(&b)?.count();
    if union == 0 {
        return Ok(0.0);
    }
    Ok(clash.count() as f64 / union as f64)
}
