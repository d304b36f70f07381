//! Controlled edits that turn one rendered scene into a pseudo bi-temporal pair.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{render_with, Photometric, SceneSpec, BUILDING};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ChangeMask, ImageTensor, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Edit {
    CategoryChange { target: u8 },
    Photometric(Photometric),
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub edits: Vec<(u32, Edit)>,
}

impl EditPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: u32, edit: Edit) {
        self.edits.push((id, edit));
    }

    /// Hex SHA-256 of the plan's JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("edit plans always serialize");
        hex::encode(Sha256::digest(&json))
    }

    /// Checks the plan against `scene`: ids must exist and appear once,
    /// buildings only take photometric edits, other objects only category
    /// changes, and no change may turn anything into a building.
    pub fn validate(&self, scene: &SceneSpec) -> Result<()> {
        let mut seen = HashSet::new();
        for (id, edit) in &self.edits {
            let obj = scene
                .object(*id)
                .ok_or_else(|| Error::Invalid(format!("edit references unknown object {id}")))?;
            if !seen.insert(*id) {
                return Err(Error::Invalid(format!("object {id} edited twice")));
            }
            match edit {
                Edit::None => {}
                Edit::CategoryChange { target } => {
                    if obj.category == BUILDING {
                        return Err(Error::Invalid(format!(
                            "object {id} is a building and may only be edited photometrically"
                        )));
                    }
                    if *target == BUILDING {
                        return Err(Error::Invalid(format!("object {id} may not be changed into a building")));
                    }
                    if *target as usize >= scene.num_classes {
                        return Err(Error::Invalid(format!("target category {target} >= K for object {id}")));
                    }
                }
                Edit::Photometric(p) => {
                    if obj.category != BUILDING {
                        return Err(Error::Invalid(format!(
                            "object {id} is not a building; only category changes apply"
                        )));
                    }
                    p.validate()?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub plan_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub img_a: ImageTensor,
    pub img_b: ImageTensor,
    pub labels_a: LabelMap,
    pub labels_b: LabelMap,
    pub change: ChangeMask,
    /// Object geometry is shared by both temporals, so one instance map
    /// (`0` = canvas, else object index + 1) describes both.
    pub instances: Vec<u32>,
    /// Union of the full footprints of all objects with a non-`None` edit.
    pub edited: BinaryMask,
    pub provenance: Provenance,
}

/// Renders the scene before and after applying `plan`.
pub fn apply_edits(scene: &SceneSpec, plan: &EditPlan) -> Result<PairSample> {
    plan.validate(scene)?;
    let before = render_with(scene, &BTreeMap::new())?;

    let mut after_spec = scene.clone();
    let mut photometric = BTreeMap::new();
    let mut edited_ids = HashSet::new();
    for (id, edit) in &plan.edits {
        match edit {
            Edit::None => {}
            Edit::CategoryChange { target } => {
                let obj = after_spec.objects.iter_mut().find(|o| o.id == *id).expect("validated");
                obj.category = *target;
                edited_ids.insert(*id);
            }
            Edit::Photometric(p) => {
                photometric.insert(*id, *p);
                edited_ids.insert(*id);
            }
        }
    }
    let after = render_with(&after_spec, &photometric)?;

    let (h, w) = (scene.height, scene.width);
    let edited_shapes: Vec<_> = scene
        .objects
        .iter()
        .filter(|o| edited_ids.contains(&o.id))
        .map(|o| &o.shape)
        .collect();
    let edited = BinaryMask::from_fn(h, w, |y, x| edited_shapes.iter().any(|s| s.contains(y, x)));
    let la = &before.labels;
    let lb = &after.labels;
    let change = BinaryMask::from_fn(h, w, |y, x| la.get(y, x) != lb.get(y, x));

    Ok(PairSample {
        img_a: before.image,
        img_b: after.image,
        labels_a: before.labels,
        labels_b: after.labels,
        change,
        instances: before.instances,
        edited,
        provenance: Provenance {
            seed: scene.seed,
            plan_digest: plan.digest(),
        },
    })
}
