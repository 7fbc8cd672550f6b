//! Dataset manifest: classes with prompt sets and templates, images with
//! split/fold assignments, optional per-image captions, plus validated views
//! that keep test folds out of training code paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::embedio::bank::EmbeddingBank;
use crate::error::{Error, Result};

/// Provenance tag for a reference prompt inside a planted set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTag {
    Relevant,
    Redundant,
    Irrelevant,
}

/// Base classes are seen during training; new classes are evaluation-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    New,
}

/// Train/test fold of an image within its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Test,
}

/// Non-empty set of prompt-embedding ids belonging to one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptSet(pub Vec<usize>);

impl PromptSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub name: String,
    /// Text-bank id of this class's template embedding.
    pub template_id: usize,
    /// Text-bank ids of the reference prompt embeddings.
    pub prompt_ids: PromptSet,
    /// Per-prompt provenance, aligned with `prompt_ids` (planted data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_mask: Option<Vec<NoiseTag>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Image-bank id.
    pub embed_id: usize,
    /// Index into `classes`.
    pub class: usize,
    pub split: Split,
    pub fold: Fold,
}

/// Full dataset description. Caption ids index the text bank and are keyed
/// by image `embed_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<ClassRecord>,
    pub images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub captions: BTreeMap<usize, Vec<usize>>,
}

impl DatasetManifest {
    /// Structural validation against the two banks' row counts.
    pub fn validate(&self, image_count: usize, text_count: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Data("manifest has no classes".into()));
        }
        if self.images.is_empty() {
            return Err(Error::Data("manifest has no images".into()));
        }
        for (ci, class) in self.classes.iter().enumerate() {
            if class.template_id >= text_count {
                return Err(Error::Data(format!(
                    "class '{}' template id {} exceeds text bank ({text_count} rows)",
                    class.name, class.template_id
                )));
            }
            if class.prompt_ids.is_empty() {
                return Err(Error::Data(format!(
                    "class '{}' has an empty prompt set",
                    class.name
                )));
            }
            for &pid in class.prompt_ids.ids() {
                if pid >= text_count {
                    return Err(Error::Data(format!(
                        "class '{}' prompt id {pid} exceeds text bank ({text_count} rows)",
                        class.name
                    )));
                }
            }
            if let Some(mask) = &class.noise_mask {
                if mask.len() != class.prompt_ids.len() {
                    return Err(Error::Data(format!(
                        "class '{}' noise mask covers {} of {} prompts",
                        class.name,
                        mask.len(),
                        class.prompt_ids.len()
                    )));
                }
            }
            if self.classes.iter().skip(ci + 1).any(|c| c.name == class.name) {
                return Err(Error::Data(format!("duplicate class name '{}'", class.name)));
            }
        }

        let mut seen_ids = BTreeSet::new();
        let mut class_split: Vec<Option<Split>> = vec![None; self.classes.len()];
        let mut class_test_count = vec![0usize; self.classes.len()];
        for img in &self.images {
            if img.class >= self.classes.len() {
                return Err(Error::Data(format!(
                    "image {} references class {} of {}",
                    img.embed_id,
                    img.class,
                    self.classes.len()
                )));
            }
            if img.embed_id >= image_count {
                return Err(Error::Data(format!(
                    "image id {} exceeds image bank ({image_count} rows)",
                    img.embed_id
                )));
            }
            if !seen_ids.insert(img.embed_id) {
                return Err(Error::Data(format!(
                    "image id {} appears more than once (fold leakage)",
                    img.embed_id
                )));
            }
            match class_split[img.class] {
                None => class_split[img.class] = Some(img.split),
                Some(s) if s != img.split => {
                    return Err(Error::Data(format!(
                        "class '{}' has images in both base and new splits",
                        self.classes[img.class].name
                    )));
                }
                _ => {}
            }
            if img.fold == Fold::Test {
                class_test_count[img.class] += 1;
            }
        }
        for (ci, class) in self.classes.iter().enumerate() {
            if class_split[ci].is_none() {
                return Err(Error::Data(format!("class '{}' has no images", class.name)));
            }
            if class_test_count[ci] == 0 {
                return Err(Error::Data(format!(
                    "class '{}' has no test-fold images",
                    class.name
                )));
            }
        }

        let mut caption_ids = BTreeSet::new();
        for (&img_id, caps) in &self.captions {
            if !seen_ids.contains(&img_id) {
                return Err(Error::Data(format!(
                    "captions reference unknown image id {img_id}"
                )));
            }
            if caps.is_empty() {
                return Err(Error::Data(format!(
                    "image {img_id} has an empty caption list"
                )));
            }
            for &cid in caps {
                if cid >= text_count {
                    return Err(Error::Data(format!(
                        "caption id {cid} exceeds text bank ({text_count} rows)"
                    )));
                }
                if !caption_ids.insert(cid) {
                    return Err(Error::Data(format!(
                        "caption id {cid} assigned to more than one image"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// A labeled subset of the manifest's classes. Local labels are positions in
/// `class_indices`; training code receives only train-fold images, keeping
/// the test fold structurally out of reach.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    manifest: &'a DatasetManifest,
    class_indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn new(manifest: &'a DatasetManifest, class_indices: Vec<usize>) -> Result<Self> {
        for &ci in &class_indices {
            if ci >= manifest.classes.len() {
                return Err(Error::Data(format!(
                    "view references class index {ci} of {}",
                    manifest.classes.len()
                )));
            }
        }
        if class_indices.is_empty() {
            return Err(Error::Data("view needs at least one class".into()));
        }
        Ok(DatasetView {
            manifest,
            class_indices,
        })
    }

    /// View over every class, in manifest order.
    pub fn full(manifest: &'a DatasetManifest) -> Self {
        DatasetView {
            class_indices: (0..manifest.classes.len()).collect(),
            manifest,
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_indices.len()
    }

    pub fn manifest(&self) -> &DatasetManifest {
        self.manifest
    }

    /// Global class index backing local label `local`.
    pub fn global_class(&self, local: usize) -> usize {
        self.class_indices[local]
    }

    pub fn class_record(&self, local: usize) -> &ClassRecord {
        &self.manifest.classes[self.class_indices[local]]
    }

    fn local_label(&self, global: usize) -> Option<usize> {
        self.class_indices.iter().position(|&c| c == global)
    }

    /// `(embed_id, local_label)` pairs for the train fold, manifest order.
    pub fn train_images(&self) -> Vec<(usize, usize)> {
        self.images_in_fold(Fold::Train)
    }

    /// `(embed_id, local_label)` pairs for the held-out test fold.
    pub fn test_images(&self) -> Vec<(usize, usize)> {
        self.images_in_fold(Fold::Test)
    }

    fn images_in_fold(&self, fold: Fold) -> Vec<(usize, usize)> {
        self.manifest
            .images
            .iter()
            .filter(|img| img.fold == fold)
            .filter_map(|img| self.local_label(img.class).map(|l| (img.embed_id, l)))
            .collect()
    }

    /// Template text-bank ids, ordered by local label.
    pub fn template_ids(&self) -> Vec<usize> {
        self.class_indices
            .iter()
            .map(|&ci| self.manifest.classes[ci].template_id)
            .collect()
    }

    /// Per-class template embeddings stacked as a `C x d` tensor.
    pub fn templates_tensor(&self, text: &EmbeddingBank) -> Result<crate::diffcore::Tensor> {
        text.rows_tensor(&self.template_ids())
    }
}

/// Splits into (base, new) views: the first `ceil(C / 2)`-sized base half is
/// whatever the manifest tags as base. Split tags must agree with validation.
pub fn base_new_split(manifest: &DatasetManifest) -> Result<(DatasetView<'_>, DatasetView<'_>)> {
    let mut class_split: Vec<Option<Split>> = vec![None; manifest.classes.len()];
    for img in &manifest.images {
        class_split[img.class] = Some(img.split);
    }
    let mut base = Vec::new();
    let mut new = Vec::new();
    for (ci, split) in class_split.iter().enumerate() {
        match split {
            Some(Split::Base) => base.push(ci),
            Some(Split::New) => new.push(ci),
            None => {
                return Err(Error::Data(format!(
                    "class '{}' has no images",
                    manifest.classes[ci].name
                )))
            }
        }
    }
    if base.is_empty() || new.is_empty() {
        return Err(Error::Data(
            "base/new split requires both splits to be populated".into(),
        ));
    }
    Ok((
        DatasetView::new(manifest, base)?,
        DatasetView::new(manifest, new)?,
    ))
}

/// Returns a manifest whose train folds keep exactly `k` images per class,
/// sampled deterministically; test folds are untouched.
pub fn kshot_sample(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    if k == 0 {
        return Err(Error::Config("k-shot sampling needs k >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    for (ci, class) in manifest.classes.iter().enumerate() {
        let train_ids: Vec<usize> = manifest
            .images
            .iter()
            .filter(|img| img.class == ci && img.fold == Fold::Train)
            .map(|img| img.embed_id)
            .collect();
        if train_ids.len() < k {
            return Err(Error::Data(format!(
                "class '{}' has {} train images, cannot sample k={k}",
                class.name,
                train_ids.len()
            )));
        }
        for idx in rand::seq::index::sample(&mut rng, train_ids.len(), k) {
            keep.insert(train_ids[idx]);
        }
    }
    let images: Vec<ImageRecord> = manifest
        .images
        .iter()
        .filter(|img| img.fold == Fold::Test || keep.contains(&img.embed_id))
        .cloned()
        .collect();
    let surviving: BTreeSet<usize> = images.iter().map(|img| img.embed_id).collect();
    let captions = manifest
        .captions
        .iter()
        .filter(|(id, _)| surviving.contains(id))
        .map(|(id, caps)| (*id, caps.clone()))
        .collect();
    Ok(DatasetManifest {
        classes: manifest.classes.clone(),
        images,
        captions,
    })
}
