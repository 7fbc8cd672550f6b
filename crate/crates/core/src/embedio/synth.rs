//! Planted synthetic benchmark generator.
//!
//! Emulates a frozen dual-encoder's embedding space at desk scale: per-class
//! unit centroids on the image side, a shared near-identity rotation mapping
//! them to the text side, prompt sets with a controlled mix of relevant /
//! redundant / irrelevant members, biased templates, and per-image captions.
//! Everything is deterministic in the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::embedio::bank::{BankDtype, EmbeddingBank};
use crate::embedio::dataset::Dataset;
use crate::embedio::manifest::{
    ClassRecord, DatasetManifest, Fold, ImageRecord, NoiseTag, PromptSet, Split,
};
use crate::error::{Error, Result};

fn default_classes() -> usize {
    20
}
fn default_dim() -> usize {
    64
}
fn default_images_per_class() -> usize {
    32
}
fn default_prompts_per_class() -> usize {
    30
}
fn default_fractions() -> [f64; 3] {
    [0.4, 0.3, 0.3]
}
fn default_image_noise() -> f64 {
    0.15
}
fn default_prompt_noise() -> f64 {
    0.15
}
fn default_modality_offset() -> f64 {
    0.6
}
fn default_captions_per_image() -> usize {
    5
}
fn default_dtype() -> BankDtype {
    BankDtype::F32
}

/// Generator knobs. Only `seed` is mandatory when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_images_per_class")]
    pub images_per_class: usize,
    #[serde(default = "default_prompts_per_class")]
    pub prompts_per_class: usize,
    /// Relevant / redundant / irrelevant shares of each prompt set.
    #[serde(default = "default_fractions")]
    pub prompt_fractions: [f64; 3],
    /// Per-coordinate gaussian noise added to centroids before normalizing.
    #[serde(default = "default_image_noise")]
    pub image_noise: f64,
    /// Per-coordinate gaussian noise on relevant prompts and captions.
    #[serde(default = "default_prompt_noise")]
    pub prompt_noise: f64,
    /// Strength of the image-to-text rotation and of the shared template bias.
    #[serde(default = "default_modality_offset")]
    pub modality_offset: f64,
    #[serde(default = "default_captions_per_image")]
    pub captions_per_image: usize,
    #[serde(default = "default_dtype")]
    pub dtype: BankDtype,
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        SynthConfig {
            seed,
            classes: default_classes(),
            dim: default_dim(),
            images_per_class: default_images_per_class(),
            prompts_per_class: default_prompts_per_class(),
            prompt_fractions: default_fractions(),
            image_noise: default_image_noise(),
            prompt_noise: default_prompt_noise(),
            modality_offset: default_modality_offset(),
            captions_per_image: default_captions_per_image(),
            dtype: default_dtype(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.dim < 8 {
            return Err(Error::Config(format!("dim must be >= 8, got {}", self.dim)));
        }
        if self.images_per_class < 2 {
            return Err(Error::Config(format!(
                "images_per_class must be >= 2, got {}",
                self.images_per_class
            )));
        }
        if self.prompts_per_class == 0 {
            return Err(Error::Config("prompts_per_class must be >= 1".into()));
        }
        let sum: f64 = self.prompt_fractions.iter().sum();
        if self.prompt_fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "prompt_fractions must be nonnegative and sum to 1, got {:?}",
                self.prompt_fractions
            )));
        }
        for (name, v) in [
            ("image_noise", self.image_noise),
            ("prompt_noise", self.prompt_noise),
            ("modality_offset", self.modality_offset),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Prompt-set composition after rounding: (relevant, redundant, irrelevant).
    pub fn prompt_counts(&self) -> (usize, usize, usize) {
        let n = self.prompts_per_class;
        let n_rel = ((n as f64) * self.prompt_fractions[0]).round() as usize;
        let n_rel = n_rel.min(n);
        let n_red = (((n as f64) * self.prompt_fractions[1]).round() as usize).min(n - n_rel);
        (n_rel, n_red, n - n_rel - n_red)
    }
}

/// Generated dataset plus the planted ground truth kept out of the manifest.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// Per-class image-side centroids, `classes x dim`.
    pub centroids: Tensor,
    /// Image-to-text rotation, `dim x dim`, orthonormal columns.
    pub rotation: Tensor,
}

fn gaussian_vec(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Norm("cannot normalize a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn random_unit(rng: &mut ChaCha20Rng, d: usize) -> Result<Vec<f64>> {
    normalize(gaussian_vec(rng, d))
}

fn add_scaled(base: &[f64], noise: &[f64], scale: f64) -> Vec<f64> {
    base.iter().zip(noise).map(|(b, n)| b + scale * n).collect()
}

/// Columns of `I + scale * G` orthonormalized by modified Gram-Schmidt: a
/// rotation close to the identity, so image- and text-side class directions
/// stay positively aligned while the two modalities remain distinct.
fn near_identity_rotation(rng: &mut ChaCha20Rng, d: usize, scale: f64) -> Result<Tensor> {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut c = gaussian_vec(rng, d);
            let s = scale / (d as f64).sqrt();
            c.iter_mut().for_each(|x| *x *= s);
            c[j] += 1.0;
            c
        })
        .collect();
    for j in 0..d {
        for i in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
            let prev = cols[i].clone();
            cols[j]
                .iter_mut()
                .zip(&prev)
                .for_each(|(a, b)| *a -= dot * b);
        }
        cols[j] = normalize(std::mem::take(&mut cols[j]))
            .map_err(|_| Error::Norm("rotation basis collapsed during orthonormalization".into()))?;
    }
    let mut rot = Tensor::zeros(d, d);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            rot.set(i, j, col[i]);
        }
    }
    Ok(rot)
}

fn rotate(rot: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = rot.rows();
    let mut out = vec![0.0; d];
    for j in 0..d {
        let vj = v[j];
        if vj == 0.0 {
            continue;
        }
        for i in 0..d {
            out[i] += rot.get(i, j) * vj;
        }
    }
    out
}

/// Builds the full planted benchmark. Base split is the first half of the
/// classes (rounded up); within each class the first half of the images
/// (rounded up) form the train fold.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let c = cfg.classes;

    let rotation = near_identity_rotation(&mut rng, d, cfg.modality_offset)?;
    let template_bias = random_unit(&mut rng, d)?;

    let mut centroids = Tensor::zeros(c, d);
    let mut centroid_rows = Vec::with_capacity(c);
    for ci in 0..c {
        let row = random_unit(&mut rng, d)?;
        for (j, &v) in row.iter().enumerate() {
            centroids.set(ci, j, v);
        }
        centroid_rows.push(row);
    }

    let (n_rel, n_red, n_irr) = cfg.prompt_counts();
    let mut text_rows: Vec<Vec<f64>> = Vec::new();
    let mut classes: Vec<ClassRecord> = Vec::with_capacity(c);

    // Templates first: one biased text-side anchor per class.
    for row in &centroid_rows {
        let anchor = rotate(&rotation, row);
        text_rows.push(normalize(add_scaled(
            &anchor,
            &template_bias,
            cfg.modality_offset,
        ))?);
    }

    // Prompt sets, grouped per class after the templates.
    let base_classes = c.div_ceil(2);
    for (ci, row) in centroid_rows.iter().enumerate() {
        let anchor = rotate(&rotation, row);
        let mut ids = Vec::with_capacity(cfg.prompts_per_class);
        let mut mask = Vec::with_capacity(cfg.prompts_per_class);
        let mut relevant: Vec<Vec<f64>> = Vec::with_capacity(n_rel);
        for _ in 0..n_rel {
            let noise = gaussian_vec(&mut rng, d);
            let p = normalize(add_scaled(&anchor, &noise, cfg.prompt_noise))?;
            relevant.push(p.clone());
            ids.push(text_rows.len());
            text_rows.push(p);
            mask.push(NoiseTag::Relevant);
        }
        for i in 0..n_red {
            let src = if relevant.is_empty() {
                &anchor
            } else {
                &relevant[i % relevant.len()]
            };
            let noise = gaussian_vec(&mut rng, d);
            let p = normalize(add_scaled(src, &noise, 0.1 * cfg.prompt_noise))?;
            ids.push(text_rows.len());
            text_rows.push(p);
            mask.push(NoiseTag::Redundant);
        }
        for _ in 0..n_irr {
            ids.push(text_rows.len());
            text_rows.push(random_unit(&mut rng, d)?);
            mask.push(NoiseTag::Irrelevant);
        }
        classes.push(ClassRecord {
            name: format!("class_{ci:03}"),
            template_id: ci,
            prompt_ids: PromptSet(ids),
            noise_mask: Some(mask),
        });
    }

    // Images, then their captions (captions live on the text side).
    let mut image_rows: Vec<Vec<f64>> = Vec::new();
    let mut images: Vec<ImageRecord> = Vec::new();
    let mut captions = std::collections::BTreeMap::new();
    let train_per_class = cfg.images_per_class.div_ceil(2);
    for (ci, row) in centroid_rows.iter().enumerate() {
        let split = if ci < base_classes {
            Split::Base
        } else {
            Split::New
        };
        for k in 0..cfg.images_per_class {
            let noise = gaussian_vec(&mut rng, d);
            let x = normalize(add_scaled(row, &noise, cfg.image_noise))?;
            let embed_id = image_rows.len();
            if cfg.captions_per_image > 0 {
                let anchor = rotate(&rotation, &x);
                let mut cap_ids = Vec::with_capacity(cfg.captions_per_image);
                for _ in 0..cfg.captions_per_image {
                    let cn = gaussian_vec(&mut rng, d);
                    cap_ids.push(text_rows.len());
                    text_rows.push(normalize(add_scaled(&anchor, &cn, cfg.prompt_noise))?);
                }
                captions.insert(embed_id, cap_ids);
            }
            image_rows.push(x);
            images.push(ImageRecord {
                embed_id,
                class: ci,
                split,
                fold: if k < train_per_class {
                    Fold::Train
                } else {
                    Fold::Test
                },
            });
        }
    }

    let manifest = DatasetManifest {
        classes,
        images,
        captions,
    };
    let dataset = Dataset::new(
        manifest,
        EmbeddingBank::from_rows(&image_rows, cfg.dtype)?,
        EmbeddingBank::from_rows(&text_rows, cfg.dtype)?,
    )?;
    Ok(SynthOutput {
        dataset,
        centroids,
        rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            classes: 6,
            dim: 16,
            images_per_class: 6,
            prompts_per_class: 10,
            captions_per_image: 2,
            dtype: BankDtype::F64,
            ..SynthConfig::with_seed(seed)
        }
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate(&small_cfg(7)).unwrap();
        let b = generate(&small_cfg(7)).unwrap();
        assert_eq!(a.dataset.manifest, b.dataset.manifest);
        assert_eq!(a.dataset.images, b.dataset.images);
        assert_eq!(a.dataset.text, b.dataset.text);
        assert_eq!(a.centroids.data(), b.centroids.data());
        let c = generate(&small_cfg(8)).unwrap();
        assert_ne!(a.dataset.images, c.dataset.images);
    }

    #[test]
    fn output_validates_and_counts_line_up() {
        let cfg = small_cfg(3);
        let out = generate(&cfg).unwrap();
        let m = &out.dataset.manifest;
        assert_eq!(m.classes.len(), cfg.classes);
        assert_eq!(m.images.len(), cfg.classes * cfg.images_per_class);
        assert_eq!(
            out.dataset.text.count(),
            cfg.classes * (1 + cfg.prompts_per_class)
                + m.images.len() * cfg.captions_per_image
        );
        // Base split holds the first half of the classes, rounded up.
        let base = m.images.iter().filter(|i| i.split == Split::Base).count();
        assert_eq!(base, 3 * cfg.images_per_class);
        // Train fold holds the first half of each class's images.
        for ci in 0..cfg.classes {
            let train = m
                .images
                .iter()
                .filter(|i| i.class == ci && i.fold == Fold::Train)
                .count();
            assert_eq!(train, 3);
        }
        let (n_rel, n_red, n_irr) = cfg.prompt_counts();
        assert_eq!((n_rel, n_red, n_irr), (4, 3, 3));
        for class in &m.classes {
            let mask = class.noise_mask.as_ref().unwrap();
            let rel = mask.iter().filter(|t| **t == NoiseTag::Relevant).count();
            let red = mask.iter().filter(|t| **t == NoiseTag::Redundant).count();
            assert_eq!((rel, red), (n_rel, n_red));
        }
    }

    #[test]
    fn all_embeddings_are_unit_norm() {
        let out = generate(&small_cfg(11)).unwrap();
        for bank in [&out.dataset.images, &out.dataset.text] {
            for id in 0..bank.count() {
                let row = bank.row(id).unwrap();
                let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "row {id} norm {norm}");
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal_and_near_identity() {
        let out = generate(&small_cfg(5)).unwrap();
        let r = &out.rotation;
        let d = r.rows();
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| r.get(k, i) * r.get(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "col {i}.col {j} = {dot}");
            }
            // Near identity: each column keeps most of its mass on the diagonal.
            assert!(r.get(i, i) > 0.5, "diagonal {i} = {}", r.get(i, i));
        }
    }

    #[test]
    fn nearest_planted_centroid_recovers_labels() {
        let cfg = SynthConfig {
            image_noise: 0.1,
            ..small_cfg(2)
        };
        let out = generate(&cfg).unwrap();
        let mut correct = 0usize;
        let total = out.dataset.manifest.images.len();
        for img in &out.dataset.manifest.images {
            let x = out.dataset.images.row(img.embed_id).unwrap();
            let best = (0..cfg.classes)
                .max_by(|&a, &b| {
                    let ca = cos(&x, out.centroids.row_slice(a));
                    let cb = cos(&x, out.centroids.row_slice(b));
                    ca.partial_cmp(&cb).unwrap()
                })
                .unwrap();
            if best == img.class {
                correct += 1;
            }
        }
        assert!(
            correct as f64 >= 0.95 * total as f64,
            "nearest-centroid oracle got {correct}/{total}"
        );
    }

    #[test]
    fn noise_tags_reflect_geometry() {
        let cfg = small_cfg(4);
        let out = generate(&cfg).unwrap();
        let rot = &out.rotation;
        for (ci, class) in out.dataset.manifest.classes.iter().enumerate() {
            let anchor = rotate(rot, out.centroids.row_slice(ci));
            let mask = class.noise_mask.as_ref().unwrap();
            let mut rel_cos = Vec::new();
            let mut irr_cos = Vec::new();
            for (&pid, tag) in class.prompt_ids.ids().iter().zip(mask) {
                let p = out.dataset.text.row(pid).unwrap();
                match tag {
                    NoiseTag::Relevant => rel_cos.push(cos(&p, &anchor)),
                    NoiseTag::Irrelevant => irr_cos.push(cos(&p, &anchor)),
                    NoiseTag::Redundant => {}
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(
                mean(&rel_cos) > mean(&irr_cos) + 0.3,
                "class {ci}: relevant {} vs irrelevant {}",
                mean(&rel_cos),
                mean(&irr_cos)
            );
        }
    }

    #[test]
    fn modalities_are_offset_but_aligned() {
        let out = generate(&small_cfg(9)).unwrap();
        // Captions sit near the rotated image, so image->caption cosine is
        // high, yet the raw (unrotated) pair differs: a real gap exists.
        let m = &out.dataset.manifest;
        let mut same = Vec::new();
        for img in m.images.iter().take(10) {
            let x = out.dataset.images.row(img.embed_id).unwrap();
            let anchor = rotate(&out.rotation, &x);
            for &cid in &m.captions[&img.embed_id] {
                let cap = out.dataset.text.row(cid).unwrap();
                same.push((cos(&cap, &anchor), cos(&cap, &x)));
            }
        }
        let mean_rot = same.iter().map(|p| p.0).sum::<f64>() / same.len() as f64;
        let mean_raw = same.iter().map(|p| p.1).sum::<f64>() / same.len() as f64;
        assert!(mean_rot > 0.85, "rotated alignment {mean_rot}");
        assert!(mean_raw < mean_rot - 0.05, "gap collapsed: {mean_raw} vs {mean_rot}");
        assert!(mean_raw > 0.2, "modalities must stay positively aligned");
    }

    #[test]
    fn config_validation_names_the_offending_field() {
        let mut cfg = small_cfg(0);
        cfg.classes = 1;
        assert!(matches!(generate(&cfg), Err(Error::Config(msg)) if msg.contains("classes")));
        let mut cfg = small_cfg(0);
        cfg.prompt_fractions = [0.9, 0.3, 0.3];
        assert!(
            matches!(generate(&cfg), Err(Error::Config(msg)) if msg.contains("prompt_fractions"))
        );
        let mut cfg = small_cfg(0);
        cfg.dim = 4;
        assert!(matches!(generate(&cfg), Err(Error::Config(msg)) if msg.contains("dim")));
        let mut cfg = small_cfg(0);
        cfg.image_noise = -0.1;
        assert!(matches!(generate(&cfg), Err(Error::Config(msg)) if msg.contains("image_noise")));
    }

    #[test]
    fn seed_only_json_uses_documented_defaults() {
        let cfg: SynthConfig = serde_json::from_str(r#"{"seed": 42}"#).unwrap();
        assert_eq!(cfg.classes, 20);
        assert_eq!(cfg.dim, 64);
        assert_eq!(cfg.images_per_class, 32);
        assert_eq!(cfg.prompts_per_class, 30);
        assert_eq!(cfg.prompt_fractions, [0.4, 0.3, 0.3]);
        assert_eq!(cfg.image_noise, 0.15);
        assert_eq!(cfg.prompt_noise, 0.15);
        assert_eq!(cfg.modality_offset, 0.6);
        assert_eq!(cfg.captions_per_image, 5);
        assert_eq!(cfg.dtype, BankDtype::F32);
        assert!(serde_json::from_str::<SynthConfig>("{}").is_err());
    }
}
