//! On-disk dataset bundle: a manifest plus the image and text embedding
//! banks it indexes, stored as three files in one directory.

use std::fs;
use std::path::Path;

use crate::embedio::bank::EmbeddingBank;
use crate::embedio::manifest::DatasetManifest;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_BANK_FILE: &str = "images.aapb";
pub const TEXT_BANK_FILE: &str = "text.aapb";

/// A manifest together with the banks it references, validated on load.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: EmbeddingBank,
    pub text: EmbeddingBank,
}

impl Dataset {
    pub fn new(
        manifest: DatasetManifest,
        images: EmbeddingBank,
        text: EmbeddingBank,
    ) -> Result<Self> {
        if images.dim() != text.dim() {
            return Err(Error::Data(format!(
                "image bank dim {} != text bank dim {}",
                images.dim(),
                text.dim()
            )));
        }
        manifest.validate(images.count(), text.count())?;
        Ok(Dataset {
            manifest,
            images,
            text,
        })
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.manifest.save(&dir.join(MANIFEST_FILE))?;
        self.images.write_bank_file(&dir.join(IMAGE_BANK_FILE))?;
        self.text.write_bank_file(&dir.join(TEXT_BANK_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        let images = EmbeddingBank::read_bank_file(&dir.join(IMAGE_BANK_FILE))?;
        let text = EmbeddingBank::read_bank_file(&dir.join(TEXT_BANK_FILE))?;
        Dataset::new(manifest, images, text)
    }
}
