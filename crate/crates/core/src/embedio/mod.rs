//! Embedding I/O: binary banks, dataset manifests with leakage-checked
//! views, the on-disk bundle layout, and the planted benchmark generator.

pub mod bank;
pub mod dataset;
pub mod manifest;
pub mod synth;

pub use bank::{BankDtype, EmbeddingBank, BANK_MAGIC, BANK_VERSION};
pub use dataset::{Dataset, IMAGE_BANK_FILE, MANIFEST_FILE, TEXT_BANK_FILE};
pub use manifest::{
    base_new_split, kshot_sample, ClassRecord, DatasetManifest, DatasetView, Fold, ImageRecord,
    NoiseTag, PromptSet, Split,
};
pub use synth::{generate, SynthConfig, SynthOutput};
