//! Dataset manifests, vocabulary, synthetic generation, identity unification and batch sampling.

pub mod dataset;
pub mod manifest;
pub mod sampler;
pub mod synthetic;
pub mod unify;
pub mod vocab;

pub use dataset::{LoadedDataset, LoadedImage, TrainingData};
pub use manifest::{DatasetManifest, DatasetModality, ManifestEntry, ManifestMeta, Split};
pub use sampler::{JointBatch, JointSampler, SamplerConfig, SamplerState};
pub use synthetic::{generate_synthetic, GeneratedData, SyntheticSpec};
pub use unify::{unify_identities, Correspondence, IdentityMap};
pub use vocab::{OovPolicy, Vocabulary};
