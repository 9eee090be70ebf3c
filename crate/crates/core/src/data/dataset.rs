//! Decoded, tokenized and label-unified datasets held in memory.

use std::path::Path;

use crate::data::manifest::{check_no_leakage, DatasetManifest, DatasetModality, Split};
use crate::data::unify::{unify_identities, Correspondence, IdentityMap};
use crate::data::vocab::{OovPolicy, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LoadedImage {
    /// Interleaved HWC RGB.
    pub pixels: Vec<u8>,
    pub raw_identity: u64,
    /// Unified training label; `None` outside the training split.
    pub label: Option<usize>,
    pub camera: usize,
    pub split: Split,
    /// Token ids, one sequence per caption.
    pub captions: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub name: String,
    pub modality: DatasetModality,
    /// `[height, width]`
    pub image_size: [usize; 2],
    pub images: Vec<LoadedImage>,
}

impl LoadedDataset {
    pub fn load(
        manifest: &DatasetManifest,
        labels: &[Option<usize>],
        vocab: &Vocabulary,
        max_text_len: usize,
    ) -> Result<Self> {
        let [h, w] = manifest.meta.image_size;
        let mut images = Vec::with_capacity(manifest.entries.len());
        for (e, &label) in manifest.entries.iter().zip(labels) {
            let path = manifest.resolve(e);
            let img = image::open(&path)?.to_rgb8();
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(Error::Data(format!(
                    "{} is {}x{}, manifest declares {h}x{w}",
                    path.display(),
                    img.height(),
                    img.width()
                )));
            }
            let oov = match e.split {
                Split::Train => OovPolicy::Reject,
                _ => OovPolicy::Pad,
            };
            let captions = e
                .captions
                .iter()
                .map(|c| vocab.tokenize(c, max_text_len, oov))
                .collect::<Result<_>>()?;
            images.push(LoadedImage {
                pixels: img.into_raw(),
                raw_identity: e.identity,
                label,
                camera: e.camera as usize,
                split: e.split,
                captions,
            });
        }
        Ok(Self {
            name: manifest.meta.name.clone(),
            modality: manifest.meta.modality,
            image_size: [h, w],
            images,
        })
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].split == split)
            .collect()
    }
}

/// One T2I and one I2I dataset sharing a vocabulary and a unified label space.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub t2i: LoadedDataset,
    pub i2i: LoadedDataset,
    pub vocab: Vocabulary,
    pub identities: IdentityMap,
}

impl TrainingData {
    pub fn num_identities(&self) -> usize {
        self.identities.num_identities()
    }

    /// Builds the vocabulary from T2I training captions unless one is supplied
    /// (a checkpoint's vocabulary must be reused as is).
    pub fn prepare(
        t2i: &DatasetManifest,
        i2i: &DatasetManifest,
        correspondences: &[Correspondence],
        max_text_len: usize,
        vocab: Option<Vocabulary>,
    ) -> Result<Self> {
        if t2i.meta.modality != DatasetModality::T2i || i2i.meta.modality != DatasetModality::I2i {
            return Err(Error::Data(
                "expected one t2i and one i2i manifest, in that order".into(),
            ));
        }
        if t2i.meta.image_size != i2i.meta.image_size {
            return Err(Error::Data(format!(
                "image sizes differ: {:?} vs {:?}",
                t2i.meta.image_size, i2i.meta.image_size
            )));
        }
        check_no_leakage(&[t2i, i2i])?;
        let identities = unify_identities(&[t2i, i2i], correspondences)?;
        let vocab = vocab.unwrap_or_else(|| {
            Vocabulary::build(
                t2i.entries_in(Split::Train)
                    .flat_map(|e| e.captions.iter().map(String::as_str)),
            )
        });
        let t2i_set = LoadedDataset::load(t2i, &identities.remap(0, t2i), &vocab, max_text_len)?;
        let i2i_set = LoadedDataset::load(i2i, &identities.remap(1, i2i), &vocab, max_text_len)?;
        Ok(Self {
            t2i: t2i_set,
            i2i: i2i_set,
            vocab,
            identities,
        })
    }

    pub fn from_paths(
        t2i: &Path,
        i2i: &Path,
        correspondences: &[Correspondence],
        max_text_len: usize,
    ) -> Result<Self> {
        let (a, b) = (DatasetManifest::load(t2i)?, DatasetManifest::load(i2i)?);
        Self::prepare(&a, &b, correspondences, max_text_len, None)
    }
}
