//! Joint batch sampling: uniform image-caption pairs plus a PK-structured image-only half.

use std::collections::BTreeMap;

use candle_core::Device;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pixels_from_rgb, ImageBatch, ImageSource};
use crate::data::dataset::TrainingData;
use crate::data::manifest::Split;
use crate::error::{Error, Result};
use crate::objectives::BatchViews;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Image-caption pairs per batch.
    pub t2i_batch: usize,
    /// Image-only samples per batch; a multiple of `instances`.
    pub i2i_batch: usize,
    /// Images per identity in the image-only half.
    pub instances: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            t2i_batch: 64,
            i2i_batch: 64,
            instances: 4,
        }
    }
}

impl SamplerConfig {
    pub fn identities_per_batch(&self) -> usize {
        self.i2i_batch / self.instances.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t2i_batch == 0 {
            return Err(Error::Config("t2i_batch must be positive".into()));
        }
        if self.instances < 2
            || self.i2i_batch % self.instances != 0
            || self.identities_per_batch() < 2
        {
            return Err(Error::Config(format!(
                "i2i_batch {} must hold at least 2 identities of {} (>= 2) instances each",
                self.i2i_batch, self.instances
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct JointBatch {
    /// T2I samples first, then the I2I samples.
    pub images: ImageBatch,
    /// One token sequence per T2I sample, in `views.t2i` order.
    pub captions: Vec<Vec<u32>>,
    pub views: BatchViews,
    pub warnings: Vec<String>,
}

/// Resumable sampler state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub word_pos: u128,
    /// T2I training images not yet drawn in the current pass.
    pub queue: Vec<usize>,
}

pub struct JointSampler {
    cfg: SamplerConfig,
    seed: u64,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    t2i_train: Vec<usize>,
    /// label -> image indices of the I2I training split
    i2i_by_label: BTreeMap<usize, Vec<usize>>,
}

impl JointSampler {
    pub fn new(cfg: SamplerConfig, data: &TrainingData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let t2i_train = data.t2i.indices_in(Split::Train);
        if t2i_train.is_empty() {
            return Err(Error::Data(format!(
                "{} has no training images",
                data.t2i.name
            )));
        }
        let mut i2i_by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in data.i2i.indices_in(Split::Train) {
            let label = data.i2i.images[i]
                .label
                .ok_or_else(|| Error::Data("training image without unified label".into()))?;
            i2i_by_label.entry(label).or_default().push(i);
        }
        if i2i_by_label.len() < cfg.identities_per_batch() {
            return Err(Error::Config(format!(
                "{} has {} training identities, a batch needs {}",
                data.i2i.name,
                i2i_by_label.len(),
                cfg.identities_per_batch()
            )));
        }
        Ok(Self {
            cfg,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
            t2i_train,
            i2i_by_label,
        })
    }

    /// Batches per pass over the T2I training images.
    pub fn steps_per_epoch(&self) -> usize {
        self.t2i_train.len().div_ceil(self.cfg.t2i_batch)
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
            queue: self.queue.clone(),
        }
    }

    pub fn restore(&mut self, state: &SamplerState) {
        self.seed = state.seed;
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(state.word_pos);
        self.queue = state.queue.clone();
    }

    fn next_t2i(&mut self) -> usize {
        if self.queue.is_empty() {
            self.queue = self.t2i_train.clone();
            self.queue.shuffle(&mut self.rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("refilled above")
    }

    pub fn next_batch(&mut self, data: &TrainingData, device: &Device) -> Result<JointBatch> {
        let bt = self.cfg.t2i_batch;
        let mut pixels: Vec<&[u8]> = Vec::new();
        let (mut labels, mut cameras, mut source, mut captions) = (vec![], vec![], vec![], vec![]);
        let mut warnings = Vec::new();

        for _ in 0..bt {
            let img = &data.t2i.images[self.next_t2i()];
            let caption = img
                .captions
                .choose(&mut self.rng)
                .ok_or_else(|| Error::Data("training image without caption".into()))?;
            pixels.push(&img.pixels);
            labels.push(img.label.expect("training split is labeled"));
            cameras.push(img.camera);
            source.push(ImageSource::T2iPaired);
            captions.push(caption.clone());
        }

        let ids: Vec<usize> = self.i2i_by_label.keys().copied().collect();
        let chosen: Vec<usize> = ids
            .choose_multiple(&mut self.rng, self.cfg.identities_per_batch())
            .copied()
            .collect();
        for label in chosen {
            let pool = &self.i2i_by_label[&label];
            let picks: Vec<usize> = if pool.len() >= self.cfg.instances {
                pool.choose_multiple(&mut self.rng, self.cfg.instances)
                    .copied()
                    .collect()
            } else {
                let msg = format!(
                    "identity {label} has {} images, sampling {} with replacement",
                    pool.len(),
                    self.cfg.instances
                );
                log::warn!("{msg}");
                warnings.push(msg);
                (0..self.cfg.instances)
                    .map(|_| pool[self.rng.random_range(0..pool.len())])
                    .collect()
            };
            for i in picks {
                let img = &data.i2i.images[i];
                pixels.push(&img.pixels);
                labels.push(label);
                cameras.push(img.camera);
                source.push(ImageSource::I2iOnly);
            }
        }

        let n = labels.len();
        let [h, w] = data.t2i.image_size;
        let images = ImageBatch {
            pixels: pixels_from_rgb(&pixels, h, w, device)?,
            identity: labels.clone(),
            camera: cameras.clone(),
            source,
        };
        let views = BatchViews::new(labels, cameras, (0..bt).collect(), (bt..n).collect())?;
        Ok(JointBatch {
            images,
            captions,
            views,
            warnings,
        })
    }
}
