//! Run configuration: one TOML document drives generation, training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::data::{Correspondence, SamplerConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::train::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding (or receiving) `synthetic_t2i/` and `synthetic_i2i/`.
    pub root: PathBuf,
    /// Explicit manifest paths; default to the synthetic layout under `root`.
    pub t2i_manifest: Option<PathBuf>,
    pub i2i_manifest: Option<PathBuf>,
    pub correspondences: Vec<Correspondence>,
    pub synthetic: SyntheticSpec,
    pub sampler: SamplerConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            t2i_manifest: None,
            i2i_manifest: None,
            correspondences: Vec::new(),
            synthetic: SyntheticSpec::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn t2i_path(&self) -> PathBuf {
        self.t2i_manifest
            .clone()
            .unwrap_or_else(|| self.root.join("synthetic_t2i").join("manifest.json"))
    }

    pub fn i2i_path(&self) -> PathBuf {
        self.i2i_manifest
            .clone()
            .unwrap_or_else(|| self.root.join("synthetic_i2i").join("manifest.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr_inversion: f64,
    pub lr_prompts: f64,
    pub lr_decay_per_epoch: f64,
    pub optimizer: AdamConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_inversion: 5e-5,
            lr_prompts: 0.02,
            lr_decay_per_epoch: 0.8,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    /// Peak rate reached at the end of warmup.
    pub lr: f64,
    pub min_lr: f64,
    /// Multiplier on the schedule for the classifier heads and temperature.
    pub head_lr_scale: f64,
    /// Steps between recomputations of the identity-prompt embeddings (0 disables the audit).
    pub prompt_audit_every: usize,
    pub optimizer: AdamConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 5,
            warmup_start_lr: 1e-6,
            lr: 1e-5,
            min_lr: 1e-7,
            head_lr_scale: 1.0,
            prompt_audit_every: 50,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Dual class tokens; off means one token serves both tasks.
    pub enable_trt: bool,
    /// Stage I plus the identity and instance prompt losses in Stage II.
    pub enable_hpl: bool,
    pub enable_cmpr: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enable_trt: true,
            enable_hpl: true,
            enable_cmpr: true,
        }
    }
}

impl AblationConfig {
    /// The four cumulative rows: baseline, +TRT, +HPL, +CMPR.
    pub fn grid() -> [(&'static str, Self); 4] {
        let row = |t, h, c| Self {
            enable_trt: t,
            enable_hpl: h,
            enable_cmpr: c,
        };
        [
            ("baseline", row(false, false, false)),
            ("trt", row(true, false, false)),
            ("trt_hpl", row(true, true, false)),
            ("trt_hpl_cmpr", row(true, true, true)),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSelection {
    I2i,
    T2i,
    Both,
}

impl TaskSelection {
    pub fn includes_i2i(self) -> bool {
        matches!(self, Self::I2i | Self::Both)
    }

    pub fn includes_t2i(self) -> bool {
        matches!(self, Self::T2i | Self::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub task: TaskSelection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            task: TaskSelection::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; data, init and sampler streams are derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub loss: LossWeights,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            loss: LossWeights::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Named substream seed derived from the root seed.
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub const DESK_PRESET: &str = include_str!("../configs/desk.toml");

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The shipped small-scale preset.
    pub fn desk() -> Self {
        Self::from_toml(DESK_PRESET).expect("bundled preset parses")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.sampler.validate()?;
        self.data.synthetic.validate()?;
        if self.ablation.enable_cmpr && !self.ablation.enable_hpl {
            return Err(Error::Config(
                "enable_cmpr requires enable_hpl (the regularizer needs the inversion networks)"
                    .into(),
            ));
        }
        let s1 = &self.stage1;
        if s1.lr_inversion <= 0.0 || s1.lr_prompts <= 0.0 || s1.lr_decay_per_epoch <= 0.0 {
            return Err(Error::Config("stage1 rates must be positive".into()));
        }
        let s2 = &self.stage2;
        if s2.warmup_start_lr <= 0.0 || s2.lr <= 0.0 || s2.min_lr <= 0.0 || s2.head_lr_scale <= 0.0
        {
            return Err(Error::Config("stage2 rates must be positive".into()));
        }
        if s2.epochs > 0 && s2.warmup_epochs >= s2.epochs {
            return Err(Error::Config(format!(
                "stage2 warmup_epochs {} must be below epochs {}",
                s2.warmup_epochs, s2.epochs
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration after applying the ablation switches.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            dual_class_tokens: self.ablation.enable_trt,
            ..self.model.clone()
        }
    }

    /// Hash over everything that shapes training (output location excluded).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        c.eval = EvalConfig::default();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&c)?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn data_seed(&self) -> u64 {
        substream(self.seed, "data")
    }

    pub fn init_seed(&self) -> u64 {
        substream(self.seed, "init")
    }

    pub fn sampler_seed(&self, stage: u8) -> u64 {
        substream(self.seed, &format!("sampler{stage}"))
    }

    /// Generator settings with the seed taken from the data substream.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.data_seed(),
            image_size: [self.model.image_height, self.model.image_width],
            ..self.data.synthetic.clone()
        }
    }
}
