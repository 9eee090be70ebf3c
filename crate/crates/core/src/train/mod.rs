//! Two-stage optimization: prompt construction, then representation learning.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelConfig;
use crate::config::RunConfig;
use crate::data::{JointSampler, TrainingData};
use crate::error::{Error, Result};
use crate::model::{stage1_trainable, stage2_trainable, HplModel, PromptTerms};
use crate::objectives::{scalar, stage1_objective, stage2_objective};
use crate::params::{GroupSet, ParamGroup, Params};
use crate::prompt::TemplateWords;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, EpochMetrics};
pub use optim::{Adam, AdamConfig, Slot};
pub use schedule::{lr_at, LrSchedule};

pub const STAGE1_TERMS: [&str; 4] = ["construct", "t2i", "i2t", "ic"];
pub const STAGE2_TERMS: [&str; 8] = [
    "total", "sdm", "id_t2i", "triplet", "id_i2i", "cic", "ilpa", "cmpr",
];

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Loss terms in the stage's fixed order; the first is the optimized total.
    pub losses: Vec<(String, f64)>,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        self.losses[0].1
    }
}

/// Model configuration with data-dependent sizes filled in.
pub fn resolve_model_config(cfg: &RunConfig, data: &TrainingData) -> Result<ModelConfig> {
    let m = ModelConfig {
        vocab_size: data.vocab.len(),
        num_identities: data.num_identities(),
        ..cfg.effective_model()
    };
    if data.t2i.image_size != [m.image_height, m.image_width] {
        return Err(Error::Config(format!(
            "dataset images are {:?}, model expects {}x{}",
            data.t2i.image_size, m.image_height, m.image_width
        )));
    }
    m.validate()?;
    Ok(m)
}

/// Groups whose parameters received a nonzero gradient.
pub fn groups_with_gradient(params: &Params, grads: &GradStore) -> Result<GroupSet> {
    let mut out = GroupSet::new();
    for (name, var) in params.all_vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            let mag = scalar(&g.abs()?.sum_all()?)?;
            if mag > 0.0 {
                if let Some(group) = ParamGroup::of(&name) {
                    out.insert(group);
                }
            }
        }
    }
    Ok(out)
}

/// One stage of training over shared data.
pub struct Session<'d> {
    pub cfg: RunConfig,
    pub stage: u8,
    pub data: &'d TrainingData,
    pub params: Params,
    pub model_cfg: ModelConfig,
    words: Option<TemplateWords>,
    model: HplModel,
    trainable: GroupSet,
    sampler: JointSampler,
    adam: Adam,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    bank: Option<Tensor>,
    /// Groups that received gradient on the first step of this session.
    pub gradient_groups: Option<GroupSet>,
    device: Device,
}

impl<'d> Session<'d> {
    fn assemble(
        cfg: &RunConfig,
        data: &'d TrainingData,
        stage: u8,
        params: Params,
        model_cfg: ModelConfig,
        words: Option<TemplateWords>,
    ) -> Result<Self> {
        let trainable = match stage {
            1 => stage1_trainable(),
            _ => stage2_trainable(cfg.loss.learnable_temperature),
        };
        let model = HplModel::bind(
            &params,
            &trainable,
            &model_cfg,
            words.as_ref(),
            cfg.loss.temperature,
        )?;
        let sampler = JointSampler::new(cfg.data.sampler.clone(), data, cfg.sampler_seed(stage))?;
        let opt = match stage {
            1 => cfg.stage1.optimizer.clone(),
            _ => cfg.stage2.optimizer.clone(),
        };
        let device = params.device().clone();
        let mut s = Self {
            cfg: cfg.clone(),
            stage,
            data,
            params,
            model_cfg,
            words,
            model,
            trainable,
            sampler,
            adam: Adam::new(opt),
            step: 0,
            epoch: 0,
            history: Vec::new(),
            bank: None,
            gradient_groups: None,
            device,
        };
        s.refresh_bank()?;
        Ok(s)
    }

    fn fresh_params(
        cfg: &RunConfig,
        model_cfg: &ModelConfig,
        words: Option<&TemplateWords>,
    ) -> Result<Params> {
        let params = Params::new(Device::Cpu, DType::F32);
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(cfg.init_seed()));
        HplModel::initialize(&params, model_cfg, words, cfg.loss.temperature, &rng)?;
        Ok(params)
    }

    /// Prompt construction from freshly initialized weights.
    pub fn stage1(cfg: &RunConfig, data: &'d TrainingData) -> Result<Self> {
        if !cfg.ablation.enable_hpl {
            return Err(Error::Config(
                "prompt construction is disabled (enable_hpl = false)".into(),
            ));
        }
        let model_cfg = resolve_model_config(cfg, data)?;
        let words = data.vocab.template_words()?;
        let params = Self::fresh_params(cfg, &model_cfg, Some(&words))?;
        Self::assemble(cfg, data, 1, params, model_cfg, Some(words))
    }

    /// Representation learning. With prompts enabled the Stage I checkpoint supplies every weight.
    pub fn stage2(
        cfg: &RunConfig,
        data: &'d TrainingData,
        stage1: Option<&Checkpoint>,
    ) -> Result<Self> {
        let model_cfg = resolve_model_config(cfg, data)?;
        if !cfg.ablation.enable_hpl {
            let params = Self::fresh_params(cfg, &model_cfg, None)?;
            return Self::assemble(cfg, data, 2, params, model_cfg, None);
        }
        let ckpt =
            stage1.ok_or_else(|| Error::Config("stage II needs a Stage I checkpoint".into()))?;
        if ckpt.meta.stage != 1 {
            return Err(Error::Config(format!(
                "expected a Stage I checkpoint, got stage {}",
                ckpt.meta.stage
            )));
        }
        if ckpt.meta.vocab != data.vocab || ckpt.meta.model != model_cfg {
            return Err(Error::Config(
                "Stage I checkpoint does not match the data or model configuration".into(),
            ));
        }
        let words = data.vocab.template_words()?;
        let params = Self::fresh_params(cfg, &model_cfg, Some(&words))?;
        ckpt.restore_params(&params)?;
        Self::assemble(cfg, data, 2, params, model_cfg, Some(words))
    }

    /// Continues a session from a checkpoint written mid-stage.
    pub fn resume(cfg: &RunConfig, data: &'d TrainingData, ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        if meta.vocab != data.vocab {
            return Err(Error::Config(
                "checkpoint vocabulary differs from the data".into(),
            ));
        }
        let words = if meta.with_prompts {
            Some(data.vocab.template_words()?)
        } else {
            None
        };
        let params = Self::fresh_params(cfg, &meta.model, words.as_ref())?;
        ckpt.restore_params(&params)?;
        let mut s = Self::assemble(cfg, data, meta.stage, params, meta.model.clone(), words)?;
        s.adam.moments = ckpt.adam_moments();
        s.adam.step = meta.optimizer_step;
        s.sampler.restore(&meta.sampler);
        s.step = meta.step;
        s.epoch = meta.epoch;
        s.history = meta.history.clone();
        Ok(s)
    }

    pub fn model(&self) -> &HplModel {
        &self.model
    }

    pub fn trainable(&self) -> &GroupSet {
        &self.trainable
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.steps_per_epoch()
    }

    pub fn total_epochs(&self) -> usize {
        match self.stage {
            1 => self.cfg.stage1.epochs,
            _ => self.cfg.stage2.epochs,
        }
    }

    fn prompt_terms(&self) -> PromptTerms {
        PromptTerms {
            hpl: self.cfg.ablation.enable_hpl,
            cmpr: self.cfg.ablation.enable_cmpr,
        }
    }

    fn refresh_bank(&mut self) -> Result<()> {
        if self.stage == 2 && self.prompt_terms().hpl {
            self.bank = Some(self.model.identity_prompt_embeddings(64)?.detach());
        }
        Ok(())
    }

    /// Precomputed identity-prompt embeddings (Stage II with prompts only).
    pub fn bank_embeddings(&self) -> Option<&Tensor> {
        self.bank.as_ref()
    }

    fn schedule_for(&self, group: ParamGroup) -> LrSchedule {
        match self.stage {
            1 => {
                let s = &self.cfg.stage1;
                let base = match group {
                    ParamGroup::IdentityPrompts => s.lr_prompts,
                    _ => s.lr_inversion,
                };
                LrSchedule::Exponential {
                    base,
                    decay: s.lr_decay_per_epoch,
                }
            }
            _ => {
                let s = &self.cfg.stage2;
                let k = match group {
                    ParamGroup::Heads | ParamGroup::Temperature => s.head_lr_scale,
                    _ => 1.0,
                };
                LrSchedule::WarmupCosine {
                    start: s.warmup_start_lr * k,
                    peak: s.lr * k,
                    floor: s.min_lr * k,
                    warmup_epochs: s.warmup_epochs as f64,
                    total_epochs: s.epochs as f64,
                }
            }
        }
    }

    /// Fractional epoch position of the next step.
    pub fn epoch_position(&self) -> f64 {
        self.step as f64 / self.steps_per_epoch() as f64
    }

    /// Learning rate applied to `group` at the next step.
    pub fn current_lr(&self, group: ParamGroup) -> f64 {
        lr_at(self.epoch_position(), &self.schedule_for(group))
    }

    fn slots(&self) -> Vec<Slot> {
        let pos = self.epoch_position();
        self.params
            .vars_in(&self.trainable)
            .into_iter()
            .map(|(name, var)| {
                let group = ParamGroup::of(&name).expect("grouped at insertion");
                Slot {
                    lr: lr_at(pos, &self.schedule_for(group)),
                    decay: self.params.decays(&name),
                    name,
                    var,
                }
            })
            .collect()
    }

    /// Loss terms and the optimized total for one batch, without updating anything.
    fn forward(&mut self) -> Result<(Tensor, Vec<(String, f64)>)> {
        let batch = self.sampler.next_batch(self.data, &self.device)?;
        match self.stage {
            1 => {
                let parts = self.model.stage1_losses(&batch)?;
                let total = stage1_objective(&parts)?;
                let losses = vec![
                    ("construct".to_string(), scalar(&total)?),
                    ("t2i".to_string(), scalar(&parts.t2i)?),
                    ("i2t".to_string(), scalar(&parts.i2t)?),
                    ("ic".to_string(), scalar(&parts.ic)?),
                ];
                Ok((total, losses))
            }
            _ => {
                let parts = self.model.stage2_losses(
                    &batch,
                    self.bank.as_ref(),
                    self.prompt_terms(),
                    &self.cfg.loss,
                )?;
                let total = stage2_objective(&parts, &self.cfg.loss)?;
                let opt = |t: &Option<Tensor>| {
                    t.as_ref().map(scalar).transpose().map(|v| v.unwrap_or(0.0))
                };
                let losses = vec![
                    ("total".to_string(), scalar(&total)?),
                    ("sdm".to_string(), scalar(&parts.sdm)?),
                    ("id_t2i".to_string(), scalar(&parts.id_t2i)?),
                    ("triplet".to_string(), scalar(&parts.triplet)?),
                    ("id_i2i".to_string(), scalar(&parts.id_i2i)?),
                    ("cic".to_string(), opt(&parts.cic)?),
                    ("ilpa".to_string(), opt(&parts.ilpa)?),
                    ("cmpr".to_string(), opt(&parts.cmpr)?),
                ];
                Ok((total, losses))
            }
        }
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let (total, losses) = self.forward()?;
        if !losses[0].1.is_finite() {
            return Err(Error::numeric(
                format!("stage {} step {}", self.stage, self.step),
                format!("loss is {}", losses[0].1),
            ));
        }
        let grads = total.backward()?;
        let touched = groups_with_gradient(&self.params, &grads)?;
        if let Some(frozen) = touched.difference(&self.trainable).next() {
            panic!(
                "frozen parameter group {frozen:?} received a gradient in stage {}",
                self.stage
            );
        }
        if self.gradient_groups.is_none() {
            self.gradient_groups = Some(touched);
        }
        let slots = self.slots();
        let lr = slots.first().map(|s| s.lr).unwrap_or(0.0);
        let grad_norm = self.adam.update(&slots, &grads)?;
        self.step += 1;

        let every = self.cfg.stage2.prompt_audit_every as u64;
        if self.stage == 2 && every > 0 && self.step % every == 0 {
            self.audit_bank()?;
        }
        Ok(StepRecord {
            step: self.step,
            losses,
            lr,
            grad_norm,
        })
    }

    /// Recomputes the identity-prompt embeddings and compares them with the precomputed ones.
    pub fn audit_bank(&self) -> Result<f64> {
        let Some(bank) = &self.bank else {
            return Ok(0.0);
        };
        let fresh = self.model.identity_prompt_embeddings(64)?;
        let diff = scalar(&(fresh - bank)?.abs()?.max_all()?)?;
        if diff > 1e-6 {
            return Err(Error::numeric(
                "identity prompt embeddings",
                format!(
                    "recomputation deviates by {diff:e} after step {}",
                    self.step
                ),
            ));
        }
        Ok(diff)
    }

    /// Runs the remaining steps of the current epoch.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let per = self.steps_per_epoch() as u64;
        let lr = self.current_lr(match self.stage {
            1 => ParamGroup::IdentityPrompts,
            _ => ParamGroup::VisualEncoder,
        });
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut n = 0usize;
        while self.step < (self.epoch as u64 + 1) * per {
            let rec = self.step()?;
            if sums.is_empty() {
                sums = rec.losses.iter().map(|(k, _)| (k.clone(), 0.0)).collect();
            }
            for (s, (_, v)) in sums.iter_mut().zip(&rec.losses) {
                s.1 += v;
            }
            n += 1;
        }
        let m = EpochMetrics {
            stage: self.stage,
            epoch: self.epoch,
            steps: n,
            losses: sums
                .into_iter()
                .map(|(k, v)| (k, v / n.max(1) as f64))
                .collect(),
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "stage {} epoch {} loss {:.4} lr {:.2e} ({:.1}s)",
            self.stage,
            self.epoch,
            m.losses.first().map(|l| l.1).unwrap_or(f64::NAN),
            lr,
            m.wall_time_s
        );
        self.epoch += 1;
        self.history.push(m.clone());
        Ok(m)
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            format: checkpoint::FORMAT_VERSION,
            config: self.cfg.clone(),
            config_hash: self.cfg.hash()?,
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            optimizer_step: self.adam.step,
            sampler: self.sampler.state(),
            model: self.model_cfg.clone(),
            with_prompts: self.words.is_some(),
            vocab: self.data.vocab.clone(),
            history: self.history.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.meta()?, &self.params, Some(&self.adam))
    }

    /// Trains the remaining epochs, saving a checkpoint and the metrics CSV after each one.
    pub fn run(&mut self, dir: &Path) -> Result<()> {
        while self.epoch < self.total_epochs() {
            self.run_epoch()?;
            self.save(dir)?;
            write_metrics_csv(&dir.join("metrics.csv"), &self.history)?;
        }
        if self.history.is_empty() {
            self.save(dir)?;
        }
        Ok(())
    }
}

/// `epoch, <loss terms...>, lr, wall_time_s`
pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = history.first() {
        let mut header = vec!["epoch".to_string()];
        header.extend(first.losses.iter().map(|(k, _)| k.clone()));
        header.extend(["lr".to_string(), "wall_time_s".to_string()]);
        w.write_record(&header)?;
    }
    for m in history {
        let mut row = vec![m.epoch.to_string()];
        row.extend(m.losses.iter().map(|(_, v)| format!("{v:.6}")));
        row.extend([format!("{:.3e}", m.lr), format!("{:.3}", m.wall_time_s)]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn stage_dir(run_dir: &Path, stage: u8) -> PathBuf {
    run_dir.join(format!("stage{stage}"))
}

/// Runs Stage I into `<run_dir>/stage1`.
pub fn run_stage1(cfg: &RunConfig, data: &TrainingData, run_dir: &Path) -> Result<Checkpoint> {
    let dir = stage_dir(run_dir, 1);
    run_in(&dir, cfg, data, 1, || Session::stage1(cfg, data))
}

/// Trains into `dir`, continuing from a checkpoint already there (a finished
/// stage is returned as is).
fn run_in<'d>(
    dir: &Path,
    cfg: &RunConfig,
    data: &'d TrainingData,
    stage: u8,
    start: impl FnOnce() -> Result<Session<'d>>,
) -> Result<Checkpoint> {
    let mut s = if dir.join("metadata.json").exists() {
        let ckpt = load_checkpoint(dir, Some(cfg), false)?;
        if ckpt.meta.stage != stage {
            return Err(Error::Config(format!(
                "{} holds a stage {} checkpoint",
                dir.display(),
                ckpt.meta.stage
            )));
        }
        log::info!("resuming stage {stage} from epoch {}", ckpt.meta.epoch);
        Session::resume(cfg, data, &ckpt)?
    } else {
        start()?
    };
    s.run(dir)?;
    load_checkpoint(dir, Some(cfg), false)
}

/// Runs Stage II into `<run_dir>/stage2`, reading `<run_dir>/stage1` when prompts are enabled.
pub fn run_stage2(
    cfg: &RunConfig,
    data: &TrainingData,
    run_dir: &Path,
    allow_mismatch: bool,
) -> Result<Checkpoint> {
    let stage1 = if cfg.ablation.enable_hpl {
        let dir = stage_dir(run_dir, 1);
        if !dir.join("metadata.json").exists() {
            return Err(Error::Config(format!(
                "missing Stage I checkpoint at {}",
                dir.display()
            )));
        }
        Some(load_checkpoint(&dir, Some(cfg), allow_mismatch)?)
    } else {
        None
    };
    let dir = stage_dir(run_dir, 2);
    run_in(&dir, cfg, data, 2, || {
        Session::stage2(cfg, data, stage1.as_ref())
    })
}

/// Rebuilds the trained model from a checkpoint for inference.
pub fn model_from_checkpoint(
    ckpt: &Checkpoint,
    vocab: &crate::data::Vocabulary,
) -> Result<HplModel> {
    let meta = &ckpt.meta;
    let words = if meta.with_prompts {
        Some(vocab.template_words()?)
    } else {
        None
    };
    let params = Params::new(Device::Cpu, DType::F32);
    let rng = RefCell::new(ChaCha8Rng::seed_from_u64(0));
    HplModel::initialize(
        &params,
        &meta.model,
        words.as_ref(),
        meta.config.loss.temperature,
        &rng,
    )?;
    ckpt.restore_params(&params)?;
    HplModel::bind(
        &params,
        &GroupSet::new(),
        &meta.model,
        words.as_ref(),
        meta.config.loss.temperature,
    )
}
