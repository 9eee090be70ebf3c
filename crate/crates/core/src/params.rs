//! Named parameter storage with group-level freezing.
//!
//! Every learnable tensor lives in a [`Params`] table under a dotted name whose
//! first segment determines its [`ParamGroup`]. Model structs are built through
//! a [`ParamBuilder`], either creating fresh variables (`init`) or binding to the
//! existing ones (`bind`). When binding, tensors of groups outside the trainable
//! set are handed out detached, so no gradient can ever reach them.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisualEncoder,
    TextEncoder,
    PromptEncoder,
    IdentityPrompts,
    VisualInversion,
    TextInversion,
    Heads,
    Temperature,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::VisualEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::PromptEncoder,
        ParamGroup::IdentityPrompts,
        ParamGroup::VisualInversion,
        ParamGroup::TextInversion,
        ParamGroup::Heads,
        ParamGroup::Temperature,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::VisualEncoder => "visual",
            ParamGroup::TextEncoder => "text",
            ParamGroup::PromptEncoder => "prompt_encoder",
            ParamGroup::IdentityPrompts => "id_prompts",
            ParamGroup::VisualInversion => "inv_visual",
            ParamGroup::TextInversion => "inv_text",
            ParamGroup::Heads => "heads",
            ParamGroup::Temperature => "temperature",
        }
    }

    pub fn of(name: &str) -> Option<Self> {
        let head = name.split('.').next().unwrap_or(name);
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

pub type GroupSet = BTreeSet<ParamGroup>;

/// Initialization rule for a freshly created parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal truncated to two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    Const(f64),
}

#[derive(Debug)]
struct Entry {
    var: Var,
    decay: bool,
}

/// Owning table of every parameter of one model instance.
#[derive(Debug)]
pub struct Params {
    device: Device,
    dtype: DType,
    entries: RefCell<BTreeMap<String, Entry>>,
}

impl Params {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self {
            device,
            dtype,
            entries: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.borrow().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.entries.borrow().get(name).map(|e| e.var.clone())
    }

    /// Whether weight decay applies to this parameter.
    pub fn decays(&self, name: &str) -> bool {
        self.entries
            .borrow()
            .get(name)
            .map(|e| e.decay)
            .unwrap_or(false)
    }

    /// `(name, var)` pairs of every parameter belonging to one of `groups`.
    pub fn vars_in(&self, groups: &GroupSet) -> Vec<(String, Var)> {
        self.entries
            .borrow()
            .iter()
            .filter(|(name, _)| ParamGroup::of(name).is_some_and(|g| groups.contains(&g)))
            .map(|(name, e)| (name.clone(), e.var.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.entries
            .borrow()
            .iter()
            .map(|(name, e)| (name.clone(), e.var.clone()))
            .collect()
    }

    /// Overwrites the value of an existing parameter (shape must match).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let entries = self.entries.borrow();
        let entry = entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if entry.var.shape() != value.shape() {
            return Err(Error::Config(format!(
                "shape mismatch for {name}: stored {:?}, given {:?}",
                entry.var.shape(),
                value.shape()
            )));
        }
        entry.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copies every parameter under `from.` into the matching name under `to.`.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<()> {
        let pairs: Vec<(String, candle_core::Result<Tensor>)> = self
            .entries
            .borrow()
            .iter()
            .filter_map(|(name, e)| {
                name.strip_prefix(from)
                    .and_then(|rest| rest.strip_prefix('.'))
                    .map(|rest| (format!("{to}.{rest}"), e.var.as_tensor().copy()))
            })
            .collect();
        for (name, value) in pairs {
            let value = value?;
            self.assign(&name, &value)?;
        }
        Ok(())
    }

    fn insert(&self, name: String, var: Var, decay: bool) -> Result<()> {
        if ParamGroup::of(&name).is_none() {
            return Err(Error::Config(format!(
                "parameter {name} has no group prefix"
            )));
        }
        let mut entries = self.entries.borrow_mut();
        if entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        entries.insert(name, Entry { var, decay });
        Ok(())
    }
}

enum Source<'a> {
    Init(&'a RefCell<ChaCha8Rng>),
    Bind(&'a GroupSet),
}

/// Hands out parameter tensors under a dotted prefix.
pub struct ParamBuilder<'a> {
    params: &'a Params,
    prefix: String,
    source: std::rc::Rc<Source<'a>>,
}

impl<'a> ParamBuilder<'a> {
    /// Builder that creates new variables, drawing initial values from `rng`.
    pub fn init(params: &'a Params, rng: &'a RefCell<ChaCha8Rng>) -> Self {
        Self {
            params,
            prefix: String::new(),
            source: std::rc::Rc::new(Source::Init(rng)),
        }
    }

    /// Builder over existing variables; only `trainable` groups stay attached to the graph.
    pub fn bind(params: &'a Params, trainable: &'a GroupSet) -> Self {
        Self {
            params,
            prefix: String::new(),
            source: std::rc::Rc::new(Source::Bind(trainable)),
        }
    }

    pub fn pp(&self, segment: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{segment}", self.prefix)
        };
        Self {
            params: self.params,
            prefix,
            source: self.source.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.fetch(name, shape.into(), init, true)
    }

    /// Like [`get`](Self::get) but exempt from weight decay (norms, prompts, temperature).
    pub fn get_no_decay(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.fetch(name, shape.into(), init, false)
    }

    fn fetch(&self, name: &str, shape: Shape, init: Init, decay: bool) -> Result<Tensor> {
        let full = self.full_name(name);
        match self.source.as_ref() {
            Source::Init(rng) => {
                let values = sample(&mut rng.borrow_mut(), shape.elem_count(), init);
                let t = Tensor::from_vec(values, shape, self.params.device())?
                    .to_dtype(self.params.dtype())?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                self.params.insert(full, var, decay)?;
                Ok(out)
            }
            Source::Bind(trainable) => {
                let var = self
                    .params
                    .var(&full)
                    .ok_or_else(|| Error::Config(format!("missing parameter {full}")))?;
                if var.shape() != &shape {
                    return Err(Error::Config(format!(
                        "parameter {full} has shape {:?}, expected {:?}",
                        var.shape(),
                        shape
                    )));
                }
                let group = ParamGroup::of(&full)
                    .ok_or_else(|| Error::Config(format!("parameter {full} has no group")))?;
                if trainable.contains(&group) {
                    Ok(var.as_tensor().clone())
                } else {
                    Ok(var.as_tensor().detach())
                }
            }
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, init: Init) -> Vec<f64> {
    match init {
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("std must be positive");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::TruncNormal(std) => {
            let dist = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|_| loop {
                    let z: f64 = dist.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect()
        }
    }
}
