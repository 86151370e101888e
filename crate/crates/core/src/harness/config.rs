//! Run configuration, ablation modes and `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier_head::ClassifierConfig;
use crate::encoders::{GROUP_CLIP_IMAGE, GROUP_CLIP_TEXT, GROUP_DECODER, GROUP_PROMPT};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, MtaVariant};
use crate::nn::{Trainability, TrainabilityMap};
use crate::optim::AdamWConfig;
use crate::sam_clip::InteractionConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    ClaOnly,
    SegOnly,
    SamOnly,
    ClipOnly,
    SamClipNoMtff,
    ClipPlusMtff,
    SamPlusMtff,
}

/// Which pieces a mode builds and which loss terms it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeWiring {
    pub use_text: bool,
    pub use_prompts: bool,
    pub mtff: bool,
    pub seg: bool,
    pub cla: bool,
    pub mta: bool,
    /// Task columns shown in the comparison table.
    pub show_cla: bool,
    pub show_seg: bool,
}

impl Mode {
    /// Table order: single-task rows, component ablations, then the full model.
    pub const ALL: [Mode; 8] = [
        Mode::ClaOnly,
        Mode::SegOnly,
        Mode::SamOnly,
        Mode::ClipOnly,
        Mode::SamClipNoMtff,
        Mode::SamPlusMtff,
        Mode::ClipPlusMtff,
        Mode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::ClaOnly => "cla_only",
            Mode::SegOnly => "seg_only",
            Mode::SamOnly => "sam_only",
            Mode::ClipOnly => "clip_only",
            Mode::SamClipNoMtff => "sam_clip_no_mtff",
            Mode::ClipPlusMtff => "clip_plus_mtff",
            Mode::SamPlusMtff => "sam_plus_mtff",
        }
    }

    pub fn wiring(self) -> ModeWiring {
        let w = |use_text, use_prompts, mtff, show_cla, show_seg| ModeWiring {
            use_text,
            use_prompts,
            mtff,
            seg: true,
            cla: true,
            mta: true,
            show_cla,
            show_seg,
        };
        match self {
            Mode::Full => w(true, true, true, true, true),
            Mode::ClaOnly => ModeWiring {
                seg: false,
                mta: false,
                show_seg: false,
                ..w(true, true, true, true, false)
            },
            Mode::SegOnly => ModeWiring {
                cla: false,
                mta: false,
                show_cla: false,
                ..w(true, true, true, false, true)
            },
            Mode::SamOnly => w(false, true, false, false, true),
            Mode::ClipOnly => w(true, false, false, true, false),
            Mode::SamClipNoMtff => w(true, true, false, true, true),
            Mode::SamPlusMtff => w(false, true, true, false, true),
            Mode::ClipPlusMtff => w(true, false, true, true, false),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPreset {
    #[default]
    Desk,
    Densenet121,
}

impl ClassifierPreset {
    pub fn config(self) -> ClassifierConfig {
        match self {
            ClassifierPreset::Desk => ClassifierConfig::default(),
            ClassifierPreset::Densenet121 => ClassifierConfig::densenet121(),
        }
    }
}

/// Flat run configuration; field names double as override keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub dataset_dir: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    /// Optional cap on optimizer steps per fold.
    pub max_steps: Option<u64>,
    /// Train and validate on every case (single pseudo-fold).
    pub train_on_all: bool,
    pub grad_clip: f64,
    pub gamma: [f64; 4],
    pub alpha: f64,
    pub beta: f64,
    pub epsilon_smooth: f64,
    pub epsilon_prob: f64,
    pub mta_variant: MtaVariant,
    pub k_fg: usize,
    pub k_bg: usize,
    pub classifier: ClassifierPreset,
    /// Per-group overrides on top of the default partition.
    pub trainability: BTreeMap<String, Trainability>,
    pub save_checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let o = AdamWConfig::default();
        Self {
            mode: Mode::Full,
            dataset_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            seed: 0,
            precision: Precision::Double,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.eps,
            batch_size: 8,
            epochs: 25,
            folds: 5,
            max_steps: None,
            train_on_all: false,
            grad_clip: 5.0,
            gamma: w.gamma,
            alpha: w.alpha,
            beta: w.beta,
            epsilon_smooth: w.epsilon_smooth,
            epsilon_prob: w.epsilon_prob,
            mta_variant: MtaVariant::default(),
            k_fg: 3,
            k_bg: 1,
            classifier: ClassifierPreset::Desk,
            trainability: BTreeMap::new(),
            save_checkpoints: true,
        }
    }
}

impl RunConfig {
    /// Full-size protocol: batch 32 and the 121-layer classifier.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 32,
            classifier: ClassifierPreset::Densenet121,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value`; the value is parsed as JSON, falling back to a
    /// plain string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        let key = key.trim();
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let map = doc.as_object_mut().expect("config is an object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {kv:?}: {e}")))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.train_on_all && self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.k_fg < 1 {
            return bad("k_fg must be at least 1".into());
        }
        self.loss_weights().validate()?;
        self.classifier.config().validate()
    }

    /// Loss weights with the mode's disabled terms zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        let w = self.mode.wiring();
        LossWeights {
            gamma: self.gamma,
            alpha: if w.seg { self.alpha } else { 0.0 },
            beta: if w.cla { self.beta } else { 0.0 },
            xi: [1.0, 1.0],
            epsilon_smooth: self.epsilon_smooth,
            epsilon_prob: self.epsilon_prob,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn interaction(&self) -> InteractionConfig {
        let w = self.mode.wiring();
        InteractionConfig {
            use_text: w.use_text,
            use_prompts: w.use_prompts,
            k_fg: self.k_fg,
            k_bg: self.k_bg,
        }
    }

    /// Encoders frozen, decoder fine-tuned, the rest trained; then overrides.
    pub fn trainability_map(&self) -> TrainabilityMap {
        let mut m = TrainabilityMap::default();
        for g in [GROUP_CLIP_IMAGE, GROUP_CLIP_TEXT, GROUP_PROMPT] {
            m.set(g, Trainability::Frozen);
        }
        m.set(GROUP_DECODER, Trainability::FineTune);
        for (g, t) in &self.trainability {
            m.set(g, *t);
        }
        m
    }
}
