//! Experiment configuration, read from TOML.
//!
//! Every section is optional and every key has a default; `docs/CONFIG.md`
//! lists them with their provenance.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::data::HyperParams;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::policy::{FixedRewards, Framework, Mode};
use crate::prompt::PromptTemplate;
use crate::surrogate::finetune::FinetuneConfig;
use crate::surrogate::lm::LmConfig;
use crate::surrogate::synthetic::WorldConfig;
use crate::surrogate::tokenize::TokenizeConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    #[default]
    Surrogate,
    Bridge,
    FixedReward,
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "surrogate" => Ok(EnvKind::Surrogate),
            "bridge" => Ok(EnvKind::Bridge),
            "fixed-reward" | "fixed" => Ok(EnvKind::FixedReward),
            _ => Err(Error::Config(format!("unknown env {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub events: PathBuf,
    pub catalog: PathBuf,
    pub min_seq_len: usize,
    pub min_item_freq: usize,
    /// Train, validation and test shares of sessions.
    pub split: [f64; 3],
    /// Share of training sessions used to fine-tune the environment.
    pub le_fraction: f64,
    /// Seed for the split and negative sampling; kept apart from the
    /// training seed so that runs with different seeds see the same data.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            events: PathBuf::from("data/events.jsonl"),
            catalog: PathBuf::from("data/catalog.jsonl"),
            min_seq_len: 3,
            min_item_freq: 3,
            split: [0.8, 0.1, 0.1],
            le_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub framework: Framework,
    pub mode: Mode,
    pub env: EnvKind,
    /// Width the environment state is projected to before fusion.
    pub d_proj: usize,
    pub fixed: FixedRewards,
    pub sample_candidates: bool,
    /// Rows per gradient chunk.
    pub chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Recurrent,
            framework: Framework::Snqn,
            mode: Mode::Leasr,
            env: EnvKind::Surrogate,
            d_proj: 64,
            fixed: FixedRewards::default(),
            sample_candidates: false,
            chunk: 25,
        }
    }
}

/// The built-in language model and its pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub max_words: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// `music`, `product`, `compact` (built-in templates) or a template
    /// file path.
    pub template: String,
}

impl Default for LmSection {
    fn default() -> Self {
        let m = LmConfig::default();
        LmSection {
            d_model: m.d_model,
            n_blocks: m.n_blocks,
            ff_dim: m.ff_dim,
            max_positions: m.max_positions,
            max_words: m.max_words,
            pretrain_epochs: 5,
            pretrain_lr: 1e-3,
            template: "music".into(),
        }
    }
}

const BUILTIN_TEMPLATES: [&str; 3] = ["music", "product", "compact"];

impl LmSection {
    pub fn prompt_template(&self) -> Result<PromptTemplate> {
        match self.template.as_str() {
            "music" => PromptTemplate::parse(crate::prompt::LFM_TEMPLATE),
            "product" => PromptTemplate::parse(crate::prompt::PRODUCT_TEMPLATE),
            "compact" => PromptTemplate::parse(crate::surrogate::synthetic::TEMPLATE),
            path => PromptTemplate::load(Path::new(path)),
        }
    }

    pub fn model(&self) -> LmConfig {
        LmConfig {
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            ff_dim: self.ff_dim,
            max_positions: self.max_positions,
            max_words: self.max_words,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub template_id: String,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            url: "http://127.0.0.1:8377".into(),
            timeout_ms: 30_000,
            template_id: "default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// `w_ah` or `w_aq`.
    pub param: String,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            param: "w_ah".into(),
            grid: vec![0.01, 0.1, 1.0],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub hyper: HyperParams,
    pub lm: LmSection,
    pub tokenize: TokenizeConfig,
    pub finetune: FinetuneConfig,
    pub bridge: BridgeConfig,
    pub ablate: AblateConfig,
    pub synthetic: WorldConfig,
    pub parallelism: Parallelism,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a file; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.events, &mut cfg.data.catalog] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if !BUILTIN_TEMPLATES.contains(&cfg.lm.template.as_str())
                && Path::new(&cfg.lm.template).is_relative()
            {
                cfg.lm.template = dir.join(&cfg.lm.template).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let d = &self.data;
        if d.split.iter().any(|&x| x < 0.0) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "data.split must be non-negative and sum to 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&d.le_fraction) {
            return Err(Error::Config("data.le_fraction must lie in [0, 1]".into()));
        }
        let m = &self.model;
        if m.chunk == 0 {
            return Err(Error::Config("model.chunk must be positive".into()));
        }
        let need = m.mode.required();
        let uses_env = need.state || need.reward || need.augment;
        if uses_env && m.env == EnvKind::FixedReward {
            return Err(Error::Config(format!(
                "mode {} needs a language-model environment, not fixed-reward",
                m.mode
            )));
        }
        if m.mode.state_source().uses_env() && m.d_proj == 0 {
            return Err(Error::Config("model.d_proj must be positive".into()));
        }
        if self.finetune.batch < 2 {
            return Err(Error::Config("finetune.batch must be at least 2".into()));
        }
        if self.ablate.param != "w_ah" && self.ablate.param != "w_aq" {
            return Err(Error::Config("ablate.param must be w_ah or w_aq".into()));
        }
        Ok(())
    }
}
