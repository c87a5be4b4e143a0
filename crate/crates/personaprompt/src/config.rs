//! The run configuration: one TOML file whose sections mirror the module
//! configs. Unknown keys are rejected; every field has a default.

use std::path::{Path, PathBuf};

use personaprompt_core::corpus::{PipelineConfig, Ratio};
use personaprompt_core::model::ModelConfig;
use personaprompt_core::prompt::DEFAULT_PROMPT_LENGTH;
use personaprompt_core::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_text;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for the pipeline, initialization and batch order.
    pub seed: u64,
    pub paths: Paths,
    pub vocab: VocabSection,
    pub model: ModelConfig,
    pub pipeline: PipelineSection,
    pub prompt: PromptSection,
    pub pretrain: TrainSection,
    pub tune: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Persona corpus in canonical JSON Lines.
    pub persona_corpus: PathBuf,
    /// General corpus in canonical JSON Lines.
    pub general_corpus: PathBuf,
    /// Root of every artifact the pipeline writes.
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub min_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub k_personas: usize,
    pub eval_fraction: Ratio,
    pub general_topic: String,
    pub max_chars: usize,
    pub general_per_persona: Ratio,
    pub general_eval_size: usize,
    pub sample_with_replacement: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    Persona,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub length: usize,
    pub init: InitChoice,
    /// Initialize from the revised persona sentences instead of the originals.
    pub use_revised: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Unset means the mode's default.
    pub learning_rate: Option<f64>,
    /// Unset means the mode's default.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub convergence_rel_tol: f64,
    pub convergence_patience: usize,
    pub grad_clip: f64,
    pub target_loss: Option<f64>,
    /// Pretraining only: inputs per window; unset fills the context.
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_new_tokens: usize,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            persona_corpus: "corpora/persona.jsonl".into(),
            general_corpus: "corpora/general.jsonl".into(),
            output: "runs".into(),
        }
    }
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { min_freq: 1 }
    }
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            k_personas: p.k_personas,
            eval_fraction: p.eval_fraction,
            general_topic: p.general_topic,
            max_chars: p.max_chars,
            general_per_persona: p.general_per_persona,
            general_eval_size: p.general_eval_size,
            sample_with_replacement: p.sample_with_replacement,
        }
    }
}

impl Default for PromptSection {
    fn default() -> Self {
        Self { length: DEFAULT_PROMPT_LENGTH, init: InitChoice::Persona, use_revised: false }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: None,
            max_epochs: t.max_epochs,
            convergence_rel_tol: t.convergence_rel_tol,
            convergence_patience: t.convergence_patience,
            grad_clip: t.grad_clip,
            target_loss: t.target_loss,
            window: t.pretrain_window,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_new_tokens: TrainConfig::default().max_new_tokens }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate(path)?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section without touching the filesystem.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let err = |e: personaprompt_core::Error| Error::Config { path: path.to_path_buf(), message: e.to_string() };
        self.model.validate().map_err(err)?;
        self.pipeline_config().validate().map_err(err)?;
        self.pretrain_config().validate().map_err(err)?;
        self.tune_config(TrainMode::PromptTune).validate().map_err(err)?;
        let bad = |message: &str| Err(Error::Config { path: path.to_path_buf(), message: message.into() });
        if self.vocab.min_freq == 0 {
            return bad("vocab.min_freq must be at least 1");
        }
        if self.prompt.length == 0 {
            return bad("prompt.length must be positive");
        }
        if self.prompt.length >= self.model.max_seq {
            return bad("prompt.length must leave room for tokens within model.max_seq");
        }
        if self.eval.max_new_tokens == 0 {
            return bad("eval.max_new_tokens must be positive");
        }
        Ok(())
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            k_personas: p.k_personas,
            eval_fraction: p.eval_fraction,
            general_topic: p.general_topic.clone(),
            max_chars: p.max_chars,
            general_per_persona: p.general_per_persona,
            general_eval_size: p.general_eval_size,
            sample_with_replacement: p.sample_with_replacement,
            seed: self.seed,
        }
    }

    fn train_config(&self, section: &TrainSection, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            learning_rate: section.learning_rate,
            batch_size: section.batch_size.unwrap_or(TrainConfig::for_mode(mode).batch_size),
            max_epochs: section.max_epochs,
            convergence_rel_tol: section.convergence_rel_tol,
            convergence_patience: section.convergence_patience,
            seed: self.seed,
            max_new_tokens: self.eval.max_new_tokens,
            grad_clip: section.grad_clip,
            target_loss: section.target_loss,
            pretrain_window: section.window,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.train_config(&self.pretrain, TrainMode::Pretrain)
    }

    pub fn tune_config(&self, mode: TrainMode) -> TrainConfig {
        self.train_config(&self.tune, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml();
        assert_eq!(RunConfig::parse(&text, Path::new("c.toml")).unwrap(), c);
        assert!(text.contains("[prompt]"));
        assert!(text.contains("length = 200"));
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("", Path::new("c.toml")).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[model]\nwidth = 3", "[tune]\nmode = \"prompt_tune\"", "[extra]\n"] {
            let err = RunConfig::parse(text, Path::new("c.toml")).unwrap_err();
            assert!(matches!(err, Error::Config { .. }), "{text}");
            assert_eq!(err.exit_code(), 2);
        }
    }

    #[test]
    fn sections_override_defaults() {
        let text = "seed = 7\n[pipeline]\ngeneral_per_persona = \"10\"\neval_fraction = \"1/5\"\n[tune]\nlearning_rate = 0.01\n[prompt]\ninit = \"random\"\n";
        let c = RunConfig::parse(text, Path::new("c.toml")).unwrap();
        let p = c.pipeline_config();
        assert_eq!(p.seed, 7);
        assert_eq!(p.general_per_persona, Ratio::integer(10));
        assert_eq!(p.eval_fraction, Ratio::new(1, 5).unwrap());
        let t = c.tune_config(TrainMode::FineTuneNone);
        assert_eq!((t.mode, t.seed, t.learning_rate()), (TrainMode::FineTuneNone, 7, 0.01));
        assert_eq!(c.prompt.init, InitChoice::Random);
        assert_eq!(c.pretrain_config().learning_rate(), TrainMode::Pretrain.default_learning_rate());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in ["[model]\nn_head = 3", "[prompt]\nlength = 360", "[tune]\nbatch_size = 0", "[pipeline]\nk_personas = 0"] {
            assert!(RunConfig::parse(text, Path::new("c.toml")).is_err(), "{text}");
        }
    }
}
