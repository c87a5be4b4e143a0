//! The pipeline behind the subcommands: artifact layout and the
//! prepare → pretrain → tune → eval steps.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/vocab.txt, data/pretrain.jsonl, data/bundles/rank-N/
//! base/model.ckpt, base/report.json
//! tuned/<label>/rank-N/{prompt.ckpt | model.ckpt, report.json, artifact.json}
//! eval/<label>/{report.json, generations.jsonl}
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use personaprompt_core::corpus::{bundle_seed, DatasetBundle, GeneralRecord, PersonaRecord, PreparedCorpora, PretrainPair};
use personaprompt_core::eval::{self, Conditioning, EvalReport, EvalTarget, Generation, GenerationRecord};
use personaprompt_core::model::DecoderLM;
use personaprompt_core::prompt::{prepend, PersonaPrompt};
use personaprompt_core::tape::Tape;
use personaprompt_core::Tensor;
use sha2::{Digest, Sha256};
use personaprompt_core::tokenizer::{build_vocab, Vocab};
use personaprompt_core::trainer::{self, TrainMode, TrainReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundles::{bundle_files, rank_dir, read_bundle};
use crate::checkpoint::{load_model, load_prompt, save_model, save_prompt};
use crate::config::{InitChoice, RunConfig};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, read_json, read_vocab, to_json, to_jsonl, vocab_to_text, write_atomic, write_json, write_jsonl};

/// Label of the un-tuned base model in `eval`, `generate` and `chat`.
pub const BASE_LABEL: &str = "base";

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("data/vocab.txt")
    }

    pub fn pretrain_corpus(&self) -> PathBuf {
        self.root.join("data/pretrain.jsonl")
    }

    pub fn bundle(&self, rank: usize) -> PathBuf {
        rank_dir(&self.root.join("data/bundles"), rank)
    }

    pub fn base_model(&self) -> PathBuf {
        self.root.join("base/model.ckpt")
    }

    pub fn base_report(&self) -> PathBuf {
        self.root.join("base/report.json")
    }

    pub fn tuned(&self, label: &str, rank: usize) -> PathBuf {
        rank_dir(&self.root.join("tuned").join(label), rank)
    }

    pub fn eval(&self, label: &str) -> PathBuf {
        self.root.join("eval").join(label)
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::missing(what, path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneSpec {
    pub mode: TrainMode,
    pub init: InitChoice,
    pub revised: bool,
}

impl TuneSpec {
    /// Directory name for the variant, e.g. `prompt_tune`,
    /// `prompt_tune-random` or `fine_tune_added-revised`.
    pub fn label(&self) -> String {
        let mut label = self.mode.as_str().to_string();
        if self.mode == TrainMode::PromptTune && self.init == InitChoice::Random {
            label.push_str("-random");
        }
        let uses_sentences = match self.mode {
            TrainMode::PromptTune => self.init == InitChoice::Persona,
            TrainMode::FineTuneAdded => true,
            _ => false,
        };
        if self.revised && uses_sentences {
            label.push_str("-revised");
        }
        label
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == TrainMode::Pretrain {
            return Err(Error::Usage("tune does not pretrain; use the pretrain subcommand".into()));
        }
        Ok(())
    }
}

/// Written beside each tuned checkpoint so later steps know how to use it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub spec: TuneSpec,
    pub persona_rank: usize,
    pub persona_id: String,
    /// Sentences placed before the utterance at inference (`fine_tune_added`).
    pub persona_text: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub vocab_size: usize,
    pub pretrain_pairs: usize,
    pub bundles: Vec<(String, personaprompt_core::corpus::BundleCounts)>,
}

/// Builds vocab, pretraining corpus and the k bundles in memory, then writes
/// them. Nothing is written if any step fails.
pub fn prepare_data(config: &RunConfig, out: &Layout) -> Result<PrepareSummary> {
    let persona: Vec<PersonaRecord> = read_jsonl(&config.paths.persona_corpus)?;
    let general: Vec<GeneralRecord> = read_jsonl(&config.paths.general_corpus)?;
    let pipeline = config.pipeline_config();
    let prepared = PreparedCorpora::new(&persona, &general, &pipeline)?;
    let bundles: Vec<DatasetBundle> = (1..=pipeline.k_personas)
        .map(|rank| prepared.bundle(rank, &pipeline))
        .collect::<personaprompt_core::Result<_>>()?;
    let pretrain = prepared.pretraining_corpus(&general, &bundles);

    let mut texts: Vec<&str> = Vec::new();
    for r in &persona {
        texts.extend(r.turns.iter().map(|t| t.text.as_str()));
        for s in [&r.persona_a, &r.persona_b] {
            texts.extend(s.original.iter().chain(&s.revised).map(String::as_str));
        }
    }
    for r in &general {
        texts.extend(r.turns.iter().map(String::as_str));
    }
    let vocab = build_vocab(&texts, config.vocab.min_freq, config.model.vocab_size)?;

    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (out.vocab(), vocab_to_text(&vocab).into_bytes()),
        (out.pretrain_corpus(), to_jsonl(&pretrain)),
    ];
    for b in &bundles {
        let dir = out.bundle(b.provenance.persona_rank);
        files.extend(bundle_files(b).into_iter().map(|(name, bytes)| (dir.join(name), bytes)));
    }
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    Ok(PrepareSummary {
        vocab_size: vocab.len(),
        pretrain_pairs: pretrain.len(),
        bundles: bundles.iter().map(|b| (b.persona_id.clone(), b.counts)).collect(),
    })
}

pub fn load_vocab(out: &Layout) -> Result<Vocab> {
    require(&out.vocab(), "vocabulary (run prepare-data)")?;
    read_vocab(out.vocab())
}

pub fn load_base(out: &Layout) -> Result<DecoderLM<f32>> {
    require(&out.base_model(), "base model (run pretrain)")?;
    let mut base = load_model(out.base_model())?;
    base.freeze();
    Ok(base)
}

pub fn load_bundle(out: &Layout, rank: usize) -> Result<DatasetBundle> {
    read_bundle(&out.bundle(rank))
}

fn documents(pairs: &[PretrainPair], vocab: &Vocab) -> Vec<Vec<usize>> {
    // Tabs separate fields below; as whitespace they tokenize like spaces.
    let clean = |s: &str| s.replace('\t', " ");
    let lines: Vec<String> = pairs
        .iter()
        .map(|p| {
            let body = format!("{}\t{}", clean(&p.pair.utterance), clean(&p.pair.response));
            match p.context.is_empty() {
                true => body,
                false => format!("{}\t{body}", clean(&p.context.join(" "))),
            }
        })
        .collect();
    trainer::pretrain_documents(&lines, vocab)
}

/// Pretrains the base model on `data/pretrain.jsonl` and saves it frozen.
/// Wall time is reported through `log` only, so reruns write identical files.
pub fn pretrain(config: &RunConfig, out: &Layout, log: &(dyn Fn(String) + Sync)) -> Result<TrainReport> {
    let vocab = load_vocab(out)?;
    require(&out.pretrain_corpus(), "pretraining corpus (run prepare-data)")?;
    let pairs: Vec<PretrainPair> = read_jsonl(out.pretrain_corpus())?;
    let docs = documents(&pairs, &vocab);
    let mut model_config = config.model;
    model_config.vocab_size = vocab.len();
    let start = Instant::now();
    let (mut model, mut report) = trainer::pretrain_base::<f32>(&docs, model_config, &config.pretrain_config(), |e, l| {
        log(format!("pretrain epoch {e}: loss {l:.4}"))
    })?;
    log(format!("pretraining took {:.1}s", start.elapsed().as_secs_f64()));
    model.freeze();
    save_model(out.base_model(), &model)?;
    report.checkpoint = Some("model.ckpt".into());
    write_json(out.base_report(), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub persona_rank: usize,
    pub report: TrainReport,
}

fn init_sentences(bundle: &DatasetBundle, revised: bool) -> Vec<String> {
    if revised && !bundle.revised_persona_sentences.is_empty() {
        bundle.revised_persona_sentences.clone()
    } else {
        bundle.persona_sentences.clone()
    }
}

/// Tunes one persona bundle and writes its artifact directory.
pub fn tune_rank(
    config: &RunConfig,
    out: &Layout,
    spec: TuneSpec,
    base: &DecoderLM<f32>,
    vocab: &Vocab,
    rank: usize,
    log: &(dyn Fn(String) + Sync),
) -> Result<TuneOutcome> {
    let bundle = load_bundle(out, rank)?;
    let dir = out.tuned(&spec.label(), rank);
    let train_config = config.tune_config(spec.mode);
    let sentences = init_sentences(&bundle, spec.revised);
    let on_epoch = |e: usize, l: f64| log(format!("rank {rank} epoch {e}: loss {l:.4}"));
    let max_seq = base.config.max_seq;
    let (report, checkpoint) = match spec.mode {
        TrainMode::PromptTune => {
            let length = config.prompt.length;
            let examples = trainer::pack_all(&bundle.train, vocab, spec.mode, &[], length, max_seq)?;
            let mut prompt = match spec.init {
                InitChoice::Persona => PersonaPrompt::init_from_persona(&sentences, vocab, base, length, bundle.persona_id.clone())?,
                InitChoice::Random => PersonaPrompt::random_init(
                    length,
                    base.config.d_model,
                    bundle_seed(config.seed, rank),
                    bundle.persona_id.clone(),
                    sentences.clone(),
                )?,
            };
            let report = trainer::prompt_tune(base, &mut prompt, &examples, &train_config, on_epoch)?;
            save_prompt(dir.join("prompt.ckpt"), &prompt)?;
            (report, "prompt.ckpt")
        }
        TrainMode::FineTuneNone | TrainMode::FineTuneAdded => {
            let examples = trainer::pack_all(&bundle.train, vocab, spec.mode, &sentences, 0, max_seq)?;
            let mut model = base.clone();
            let report = trainer::fine_tune(&mut model, &examples, &train_config, on_epoch)?;
            model.freeze();
            save_model(dir.join("model.ckpt"), &model)?;
            (report, "model.ckpt")
        }
        TrainMode::Pretrain => return Err(Error::Usage("tune does not pretrain".into())),
    };
    let mut report = report;
    report.checkpoint = Some(checkpoint.into());
    write_json(dir.join("report.json"), &report)?;
    let meta = ArtifactMeta {
        spec,
        persona_rank: rank,
        persona_id: bundle.persona_id.clone(),
        persona_text: (spec.mode == TrainMode::FineTuneAdded).then_some(sentences),
    };
    write_json(dir.join("artifact.json"), &meta)?;
    Ok(TuneOutcome { persona_rank: rank, report })
}

/// Number of parameters `spec` trains against `base`.
pub fn trainable_parameters(config: &RunConfig, spec: TuneSpec, base: &DecoderLM<f32>) -> usize {
    match spec.mode {
        TrainMode::PromptTune => config.prompt.length * base.config.d_model,
        _ => base.parameter_count(),
    }
}

/// Tunes every persona rank, in parallel on the current rayon pool.
pub fn tune(config: &RunConfig, out: &Layout, spec: TuneSpec, log: &(dyn Fn(String) + Sync)) -> Result<Vec<TuneOutcome>> {
    spec.validate()?;
    let vocab = load_vocab(out)?;
    let base = load_base(out)?;
    let ranks: Vec<usize> = (1..=config.pipeline.k_personas).collect();
    for &rank in &ranks {
        require(&out.bundle(rank).join(crate::bundles::MANIFEST), "dataset bundle (run prepare-data)")?;
    }
    ranks.par_iter().map(|&rank| tune_rank(config, out, spec, &base, &vocab, rank, log)).collect()
}

/// A tuned artifact, or the bare base model for [`BASE_LABEL`].
#[derive(Debug, Clone)]
pub struct Persona {
    pub rank: usize,
    pub persona_id: String,
    pub bundle: DatasetBundle,
    pub model: Option<DecoderLM<f32>>,
    pub prompt: Option<PersonaPrompt<f32>>,
    pub persona_text: Option<Vec<String>>,
}

impl Persona {
    pub fn load(out: &Layout, label: &str, rank: usize) -> Result<Self> {
        let bundle = load_bundle(out, rank)?;
        if label == BASE_LABEL {
            return Ok(Self { rank, persona_id: bundle.persona_id.clone(), bundle, model: None, prompt: None, persona_text: None });
        }
        let dir = out.tuned(label, rank);
        let meta_path = dir.join("artifact.json");
        require(&meta_path, &format!("tuned artifact {label:?} (run tune)"))?;
        let meta: ArtifactMeta = read_json(&meta_path)?;
        let (model, prompt) = if meta.spec.mode == TrainMode::PromptTune {
            let p = dir.join("prompt.ckpt");
            require(&p, "prompt checkpoint")?;
            (None, Some(load_prompt(p)?))
        } else {
            let p = dir.join("model.ckpt");
            require(&p, "model checkpoint")?;
            (Some(load_model(p)?), None)
        };
        Ok(Self { rank, persona_id: meta.persona_id, bundle, model, prompt, persona_text: meta.persona_text })
    }

    pub fn conditioning(&self) -> Conditioning<'_, f32> {
        match (&self.prompt, &self.persona_text) {
            (Some(p), _) => Conditioning::SoftPrompt(p),
            (None, Some(s)) => Conditioning::PersonaText(s),
            (None, None) => Conditioning::None,
        }
    }

    /// Lines `/persona` prints: the prompt's init source, else the sentences
    /// the model sees, else the bundle's persona.
    pub fn persona_lines(&self) -> &[String] {
        match (&self.prompt, &self.persona_text) {
            (Some(p), _) => &p.init_source,
            (None, Some(s)) => s,
            (None, None) => &self.bundle.persona_sentences,
        }
    }

    /// Base models do not need to be loaded for fine-tuned artifacts.
    pub fn needs_base(&self) -> bool {
        self.model.is_none()
    }
}

/// Everything needed to generate for one label.
pub struct Loaded {
    pub vocab: Vocab,
    pub base: Option<DecoderLM<f32>>,
    pub personas: Vec<Persona>,
}

impl Loaded {
    pub fn new(out: &Layout, label: &str, ranks: &[usize]) -> Result<Self> {
        let vocab = load_vocab(out)?;
        let personas: Vec<Persona> = ranks.iter().map(|&r| Persona::load(out, label, r)).collect::<Result<_>>()?;
        let base = if personas.iter().any(Persona::needs_base) { Some(load_base(out)?) } else { None };
        Ok(Self { vocab, base, personas })
    }

    pub fn model<'a>(&'a self, persona: &'a Persona) -> &'a DecoderLM<f32> {
        match (&persona.model, &self.base) {
            (Some(m), _) => m,
            (None, Some(b)) => b,
            (None, None) => unreachable!("base is loaded whenever a persona needs it"),
        }
    }

    pub fn generate(&self, persona: &Persona, utterance: &str, max_new_tokens: usize) -> Result<Generation> {
        Ok(eval::greedy_generate(self.model(persona), persona.conditioning(), utterance, &self.vocab, max_new_tokens)?)
    }
}

/// Logits of `ids` (BOS is not added) behind an optional soft prompt; the
/// prompt rows come first.
pub fn forward_logits(model: &DecoderLM<f32>, prompt: Option<&PersonaPrompt<f32>>, ids: &[usize]) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let mut x = model.embed_tokens(&mut tape, &vars, ids)?;
    if let Some(p) = prompt {
        let pv = p.bind(&mut tape)?;
        x = prepend(&mut tape, pv, x, model.config.max_seq)?;
    }
    let logits = model.forward(&mut tape, &vars, x)?;
    let (rows, cols) = tape.shape(logits);
    Ok(Tensor::new(&[rows, cols], tape.value(logits).to_vec())?)
}

/// Hex SHA-256 of a tensor's little-endian bytes.
pub fn digest(t: &Tensor<f32>) -> String {
    hex::encode(Sha256::digest(t.to_le_bytes()))
}

/// Generates for both eval sets of every persona and writes
/// `eval/<label>/{report.json, generations.jsonl}`.
pub fn evaluate(config: &RunConfig, out: &Layout, label: &str) -> Result<EvalReport> {
    let ranks: Vec<usize> = (1..=config.pipeline.k_personas).collect();
    let loaded = Loaded::new(out, label, &ranks)?;
    let max_new = config.eval.max_new_tokens;
    let targets: Vec<EvalTarget<'_, f32>> = loaded
        .personas
        .iter()
        .map(|p| EvalTarget {
            persona_rank: p.rank,
            persona_id: &p.persona_id,
            model: loaded.model(p),
            conditioning: p.conditioning(),
            persona_eval: &p.bundle.persona_eval,
            general_eval: &p.bundle.general_eval,
        })
        .collect();
    let per_target: Vec<Vec<GenerationRecord>> = targets
        .par_iter()
        .map(|t| eval::generate_records(t, &loaded.vocab, max_new))
        .collect::<personaprompt_core::Result<_>>()?;
    let records: Vec<GenerationRecord> = per_target.into_iter().flatten().collect();
    let report = eval::build_report(&records, label, max_new)?;
    let dir = out.eval(label);
    write_jsonl(dir.join("generations.jsonl"), &records)?;
    write_atomic(dir.join("report.json"), &to_json(&report))?;
    Ok(report)
}
