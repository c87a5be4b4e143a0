//! Argument parsing and subcommand dispatch.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use personaprompt_core::trainer::TrainMode;

use crate::chat::chat;
use crate::checkpoint::{decode, decode_model, decode_prompt, Kind};
use crate::config::{InitChoice, RunConfig};
use crate::error::{Error, Result};
use crate::io::{read_bytes, to_json};
use crate::run::{self, Layout, Loaded, TuneSpec};

#[derive(Debug, Parser)]
#[command(name = "personaprompt", version, about = "Persona soft-prompt tuning for small frozen decoder LMs")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent persona runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse::<TrainMode>().map_err(|e| e.to_string())
}

/// A comma-separated token id list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdList(pub Vec<usize>);

fn parse_ids(s: &str) -> std::result::Result<IdList, String> {
    s.split(',').map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"))).collect::<std::result::Result<_, _>>().map(IdList)
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary, pretraining corpus and persona bundles.
    PrepareData,
    /// Pretrain the base model and save it frozen.
    Pretrain,
    /// Tune every persona bundle against the frozen base.
    Tune {
        /// prompt_tune, fine_tune_none or fine_tune_added.
        #[arg(long, value_parser = parse_mode, default_value = "prompt_tune")]
        mode: TrainMode,
        /// Prompt initialization; defaults to the config value.
        #[arg(long, value_enum)]
        init: Option<Init>,
        /// Use the revised persona sentences.
        #[arg(long)]
        revised: bool,
    },
    /// Greedy responses to the given utterances.
    Generate {
        #[arg(long, default_value = "prompt_tune")]
        label: String,
        #[arg(long, default_value_t = 1)]
        rank: usize,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(required = true)]
        utterances: Vec<String>,
    },
    /// Score a tuned variant on both eval sets of every persona.
    Eval {
        #[arg(long, default_value = "prompt_tune")]
        label: String,
    },
    /// Line-oriented chat on stdin. `/persona` shows the persona, `/quit` exits.
    Chat {
        #[arg(long, default_value = "prompt_tune")]
        label: String,
        #[arg(long, default_value_t = 1)]
        rank: usize,
    },
    /// Print a checkpoint header, optionally with a logits digest.
    InspectCheckpoint {
        path: PathBuf,
        /// Comma-separated token ids to run forward.
        #[arg(long, value_parser = parse_ids)]
        forward_ids: Option<IdList>,
        /// Base model, required for the forward pass of a prompt checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Init {
    Persona,
    Random,
}

impl From<Init> for InitChoice {
    fn from(i: Init) -> Self {
        match i {
            Init::Persona => InitChoice::Persona,
            Init::Random => InitChoice::Random,
        }
    }
}

impl Cli {
    /// The configuration file (or defaults) with command-line overrides.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(o) = &self.output {
            config.paths.output = o.clone();
        }
        Ok(config)
    }
}

fn log(line: String) {
    eprintln!("{line}");
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn inspect(path: &PathBuf, forward_ids: Option<&[usize]>, base: Option<&PathBuf>, out: &mut impl Write) -> Result<()> {
    let bytes = read_bytes(path)?;
    let ck = decode(&bytes)?;
    out.write_all(&to_json(&ck.header)).map_err(stdout_err)?;
    let Some(ids) = forward_ids else { return Ok(()) };
    let logits = match ck.header.kind {
        Kind::Model => run::forward_logits(&decode_model(&bytes)?, None, ids)?,
        Kind::Prompt => {
            let base = base.ok_or_else(|| Error::Usage("--forward-ids on a prompt checkpoint needs --base".into()))?;
            let model = crate::checkpoint::load_model(base)?;
            run::forward_logits(&model, Some(&decode_prompt(&bytes)?), ids)?
        }
    };
    writeln!(out, "logits {:?} sha256 {}", logits.shape(), run::digest(&logits)).map_err(stdout_err)?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = cli.effective_config()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if cli.print_config {
        out.write_all(config.to_toml().as_bytes()).map_err(stdout_err)?;
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::Usage("no subcommand given; see --help".into()));
    };
    let layout = Layout::new(&config.paths.output);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    match command {
        Command::PrepareData => {
            let summary = run::prepare_data(&config, &layout)?;
            writeln!(out, "vocabulary: {} tokens; pretraining pairs: {}", summary.vocab_size, summary.pretrain_pairs)
                .map_err(stdout_err)?;
            for (rank, (id, c)) in summary.bundles.iter().enumerate() {
                writeln!(
                    out,
                    "rank {}: persona {id}, {} pairs, train {} (general {}), persona eval {}, general eval {}",
                    rank + 1,
                    c.persona_pairs,
                    c.train,
                    c.general_train,
                    c.persona_eval,
                    c.general_eval
                )
                .map_err(stdout_err)?;
            }
        }
        Command::Pretrain => {
            let report = pool.install(|| run::pretrain(&config, &layout, &log))?;
            writeln!(
                out,
                "trainable parameters: {}\nfinal loss {:.4} after {} epochs ({:?})",
                report.trainable_parameters,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.epoch_losses.len(),
                report.stop_reason
            )
            .map_err(stdout_err)?;
        }
        Command::Tune { mode, init, revised } => {
            let spec = TuneSpec {
                mode: *mode,
                init: init.map(InitChoice::from).unwrap_or(config.prompt.init),
                revised: *revised || config.prompt.use_revised,
            };
            spec.validate()?;
            let base = run::load_base(&layout)?;
            writeln!(out, "trainable parameters: {}", run::trainable_parameters(&config, spec, &base)).map_err(stdout_err)?;
            out.flush().map_err(stdout_err)?;
            drop(base);
            let outcomes = pool.install(|| run::tune(&config, &layout, spec, &log))?;
            for o in outcomes {
                writeln!(
                    out,
                    "rank {}: final loss {:.4} after {} epochs ({:?})",
                    o.persona_rank,
                    o.report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    o.report.epoch_losses.len(),
                    o.report.stop_reason
                )
                .map_err(stdout_err)?;
            }
            writeln!(out, "artifacts: {}", layout.root.join("tuned").join(spec.label()).display()).map_err(stdout_err)?;
        }
        Command::Generate { label, rank, max_new_tokens, utterances } => {
            let loaded = Loaded::new(&layout, label, &[*rank])?;
            let persona = &loaded.personas[0];
            let max_new = max_new_tokens.unwrap_or(config.eval.max_new_tokens);
            for u in utterances {
                let g = loaded.generate(persona, u, max_new)?;
                writeln!(out, "{}", g.text).map_err(stdout_err)?;
            }
        }
        Command::Eval { label } => {
            let report = pool.install(|| run::evaluate(&config, &layout, label))?;
            for a in &report.averages {
                let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.3}"));
                writeln!(
                    out,
                    "{:?}: distinct-1 {} distinct-2 {} over {} models",
                    a.dataset,
                    show(a.distinct_1),
                    show(a.distinct_2),
                    a.n_models
                )
                .map_err(stdout_err)?;
            }
            writeln!(out, "report: {}", layout.eval(label).join("report.json").display()).map_err(stdout_err)?;
        }
        Command::Chat { label, rank } => {
            let loaded = Loaded::new(&layout, label, &[*rank])?;
            let stdin = std::io::stdin();
            chat(&loaded, &loaded.personas[0], config.eval.max_new_tokens, stdin.lock(), &mut out)?;
        }
        Command::InspectCheckpoint { path, forward_ids, base } => {
            inspect(path, forward_ids.as_ref().map(|l| l.0.as_slice()), base.as_ref(), &mut out)?;
        }
    }
    Ok(())
}

/// Parses arguments, runs, and maps failures to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
