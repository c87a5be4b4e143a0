//! Greedy decoding, distinct-N, and per-persona report aggregation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::DialoguePair;
use crate::error::{Error, Result};
use crate::model::DecoderLM;
use crate::prompt::{prepend, PersonaPrompt};
use crate::real::Real;
use crate::tape::Tape;
use crate::tokenizer::{Vocab, EOS};
use crate::trainer::prefix_ids;

/// Distinct-1 and distinct-2 of a prompt-tuned 6B-parameter model on
/// persona dialogue. Carried in reports for orientation only; a toy-scale
/// model is not expected to approach them.
pub const REFERENCE_DISTINCT_1: f64 = 0.213;
pub const REFERENCE_DISTINCT_2: f64 = 0.595;

/// What the model sees in front of the utterance.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a, T> {
    None,
    SoftPrompt(&'a PersonaPrompt<T>),
    /// Persona sentences as plain tokens after BOS, as in `fine_tune_added`.
    PersonaText(&'a [String]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenStop {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, without EOS.
    pub ids: Vec<usize>,
    pub text: String,
    pub stop: GenStop,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends the argmax token until EOS, `max_new_tokens`, or the context is
/// full. Each step reruns the full forward pass.
pub fn greedy_generate<T: Real>(
    model: &DecoderLM<T>,
    conditioning: Conditioning<'_, T>,
    utterance: &str,
    vocab: &Vocab,
    max_new_tokens: usize,
) -> Result<Generation> {
    let (prompt, persona) = match conditioning {
        Conditioning::None => (None, None),
        Conditioning::SoftPrompt(p) => (Some(p), None),
        Conditioning::PersonaText(s) => (None, Some(s)),
    };
    let mut ids = prefix_ids(vocab, utterance, persona);
    let offset = prompt.map_or(0, |p| p.length());
    let max_seq = model.config.max_seq;
    if offset + ids.len() > max_seq - 1 {
        return Err(Error::SequenceLength {
            len: offset + ids.len(),
            max: max_seq - 1,
            context: Some(format!("generation prefix for {utterance:?}")),
        });
    }
    let start = ids.len();
    let mut stop = GenStop::MaxTokens;
    for _ in 0..max_new_tokens {
        if offset + ids.len() >= max_seq {
            break;
        }
        let next = {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape)?;
            let mut x = model.embed_tokens(&mut tape, &vars, &ids)?;
            if let Some(p) = prompt {
                let pv = p.bind(&mut tape)?;
                x = prepend(&mut tape, pv, x, max_seq)?;
            }
            let h = model.hidden_states(&mut tape, &vars, x)?;
            let last = tape.shape(h).0 - 1;
            let h = tape.select_rows(h, &[last])?;
            let logits = model.project(&mut tape, &vars, h)?;
            argmax(tape.value(logits))
        };
        if next == EOS {
            stop = GenStop::Eos;
            break;
        }
        ids.push(next);
    }
    let generated = ids.split_off(start);
    let text = vocab.decode(&generated)?;
    Ok(Generation { ids: generated, text, stop })
}

/// Distinct n-grams over total n-grams, pooled across `responses`.
pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("distinct-n needs n of at least 1".into()));
    }
    let mut seen: BTreeSet<Vec<&str>> = BTreeSet::new();
    let mut total = 0usize;
    for r in responses {
        let toks: Vec<&str> = r.as_ref().split_whitespace().collect();
        for gram in toks.windows(n) {
            seen.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyPool { n });
    }
    Ok(seen.len() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDataset {
    PersonaEval,
    GeneralEval,
    /// Both eval sets pooled.
    Combined,
}

impl EvalDataset {
    pub const ALL: [EvalDataset; 3] = [Self::PersonaEval, Self::GeneralEval, Self::Combined];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub persona_rank: usize,
    pub persona_id: String,
    pub dataset: EvalDataset,
    pub utterance: String,
    pub generated: String,
    pub reference: String,
    pub token_count: usize,
    pub stop_reason: GenStop,
}

/// One persona model's bundle, ready for generation.
#[derive(Debug, Clone, Copy)]
pub struct EvalTarget<'a, T> {
    pub persona_rank: usize,
    pub persona_id: &'a str,
    pub model: &'a DecoderLM<T>,
    pub conditioning: Conditioning<'a, T>,
    pub persona_eval: &'a [DialoguePair],
    pub general_eval: &'a [DialoguePair],
}

/// Greedy responses for every utterance of both eval sets of `target`, in
/// dataset order.
pub fn generate_records<T: Real>(target: &EvalTarget<'_, T>, vocab: &Vocab, max_new_tokens: usize) -> Result<Vec<GenerationRecord>> {
    let sets = [(EvalDataset::PersonaEval, target.persona_eval), (EvalDataset::GeneralEval, target.general_eval)];
    let mut out = Vec::new();
    for (dataset, pairs) in sets {
        for p in pairs {
            let g = greedy_generate(target.model, target.conditioning, &p.utterance, vocab, max_new_tokens)?;
            out.push(GenerationRecord {
                persona_rank: target.persona_rank,
                persona_id: target.persona_id.into(),
                dataset,
                utterance: p.utterance.clone(),
                generated: g.text,
                reference: p.response.clone(),
                token_count: g.ids.len(),
                stop_reason: g.stop,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub persona_rank: usize,
    pub persona_id: String,
    pub dataset: EvalDataset,
    /// `None` when the pool has no n-grams (every response empty).
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
    pub n_responses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAverage {
    pub dataset: EvalDataset,
    /// Mean over persona models; `None` if any model's cell is undefined.
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
    pub n_models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub note: String,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        Self {
            note: "prompt-tuned 6B-parameter model; not reproduced at this scale".into(),
            distinct_1: REFERENCE_DISTINCT_1,
            distinct_2: REFERENCE_DISTINCT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub max_new_tokens: usize,
    pub cells: Vec<CellScore>,
    pub averages: Vec<DatasetAverage>,
    pub reference: ReferenceValues,
}

fn optional_distinct(responses: &[&str], n: usize) -> Result<Option<f64>> {
    match distinct_n(responses, n) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyPool { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores every (persona model, dataset) pool and averages across models.
/// Cells are ordered by (persona rank, dataset).
pub fn build_report(records: &[GenerationRecord], label: &str, max_new_tokens: usize) -> Result<EvalReport> {
    let ranks: BTreeSet<(usize, &str)> = records.iter().map(|r| (r.persona_rank, r.persona_id.as_str())).collect();
    let mut cells = Vec::new();
    for &(rank, id) in &ranks {
        for dataset in EvalDataset::ALL {
            let pool: Vec<&str> = records
                .iter()
                .filter(|r| r.persona_rank == rank && (dataset == EvalDataset::Combined || r.dataset == dataset))
                .map(|r| r.generated.as_str())
                .collect();
            cells.push(CellScore {
                persona_rank: rank,
                persona_id: id.into(),
                dataset,
                distinct_1: optional_distinct(&pool, 1)?,
                distinct_2: optional_distinct(&pool, 2)?,
                n_responses: pool.len(),
            });
        }
    }
    let averages = EvalDataset::ALL
        .into_iter()
        .map(|dataset| {
            let of: Vec<&CellScore> = cells.iter().filter(|c| c.dataset == dataset).collect();
            DatasetAverage {
                dataset,
                distinct_1: mean(&of.iter().map(|c| c.distinct_1).collect::<Vec<_>>()),
                distinct_2: mean(&of.iter().map(|c| c.distinct_2).collect::<Vec<_>>()),
                n_models: of.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        label: label.into(),
        max_new_tokens,
        cells,
        averages,
        reference: ReferenceValues::default(),
    })
}

/// Generation for every target followed by [`build_report`].
pub fn evaluate<T: Real>(
    targets: &[EvalTarget<'_, T>],
    vocab: &Vocab,
    label: &str,
    max_new_tokens: usize,
) -> Result<(Vec<GenerationRecord>, EvalReport)> {
    if targets.is_empty() {
        return Err(Error::Config("no tuned artifacts to evaluate".into()));
    }
    let mut records = Vec::new();
    for t in targets {
        records.extend(generate_records(t, vocab, max_new_tokens)?);
    }
    let report = build_report(&records, label, max_new_tokens)?;
    Ok((records, report))
}
