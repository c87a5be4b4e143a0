//! Dialogue-pair datasets: extraction from persona dialogues, persona ranking,
//! the train/eval split, the general-corpus filter, mixing, and bundle
//! assembly for one persona.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::fmt;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

/// The persona sentences given to one speaker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaSentences {
    pub original: Vec<String>,
    #[serde(default)]
    pub revised: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// One persona-grounded dialogue between speakers A and B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaRecord {
    pub record_id: String,
    pub persona_a: PersonaSentences,
    pub persona_b: PersonaSentences,
    pub turns: Vec<Turn>,
}

/// One dialogue from a general (persona-free) corpus. Turns alternate between
/// two unnamed speakers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralRecord {
    pub record_id: String,
    pub topic: String,
    pub turns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    PersonaCorpus,
    GeneralCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialoguePair {
    pub utterance: String,
    pub response: String,
    pub persona_id: Option<String>,
    pub source: Source,
}

fn invalid(record_id: &str, reason: impl Into<String>) -> Error {
    Error::InvalidRecord { record_id: record_id.to_string(), reason: reason.into() }
}

fn check_text(record_id: &str, i: usize, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(invalid(record_id, format!("turn {i} is empty")));
    }
    Ok(())
}

impl PersonaRecord {
    pub fn validate(&self) -> Result<()> {
        if self.turns.len() < 2 {
            return Err(invalid(&self.record_id, format!("{} turns, need at least 2", self.turns.len())));
        }
        for (i, t) in self.turns.iter().enumerate() {
            check_text(&self.record_id, i, &t.text)?;
            if i > 0 && t.speaker == self.turns[i - 1].speaker {
                return Err(invalid(&self.record_id, format!("turns {} and {i} share a speaker", i - 1)));
            }
        }
        Ok(())
    }

    pub fn persona(&self, speaker: Speaker) -> &PersonaSentences {
        match speaker {
            Speaker::A => &self.persona_a,
            Speaker::B => &self.persona_b,
        }
    }
}

impl GeneralRecord {
    pub fn validate(&self) -> Result<()> {
        if self.turns.len() < 2 {
            return Err(invalid(&self.record_id, format!("{} turns, need at least 2", self.turns.len())));
        }
        for (i, t) in self.turns.iter().enumerate() {
            check_text(&self.record_id, i, t)?;
        }
        Ok(())
    }
}

/// Order-insensitive identity of a persona: the first 16 hex digits of the
/// SHA-256 of its original sentences, sorted and newline-joined.
pub fn persona_key(original: &[String]) -> String {
    let mut sorted: Vec<&str> = original.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    let digest = Sha256::digest(sorted.join("\n").as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Every consecutive turn pair, attributed to the responder's persona.
pub fn extract_pairs(record: &PersonaRecord) -> Vec<DialoguePair> {
    let keys = [persona_key(&record.persona_a.original), persona_key(&record.persona_b.original)];
    record
        .turns
        .windows(2)
        .map(|w| DialoguePair {
            utterance: w[0].text.clone(),
            response: w[1].text.clone(),
            persona_id: Some(keys[w[1].speaker as usize].clone()),
            source: Source::PersonaCorpus,
        })
        .collect()
}

pub fn count_by_persona(pairs: &[DialoguePair]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for p in pairs {
        if let Some(id) = &p.persona_id {
            *counts.entry(id.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// The `k` personas with the most pairs, ties broken by ascending id.
pub fn rank_personas(pairs: &[DialoguePair], k: usize) -> Result<Vec<(String, usize)>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut ranked: Vec<(String, usize)> = count_by_persona(pairs).into_iter().collect();
    if ranked.len() < k {
        return Err(Error::InsufficientPersonas { needed: k, found: ranked.len() });
    }
    // ids come out of the map ascending; the stable sort keeps that for ties
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(k);
    Ok(ranked)
}

/// A non-negative rational `num / den`, reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config("ratio denominator must be positive".into()));
        }
        let g = gcd(num, den).max(1);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn integer(n: u64) -> Self {
        Self { num: n, den: 1 }
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    /// `round(n · self)`, half to even.
    pub fn apply(self, n: usize) -> usize {
        round_half_even(n as u128 * self.num as u128, self.den as u128) as usize
    }
}

/// `round(a / b)` with exact ties going to the even neighbour.
pub fn round_half_even(a: u128, b: u128) -> u128 {
    let (q, r) = (a / b, a % b);
    match (2 * r).cmp(&b) {
        core::cmp::Ordering::Less => q,
        core::cmp::Ordering::Greater => q + 1,
        core::cmp::Ordering::Equal => q + (q & 1),
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = Error;

    /// Accepts `"3"`, `"1/10"` or a finite decimal such as `"0.1"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid ratio {s:?}"));
        let s = s.trim();
        let int = |t: &str| t.parse::<u64>().map_err(|_| bad());
        if let Some((n, d)) = s.split_once('/') {
            return Ratio::new(int(n.trim())?, int(d.trim())?);
        }
        if let Some((whole, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let den = 10u64.pow(frac.len() as u32);
            let whole = if whole.is_empty() { 0 } else { int(whole)? };
            let num = whole.checked_mul(den).and_then(|w| w.checked_add(int(frac).ok()?)).ok_or_else(bad)?;
            return Ratio::new(num, den);
        }
        Ok(Ratio::integer(int(s)?))
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const MIN_SPLIT_PAIRS: usize = 10;

/// Seeded shuffle, then the first `max(1, round(n · eval_fraction))` items go
/// to eval and the rest to train. Returns `(train, eval)`.
pub fn split_train_eval<P>(pairs: Vec<P>, eval_fraction: Ratio, seed: u64) -> Result<(Vec<P>, Vec<P>)> {
    let n = pairs.len();
    if n < MIN_SPLIT_PAIRS {
        return Err(Error::TooFewPairs { found: n, min: MIN_SPLIT_PAIRS });
    }
    if eval_fraction.num >= eval_fraction.den {
        return Err(Error::Config(format!("eval fraction {eval_fraction} must be below 1")));
    }
    let n_eval = eval_fraction.apply(n).max(1);
    let mut shuffled = pairs;
    shuffled.shuffle(&mut seeded(seed, Stream::Split));
    let train = shuffled.split_off(n_eval);
    Ok((train, shuffled))
}

/// Adjacent-turn pairs from records on `topic` whose sides are both shorter
/// than `max_chars` Unicode scalar values.
pub fn filter_general(records: &[GeneralRecord], topic: &str, max_chars: usize) -> Vec<DialoguePair> {
    records
        .iter()
        .filter(|r| r.topic == topic)
        .flat_map(|r| r.turns.windows(2))
        .filter(|w| w[0].chars().count() < max_chars && w[1].chars().count() < max_chars)
        .map(|w| DialoguePair {
            utterance: w[0].clone(),
            response: w[1].clone(),
            persona_id: None,
            source: Source::GeneralCorpus,
        })
        .collect()
}

/// Drops repeated `(utterance, response)` texts, keeping first occurrences.
pub fn dedup_pairs(pairs: Vec<DialoguePair>) -> Vec<DialoguePair> {
    let mut seen = BTreeSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.utterance.clone(), p.response.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mixed {
    pub pairs: Vec<DialoguePair>,
    /// Indices into the general pool that were drawn, in draw order.
    pub sampled_general: Vec<usize>,
}

/// Adds `round(|persona_train| · ratio)` general pairs and shuffles.
pub fn mix(
    persona_train: &[DialoguePair],
    general_pool: &[DialoguePair],
    ratio_general_per_persona: Ratio,
    seed: u64,
    with_replacement: bool,
) -> Result<Mixed> {
    let needed = ratio_general_per_persona.apply(persona_train.len());
    let mut rng = seeded(seed, Stream::MixSample);
    let sampled_general: Vec<usize> = if with_replacement {
        if needed > 0 && general_pool.is_empty() {
            return Err(Error::InsufficientGeneralPairs { needed, available: 0 });
        }
        (0..needed).map(|_| rng.random_range(0..general_pool.len())).collect()
    } else {
        if general_pool.len() < needed {
            return Err(Error::InsufficientGeneralPairs { needed, available: general_pool.len() });
        }
        index::sample(&mut rng, general_pool.len(), needed).into_vec()
    };
    let mut pairs: Vec<DialoguePair> = persona_train.to_vec();
    pairs.extend(sampled_general.iter().map(|&i| general_pool[i].clone()));
    pairs.shuffle(&mut seeded(seed, Stream::MixShuffle));
    Ok(Mixed { pairs, sampled_general })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Number of top personas to build bundles for.
    pub k_personas: usize,
    pub eval_fraction: Ratio,
    pub general_topic: String,
    pub max_chars: usize,
    pub general_per_persona: Ratio,
    pub general_eval_size: usize,
    pub sample_with_replacement: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_personas: 3,
            eval_fraction: Ratio { num: 1, den: 10 },
            general_topic: "Relationship".into(),
            max_chars: 50,
            general_per_persona: Ratio::integer(1),
            general_eval_size: 150,
            sample_with_replacement: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_personas == 0 {
            return Err(Error::Config("k_personas must be at least 1".into()));
        }
        if self.eval_fraction.num >= self.eval_fraction.den {
            return Err(Error::Config(format!("eval_fraction {} must be below 1", self.eval_fraction)));
        }
        if self.max_chars == 0 {
            return Err(Error::Config("max_chars must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleCounts {
    pub persona_pairs: usize,
    pub persona_train: usize,
    pub persona_eval: usize,
    pub general_pool: usize,
    pub general_train: usize,
    pub general_eval: usize,
    pub train: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config: PipelineConfig,
    pub seed: u64,
    pub persona_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetBundle {
    pub persona_id: String,
    /// Original sentences, from the first dialogue that uses this persona.
    pub persona_sentences: Vec<String>,
    pub revised_persona_sentences: Vec<String>,
    pub train: Vec<DialoguePair>,
    pub persona_eval: Vec<DialoguePair>,
    pub general_eval: Vec<DialoguePair>,
    pub provenance: Provenance,
    pub counts: BundleCounts,
}

/// Seed for the bundle of `rank`, so bundles differ but stay reproducible.
pub fn bundle_seed(seed: u64, rank: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(rank as u64)
}

/// Validated records, their pairs, and the filtered deduplicated general pool:
/// the work shared by every bundle.
#[derive(Debug, Clone)]
pub struct PreparedCorpora<'a> {
    persona_records: &'a [PersonaRecord],
    pub persona_pairs: Vec<DialoguePair>,
    pub general_pool: Vec<DialoguePair>,
}

impl<'a> PreparedCorpora<'a> {
    pub fn new(persona_records: &'a [PersonaRecord], general_records: &[GeneralRecord], config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        for r in persona_records {
            r.validate()?;
        }
        for r in general_records {
            r.validate()?;
        }
        let persona_pairs = persona_records.iter().flat_map(extract_pairs).collect();
        let general_pool = dedup_pairs(filter_general(general_records, &config.general_topic, config.max_chars));
        Ok(Self { persona_records, persona_pairs, general_pool })
    }

    fn persona_text(&self, id: &str) -> (Vec<String>, Vec<String>) {
        for r in self.persona_records {
            for s in [&r.persona_a, &r.persona_b] {
                if persona_key(&s.original) == id {
                    return (s.original.clone(), s.revised.clone());
                }
            }
        }
        (Vec::new(), Vec::new())
    }

    /// The pretraining corpus: every pair from [`pretraining_pairs`], plus a
    /// second copy of each persona pair carrying the responder's persona
    /// sentences as context. The copies teach the base to read a persona
    /// placed in front of the dialogue, which is where a soft prompt sits.
    pub fn pretraining_corpus(&self, general_records: &[GeneralRecord], bundles: &[DatasetBundle]) -> Vec<PretrainPair> {
        let pairs = pretraining_pairs(&self.persona_pairs, general_records, bundles);
        let mut contexts: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        let mut out: Vec<PretrainPair> = pairs.iter().map(|p| PretrainPair::plain(p.clone())).collect();
        for p in &pairs {
            if let Some(id) = p.persona_id.as_deref() {
                let context = contexts.entry(id).or_insert_with(|| self.persona_text(id).0);
                out.push(PretrainPair { context: context.clone(), pair: p.clone() });
            }
        }
        out
    }

    /// The dataset bundle for the persona ranked `persona_rank` (1-based).
    pub fn bundle(&self, persona_rank: usize, config: &PipelineConfig) -> Result<DatasetBundle> {
        if persona_rank == 0 {
            return Err(Error::Config("persona rank is 1-based".into()));
        }
        let ranked = rank_personas(&self.persona_pairs, persona_rank)?;
        let persona_id = ranked[persona_rank - 1].0.clone();
        let seed = bundle_seed(config.seed, persona_rank);

        let own: Vec<DialoguePair> = self
            .persona_pairs
            .iter()
            .filter(|p| p.persona_id.as_deref() == Some(&persona_id))
            .cloned()
            .collect();
        let persona_pairs = own.len();
        let (persona_train, persona_eval) = split_train_eval(own, config.eval_fraction, seed)?;
        let mixed = mix(&persona_train, &self.general_pool, config.general_per_persona, seed, config.sample_with_replacement)?;

        let used: BTreeSet<usize> = mixed.sampled_general.iter().copied().collect();
        let remaining: Vec<usize> = (0..self.general_pool.len()).filter(|i| !used.contains(i)).collect();
        if remaining.len() < config.general_eval_size {
            return Err(Error::InsufficientGeneralPairs {
                needed: config.general_eval_size,
                available: remaining.len(),
            });
        }
        let mut rng = seeded(seed, Stream::GeneralEval);
        let general_eval: Vec<DialoguePair> = index::sample(&mut rng, remaining.len(), config.general_eval_size)
            .into_iter()
            .map(|i| self.general_pool[remaining[i]].clone())
            .collect();

        let (persona_sentences, revised_persona_sentences) = self.persona_text(&persona_id);
        let counts = BundleCounts {
            persona_pairs,
            persona_train: persona_train.len(),
            persona_eval: persona_eval.len(),
            general_pool: self.general_pool.len(),
            general_train: mixed.sampled_general.len(),
            general_eval: general_eval.len(),
            train: mixed.pairs.len(),
        };
        Ok(DatasetBundle {
            persona_id,
            persona_sentences,
            revised_persona_sentences,
            train: mixed.pairs,
            persona_eval,
            general_eval,
            provenance: Provenance { config: config.clone(), seed, persona_rank },
            counts,
        })
    }
}

/// Convenience wrapper running the whole recipe for one rank.
pub fn build_bundle(
    persona_records: &[PersonaRecord],
    general_records: &[GeneralRecord],
    persona_rank: usize,
    config: &PipelineConfig,
) -> Result<DatasetBundle> {
    PreparedCorpora::new(persona_records, general_records, config)?.bundle(persona_rank, config)
}

/// One pretraining example; `context` is empty for plain pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainPair {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<String>,
    #[serde(flatten)]
    pub pair: DialoguePair,
}

impl PretrainPair {
    pub fn plain(pair: DialoguePair) -> Self {
        Self { context: Vec::new(), pair }
    }
}

/// Pairs for pretraining the base model: persona pairs of personas outside
/// `selected`, plus every general pair (any topic, any length) whose text is
/// not in an eval set of `bundles`.
pub fn pretraining_pairs(
    persona_pairs: &[DialoguePair],
    general_records: &[GeneralRecord],
    bundles: &[DatasetBundle],
) -> Vec<DialoguePair> {
    let selected: BTreeSet<&str> = bundles.iter().map(|b| b.persona_id.as_str()).collect();
    let held_out: BTreeSet<(&str, &str)> = bundles
        .iter()
        .flat_map(|b| b.general_eval.iter().chain(&b.persona_eval))
        .map(|p| (p.utterance.as_str(), p.response.as_str()))
        .collect();
    let persona = persona_pairs
        .iter()
        .filter(|p| p.persona_id.as_deref().is_some_and(|id| !selected.contains(id)))
        .cloned();
    let general = general_records.iter().flat_map(|r| r.turns.windows(2)).map(|w| DialoguePair {
        utterance: w[0].clone(),
        response: w[1].clone(),
        persona_id: None,
        source: Source::GeneralCorpus,
    });
    let out: Vec<DialoguePair> = persona
        .chain(general)
        .filter(|p| !held_out.contains(&(p.utterance.as_str(), p.response.as_str())))
        .collect();
    dedup_pairs(out)
}

#[cfg(test)]
mod tests;
