//! A small generated world in the canonical corpus schema.
//!
//! Personas fix one value for each of five slots (food, pet, hobby, color,
//! job). In persona dialogues every turn answers the partner's last question
//! with the speaker's own value, then asks about another slot, so every
//! persona response names a slot value. General dialogues are chit-chat from
//! a disjoint word pool. The persona with the most dialogues always takes the
//! last value of each slot; those five words are its markers. A few personas
//! outside the top three also hold markers, so a base model pretrained on
//! the remaining personas knows the words but rarely prefers them.

use personaprompt_core::corpus::{GeneralRecord, PersonaRecord, PersonaSentences, Speaker, Turn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::io::write_jsonl;

struct Slot {
    question: &'static str,
    answer: &'static str,
    sentence: &'static str,
    values: [&'static str; 8],
}

const SLOTS: [Slot; 5] = [
    Slot {
        question: "what do you like to eat ?",
        answer: "i like to eat {} .",
        sentence: "i love eating {} .",
        values: ["pizza", "pasta", "sushi", "tacos", "salad", "curry", "soup", "steak"],
    },
    Slot {
        question: "do you have any pets ?",
        answer: "yes , i have a {} .",
        sentence: "i have a pet {} .",
        values: ["dog", "cat", "parrot", "hamster", "rabbit", "turtle", "ferret", "goldfish"],
    },
    Slot {
        question: "what do you do for fun ?",
        answer: "i enjoy {} a lot .",
        sentence: "my hobby is {} .",
        values: ["hiking", "painting", "reading", "gaming", "dancing", "fishing", "surfing", "knitting"],
    },
    Slot {
        question: "what is your favorite color ?",
        answer: "i really like {} .",
        sentence: "my favorite color is {} .",
        values: ["red", "blue", "green", "purple", "orange", "yellow", "black", "pink"],
    },
    Slot {
        question: "what do you do for work ?",
        answer: "i work as a {} .",
        sentence: "i am a {} .",
        values: ["teacher", "nurse", "chef", "pilot", "farmer", "lawyer", "baker", "doctor"],
    },
];

/// Value indices handed out, cyclically, to the personas other than the top
/// one. Index 7 (the top persona's marker) is a minority answer; index 0 is
/// always the most common one.
const VALUE_SCHEDULE: [usize; 11] = [0, 0, 0, 0, 7, 1, 2, 3, 4, 5, 6];
const MARKER: usize = 7;
/// The runner-up personas, which also get bundles and are therefore left out
/// of pretraining, never take a marker.
const RESERVED: usize = 2;

const TOPICS: [&str; 3] = ["Relationship", "Work", "Ordinary Life"];
const GREETINGS: [&str; 5] = ["hi", "hello", "hey", "good morning", "good evening"];
const FEELINGS: [&str; 8] = ["fine", "great", "tired", "happy", "busy", "okay", "sad", "excited"];
const TIMES: [&str; 7] = ["day", "week", "weekend", "morning", "evening", "trip", "holiday"];
const PEOPLE: [&str; 9] = ["mom", "dad", "sister", "brother", "friend", "boss", "neighbor", "wife", "husband"];
const ACTIONS: [&str; 6] = ["call", "visit", "meet", "help", "thank", "invite"];
const PLACES: [&str; 6] = ["home", "the office", "the park", "the station", "town", "the mall"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldConfig {
    pub n_personas: usize,
    /// Dialogues for the top persona; each next persona gets `dialogue_step`
    /// fewer, but at least 2.
    pub max_dialogues: usize,
    pub dialogue_step: usize,
    /// Turns per persona dialogue.
    pub turns: usize,
    /// Total adjacent-turn pairs in the general corpus.
    pub general_pairs: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_personas: 12,
            max_dialogues: 24,
            dialogue_step: 2,
            turns: 7,
            general_pairs: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub persona_records: Vec<PersonaRecord>,
    pub general_records: Vec<GeneralRecord>,
    /// Slot values per persona, in slot order; index 0 is the top persona.
    pub persona_values: Vec<[String; 5]>,
}

/// Fewer personas than this cannot all get distinct value sets from the
/// schedule.
pub const MIN_PERSONAS: usize = 8;

impl World {
    /// Panics if `config.n_personas` is below [`MIN_PERSONAS`].
    pub fn generate(config: &WorldConfig) -> Self {
        assert!(
            config.n_personas >= MIN_PERSONAS,
            "a synthetic world needs at least {MIN_PERSONAS} personas, got {}",
            config.n_personas
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let persona_values = persona_values(config.n_personas, &mut rng);
        let persona_records = persona_dialogues(config, &persona_values, &mut rng);
        let general_records = general_dialogues(config.general_pairs, &mut rng);
        Self { persona_records, general_records, persona_values }
    }

    /// The top persona's five marker words.
    pub fn markers(&self) -> Vec<String> {
        SLOTS.iter().map(|s| s.values[MARKER].to_string()).collect()
    }

    /// Original persona sentences for persona `index`.
    pub fn sentences(&self, index: usize) -> Vec<String> {
        sentences(&self.persona_values[index])
    }

    /// Writes `persona.jsonl` and `general.jsonl` into `dir` and returns
    /// their paths.
    pub fn write_corpora(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let persona = dir.join("persona.jsonl");
        let general = dir.join("general.jsonl");
        write_jsonl(&persona, &self.persona_records)?;
        write_jsonl(&general, &self.general_records)?;
        Ok((persona, general))
    }

    /// Every word the world can produce.
    pub fn words() -> Vec<String> {
        let mut text = String::new();
        for s in &SLOTS {
            for part in [s.question, s.answer, s.sentence] {
                text.push_str(&part.replace("{}", " "));
                text.push(' ');
            }
            text.push_str(&s.values.join(" "));
            text.push(' ');
        }
        for line in general_vocabulary() {
            text.push_str(&line);
            text.push(' ');
        }
        let mut words: Vec<String> = text.split_whitespace().map(String::from).collect();
        words.sort();
        words.dedup();
        words
    }
}

fn fill(template: &str, value: &str) -> String {
    template.replace("{}", value)
}

fn sentences(values: &[String; 5]) -> Vec<String> {
    SLOTS.iter().zip(values).map(|(s, v)| fill(s.sentence, v)).collect()
}

fn persona_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<[String; 5]> {
    let top: [String; 5] = core::array::from_fn(|i| SLOTS[i].values[MARKER].to_string());
    let others = n.saturating_sub(1);
    let mut columns: Vec<Vec<usize>> = (0..SLOTS.len())
        .map(|_| (0..others).map(|j| VALUE_SCHEDULE[j % VALUE_SCHEDULE.len()]).collect())
        .collect();
    loop {
        for c in &mut columns {
            c.shuffle(rng);
            if c.len() > RESERVED {
                // Move markers out of the reserved slots.
                for r in 0..RESERVED {
                    if c[r] == MARKER {
                        let j = (RESERVED..c.len()).find(|&j| c[j] != MARKER).expect("schedule has non-markers");
                        c.swap(r, j);
                    }
                }
            }
        }
        let mut out = vec![top.clone()];
        for j in 0..others {
            out.push(core::array::from_fn(|i| SLOTS[i].values[columns[i][j]].to_string()));
        }
        // Distinct value sets keep persona identities distinct.
        let mut keys: Vec<&[String; 5]> = out.iter().collect();
        keys.sort();
        keys.dedup();
        if keys.len() == out.len() {
            return out;
        }
    }
}

fn persona_dialogues(config: &WorldConfig, values: &[[String; 5]], rng: &mut ChaCha8Rng) -> Vec<PersonaRecord> {
    let mut remaining: Vec<usize> = (0..values.len())
        .map(|i| config.max_dialogues.saturating_sub(i * config.dialogue_step).max(2))
        .collect();
    let mut records = Vec::new();
    loop {
        // The two personas with the most dialogues left, lowest index first.
        let mut order: Vec<usize> = (0..values.len()).filter(|&i| remaining[i] > 0).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(remaining[i]), i));
        let (a, b) = match order.as_slice() {
            [a, b, ..] => (*a, *b),
            [a] => (*a, (*a + 1 + rng.random_range(0..values.len() - 1)) % values.len()),
            [] => break,
        };
        remaining[a] -= 1;
        remaining[b] = remaining[b].saturating_sub(1);
        let (a, b) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        records.push(dialogue(records.len(), &values[a], &values[b], config.turns, rng));
    }
    records
}

fn dialogue(id: usize, a: &[String; 5], b: &[String; 5], turns: usize, rng: &mut ChaCha8Rng) -> PersonaRecord {
    let mut asked = rng.random_range(0..SLOTS.len());
    let mut out = vec![Turn {
        speaker: Speaker::A,
        text: format!("{} ! {}", GREETINGS.choose(rng).unwrap(), SLOTS[asked].question),
    }];
    for t in 1..turns {
        let speaker = if t % 2 == 1 { Speaker::B } else { Speaker::A };
        let own = if speaker == Speaker::A { a } else { b };
        let answer = fill(SLOTS[asked].answer, &own[asked]);
        let text = if t + 1 == turns {
            format!("{answer} nice talking to you .")
        } else {
            asked = (asked + 1 + rng.random_range(0..SLOTS.len() - 1)) % SLOTS.len();
            format!("{answer} {}", SLOTS[asked].question)
        };
        out.push(Turn { speaker, text });
    }
    let persona = |v: &[String; 5]| PersonaSentences { original: sentences(v), revised: Vec::new() };
    PersonaRecord {
        record_id: format!("persona-{id:04}"),
        persona_a: persona(a),
        persona_b: persona(b),
        turns: out,
    }
}

fn general_line(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..8) {
        0 => format!("{} , how are you ?", GREETINGS.choose(rng).unwrap()),
        1 => format!("i am {} , thanks .", FEELINGS.choose(rng).unwrap()),
        2 => format!("how was your {} ?", TIMES.choose(rng).unwrap()),
        3 => format!("it was {} .", FEELINGS.choose(rng).unwrap()),
        4 => format!("did you {} your {} ?", ACTIONS.choose(rng).unwrap(), PEOPLE.choose(rng).unwrap()),
        5 => format!("i will {} my {} tomorrow .", ACTIONS.choose(rng).unwrap(), PEOPLE.choose(rng).unwrap()),
        6 => format!("are you going to {} ?", PLACES.choose(rng).unwrap()),
        _ => format!("my {} is at {} .", PEOPLE.choose(rng).unwrap(), PLACES.choose(rng).unwrap()),
    }
}

fn general_vocabulary() -> Vec<String> {
    let fixed = [
        "! , how are you ?",
        "nice talking to you .",
        "i am , thanks .",
        "how was your ?",
        "it was .",
        "did you your ?",
        "i will my tomorrow .",
        "are you going to ?",
        "my is at .",
        "so i can not wait to see you , please come over soon because we miss you",
    ];
    let pools: [&[&str]; 6] = [&GREETINGS, &FEELINGS, &TIMES, &PEOPLE, &ACTIONS, &PLACES];
    fixed
        .iter()
        .map(|s| s.to_string())
        .chain(pools.iter().map(|p| p.join(" ")))
        .collect()
}

fn general_dialogues(total_pairs: usize, rng: &mut ChaCha8Rng) -> Vec<GeneralRecord> {
    let mut records = Vec::new();
    let mut pairs = 0;
    while pairs < total_pairs {
        let n_turns = rng.random_range(3..7).min(total_pairs - pairs + 1);
        let mut turns: Vec<String> = (0..n_turns).map(|_| general_line(&mut *rng)).collect();
        // An occasional long turn exercises the length filter.
        if rng.random_range(0..10) == 0 {
            turns[0] = format!("{} so i can not wait to see you , please come over soon because we miss you", turns[0]);
        }
        let topic = TOPICS[if rng.random_range(0..10) < 7 { 0 } else { rng.random_range(1..TOPICS.len()) }];
        records.push(GeneralRecord {
            record_id: format!("general-{:05}", records.len()),
            topic: topic.to_string(),
            turns,
        });
        pairs += n_turns - 1;
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use personaprompt_core::corpus::{count_by_persona, extract_pairs, persona_key, rank_personas};
    use personaprompt_core::tokenizer::Vocab;

    #[test]
    fn generation_is_deterministic() {
        let a = World::generate(&WorldConfig::default());
        let b = World::generate(&WorldConfig::default());
        assert_eq!(a.persona_records, b.persona_records);
        assert_eq!(a.general_records, b.general_records);
        let c = World::generate(&WorldConfig { seed: 1, ..WorldConfig::default() });
        assert_ne!(a.persona_records, c.persona_records);
    }

    #[test]
    fn fixture_sizes() {
        let w = World::generate(&WorldConfig::default());
        let general: usize = w.general_records.iter().map(|r| r.turns.len() - 1).sum();
        assert_eq!(general, 2000);
        let pairs: Vec<_> = w.persona_records.iter().flat_map(extract_pairs).collect();
        assert_eq!(count_by_persona(&pairs).len(), 12);
        for r in &w.persona_records {
            r.validate().unwrap();
        }
        for r in &w.general_records {
            r.validate().unwrap();
        }
    }

    #[test]
    fn top_persona_is_the_marker_persona() {
        let w = World::generate(&WorldConfig::default());
        let pairs: Vec<_> = w.persona_records.iter().flat_map(extract_pairs).collect();
        let ranked = rank_personas(&pairs, 3).unwrap();
        assert_eq!(ranked[0].0, persona_key(&w.sentences(0)));
        assert!(ranked[0].1 > ranked[1].1);
        let markers = w.markers();
        for p in pairs.iter().filter(|p| p.persona_id.as_deref() == Some(ranked[0].0.as_str())) {
            assert!(p.response.split_whitespace().any(|t| markers.iter().any(|m| m == t)), "{}", p.response);
        }
        for r in &w.general_records {
            for t in &r.turns {
                assert!(!t.split_whitespace().any(|t| markers.iter().any(|m| m == t)));
            }
        }
    }

    #[test]
    fn markers_are_minority_answers_outside_the_top_three() {
        let w = World::generate(&WorldConfig::default());
        let markers = w.markers();
        for (slot, marker) in markers.iter().enumerate() {
            let holders: Vec<usize> = (0..12).filter(|&i| &w.persona_values[i][slot] == marker).collect();
            assert_eq!(holders[0], 0);
            assert!(holders[1..].iter().all(|&i| i >= 3), "{holders:?}");
            assert_eq!(holders.len(), 2);
            let common = SLOTS[slot].values[0];
            assert_eq!(w.persona_values.iter().filter(|v| v[slot] == common).count(), 4);
        }
    }

    #[test]
    fn every_word_is_known() {
        let w = World::generate(&WorldConfig::default());
        let vocab = Vocab::from_words(World::words()).unwrap();
        let texts = w
            .persona_records
            .iter()
            .flat_map(|r| r.turns.iter().map(|t| t.text.clone()).chain(r.persona_a.original.clone()))
            .chain(w.general_records.iter().flat_map(|r| r.turns.clone()));
        for t in texts {
            assert!(!vocab.encode(&t).contains(&personaprompt_core::tokenizer::UNK), "{t}");
        }
    }
}
