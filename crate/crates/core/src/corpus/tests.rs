use super::*;
use alloc::vec;
use proptest::prelude::*;

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn record(id: &str, a: &[&str], b: &[&str], speakers: &[Speaker]) -> PersonaRecord {
    PersonaRecord {
        record_id: id.into(),
        persona_a: PersonaSentences { original: s(a), revised: vec![] },
        persona_b: PersonaSentences { original: s(b), revised: vec![] },
        turns: speakers
            .iter()
            .enumerate()
            .map(|(i, &speaker)| Turn { speaker, text: format!("{id} t{}", i + 1) })
            .collect(),
    }
}

fn pair(persona: &str) -> DialoguePair {
    DialoguePair {
        utterance: "u".into(),
        response: "r".into(),
        persona_id: Some(persona.into()),
        source: Source::PersonaCorpus,
    }
}

use Speaker::{A, B};

#[test]
fn attribution_goes_to_responder() {
    let r = record("d", &["i like cats ."], &["i am tall ."], &[A, B, A, B]);
    let pairs = extract_pairs(&r);
    let ka = persona_key(&r.persona_a.original);
    let kb = persona_key(&r.persona_b.original);
    let got: Vec<(&str, &str, &str)> = pairs
        .iter()
        .map(|p| (p.utterance.as_str(), p.response.as_str(), p.persona_id.as_deref().unwrap()))
        .collect();
    assert_eq!(
        got,
        vec![("d t1", "d t2", kb.as_str()), ("d t2", "d t3", ka.as_str()), ("d t3", "d t4", kb.as_str())]
    );
    let two = record("e", &["x"], &["y"], &[B, A]);
    assert_eq!(extract_pairs(&two).len(), 1);
}

#[test]
fn persona_key_ignores_sentence_order() {
    let a = persona_key(&s(&["one .", "two ."]));
    let b = persona_key(&s(&["two .", "one ."]));
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
    assert_ne!(a, persona_key(&s(&["one ."])));
}

#[test]
fn record_validation() {
    let ok = record("d", &["a"], &["b"], &[A, B]);
    ok.validate().unwrap();
    let short = record("d", &["a"], &["b"], &[A]);
    assert!(matches!(short.validate(), Err(Error::InvalidRecord { .. })));
    let same = record("d", &["a"], &["b"], &[A, A]);
    assert!(matches!(same.validate(), Err(Error::InvalidRecord { .. })));
    let mut blank = ok.clone();
    blank.turns[1].text = "  ".into();
    assert!(matches!(blank.validate(), Err(Error::InvalidRecord { .. })));
    let g = GeneralRecord { record_id: "g".into(), topic: "Work".into(), turns: s(&["hi"]) };
    assert!(g.validate().is_err());
}

#[test]
fn ranking_tie_break() {
    let mut pairs = Vec::new();
    for (p, n) in [("p1", 5), ("p2", 9), ("p3", 9)] {
        pairs.extend((0..n).map(|_| pair(p)));
    }
    assert_eq!(rank_personas(&pairs, 2).unwrap(), vec![("p2".to_string(), 9), ("p3".to_string(), 9)]);
    let single: Vec<_> = (0..3).map(|_| pair("only")).collect();
    assert_eq!(rank_personas(&single, 1).unwrap(), vec![("only".to_string(), 3)]);
    assert_eq!(
        rank_personas(&single, 2).unwrap_err(),
        Error::InsufficientPersonas { needed: 2, found: 1 }
    );
}

#[test]
fn ranking_matches_brute_force() {
    let counts = [7usize, 3, 12, 12, 1, 9, 4, 12, 2, 8];
    let mut pairs = Vec::new();
    for (i, &n) in counts.iter().enumerate() {
        pairs.extend((0..n).map(|_| pair(&format!("q{i}"))));
    }
    // interleave so order of appearance is not the ranking
    pairs.reverse();
    let got = rank_personas(&pairs, 10).unwrap();
    let mut brute: Vec<(String, usize)> = Vec::new();
    for i in 0..counts.len() {
        let id = format!("q{i}");
        let n = pairs.iter().filter(|p| p.persona_id.as_deref() == Some(id.as_str())).count();
        brute.push((id, n));
    }
    brute.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    assert_eq!(got, brute);
}

#[test]
fn half_even_rounding() {
    assert_eq!(round_half_even(185, 10), 18);
    assert_eq!(round_half_even(175, 10), 18);
    assert_eq!(round_half_even(186, 10), 19);
    assert_eq!(round_half_even(184, 10), 18);
    assert_eq!(round_half_even(1, 2), 0);
    assert_eq!(round_half_even(3, 2), 2);
}

#[test]
fn split_sizes() {
    let tenth = Ratio::new(1, 10).unwrap();
    let (train, eval) = split_train_eval((0..185).collect::<Vec<_>>(), tenth, 1).unwrap();
    assert_eq!((train.len(), eval.len()), (167, 18));
    let (train, eval) = split_train_eval((0..10).collect::<Vec<_>>(), tenth, 1).unwrap();
    assert_eq!((train.len(), eval.len()), (9, 1));
    assert_eq!(
        split_train_eval((0..9).collect::<Vec<_>>(), tenth, 1).unwrap_err(),
        Error::TooFewPairs { found: 9, min: 10 }
    );
    let small = Ratio::new(1, 100).unwrap();
    let (_, eval) = split_train_eval((0..20).collect::<Vec<_>>(), small, 1).unwrap();
    assert_eq!(eval.len(), 1, "eval keeps at least one item");
}

#[test]
fn split_is_seeded_and_partitions() {
    let tenth = Ratio::new(1, 10).unwrap();
    let a = split_train_eval((0..50).collect::<Vec<_>>(), tenth, 3).unwrap();
    let b = split_train_eval((0..50).collect::<Vec<_>>(), tenth, 3).unwrap();
    assert_eq!(a, b);
    let mut all: Vec<i32> = a.0.iter().chain(&a.1).copied().collect();
    all.sort();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    let c = split_train_eval((0..50).collect::<Vec<_>>(), tenth, 4).unwrap();
    assert_ne!(a.1, c.1);
}

fn general(topic: &str, turns: &[&str]) -> GeneralRecord {
    GeneralRecord { record_id: "g".into(), topic: topic.into(), turns: s(turns) }
}

#[test]
fn general_filter_boundaries() {
    let c49 = "x".repeat(49);
    let c50 = "y".repeat(50);
    let kept = filter_general(&[general("Relationship", &[&c49, &c49])], "Relationship", 50);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].source, Source::GeneralCorpus);
    assert_eq!(kept[0].persona_id, None);
    assert!(filter_general(&[general("Relationship", &[&c50, "short"])], "Relationship", 50).is_empty());
    assert!(filter_general(&[general("Work", &["hi", "hello"])], "Relationship", 50).is_empty());
    // characters, not bytes
    let wide = "é".repeat(49);
    assert_eq!(filter_general(&[general("Relationship", &[&wide, "ok"])], "Relationship", 50).len(), 1);
    // each adjacent pair is judged on its own
    let three = filter_general(&[general("Relationship", &["a", &c50, "b", "c"])], "Relationship", 50);
    assert_eq!(three.len(), 1);
    assert_eq!((three[0].utterance.as_str(), three[0].response.as_str()), ("b", "c"));
}

fn pool(n: usize) -> Vec<DialoguePair> {
    (0..n)
        .map(|i| DialoguePair {
            utterance: format!("g{i}"),
            response: format!("h{i}"),
            persona_id: None,
            source: Source::GeneralCorpus,
        })
        .collect()
}

#[test]
fn mix_counts() {
    let persona: Vec<_> = (0..166).map(|_| pair("p")).collect();
    let m = mix(&persona, &pool(400), Ratio::integer(1), 5, false).unwrap();
    assert_eq!(m.pairs.len(), 332);
    assert_eq!(m.sampled_general.len(), 166);
    let unique: BTreeSet<_> = m.sampled_general.iter().collect();
    assert_eq!(unique.len(), 166);

    let big: Vec<_> = (0..500).map(|_| pair("p")).collect();
    assert_eq!(
        mix(&big, &pool(10), Ratio::integer(10), 5, false).unwrap_err(),
        Error::InsufficientGeneralPairs { needed: 5000, available: 10 }
    );
    let m = mix(&big, &pool(5000), Ratio::integer(10), 5, false).unwrap();
    assert_eq!(m.sampled_general.len(), 5000);
    let with = mix(&big, &pool(10), Ratio::integer(10), 5, true).unwrap();
    assert_eq!(with.pairs.len(), 5500);

    let zero = mix(&persona[..20], &pool(3), Ratio::integer(0), 5, false).unwrap();
    assert_eq!(zero.pairs.len(), 20);
    assert!(zero.sampled_general.is_empty());
}

#[test]
fn ratio_parsing() {
    assert_eq!("1/10".parse::<Ratio>().unwrap(), Ratio::new(1, 10).unwrap());
    assert_eq!("0.1".parse::<Ratio>().unwrap(), Ratio::new(1, 10).unwrap());
    assert_eq!("10".parse::<Ratio>().unwrap(), Ratio::integer(10));
    assert_eq!("2/4".parse::<Ratio>().unwrap().to_string(), "1/2");
    for bad in ["", "1/0", "a", "1.", "-1", "1.x"] {
        assert!(bad.parse::<Ratio>().is_err(), "{bad:?}");
    }
    assert_eq!(Ratio::new(1, 10).unwrap().apply(185), 18);
}

/// Synthetic corpora: `n_personas` personas with distinct pair counts plus a
/// general corpus of `n_general` short Relationship pairs.
fn fixture(n_personas: usize, n_general: usize) -> (Vec<PersonaRecord>, Vec<GeneralRecord>) {
    let mut records = Vec::new();
    for p in 0..n_personas {
        // persona p talks to persona (p + 1) % n in (p + 2) dialogues
        for d in 0..(p + 2) {
            let a = [format!("i am persona {p} ."), format!("my number is {p} .")];
            let q = (p + 1) % n_personas;
            let b = [format!("i am persona {q} ."), format!("my number is {q} .")];
            records.push(PersonaRecord {
                record_id: format!("{p}-{d}"),
                persona_a: PersonaSentences { original: a.to_vec(), revised: vec![format!("rev {p}")] },
                persona_b: PersonaSentences { original: b.to_vec(), revised: vec![] },
                turns: (0..6)
                    .map(|i| Turn {
                        speaker: if i % 2 == 0 { A } else { B },
                        text: format!("p{p} d{d} turn {i}"),
                    })
                    .collect(),
            });
        }
    }
    let general = (0..n_general)
        .map(|i| GeneralRecord {
            record_id: format!("g{i}"),
            topic: if i % 7 == 0 { "Work".into() } else { "Relationship".into() },
            turns: vec![format!("hello {i}"), format!("hi there {i}")],
        })
        .collect();
    (records, general)
}

#[test]
fn bundle_invariants_on_fixture() {
    let (personas, general) = fixture(12, 2_000);
    let config = PipelineConfig { general_eval_size: 50, ..PipelineConfig::default() };
    let prepared = PreparedCorpora::new(&personas, &general, &config).unwrap();
    let counts = count_by_persona(&prepared.persona_pairs);
    for rank in 1..=3 {
        let b = prepared.bundle(rank, &config).unwrap();
        let n = counts[&b.persona_id];
        assert_eq!(b.counts.persona_pairs, n);
        assert_eq!(b.counts.persona_eval, Ratio::new(1, 10).unwrap().apply(n).max(1));
        assert_eq!(b.counts.persona_train + b.counts.persona_eval, n);
        assert_eq!(b.counts.general_train, b.counts.persona_train);
        assert_eq!(b.train.len(), 2 * b.counts.persona_train);
        assert_eq!(b.general_eval.len(), 50);
        let train: BTreeSet<_> = b.train.iter().map(|p| (&p.utterance, &p.response)).collect();
        assert!(b.persona_eval.iter().all(|p| !train.contains(&(&p.utterance, &p.response))));
        assert!(b.general_eval.iter().all(|p| !train.contains(&(&p.utterance, &p.response))));
        assert!(b.general_eval.iter().all(|p| p.source == Source::GeneralCorpus));
        assert!(b.persona_eval.iter().all(|p| p.persona_id.as_deref() == Some(b.persona_id.as_str())));
        assert_eq!(persona_key(&b.persona_sentences), b.persona_id);
        assert_eq!(b.provenance.persona_rank, rank);
        assert_eq!(prepared.bundle(rank, &config).unwrap(), b);
    }
    assert_ne!(prepared.bundle(1, &config).unwrap().persona_id, prepared.bundle(2, &config).unwrap().persona_id);
}

#[test]
fn fixture_counts_match_brute_force() {
    let (personas, general) = fixture(12, 100);
    let config = PipelineConfig { general_eval_size: 5, ..PipelineConfig::default() };
    let prepared = PreparedCorpora::new(&personas, &general, &config).unwrap();
    // Responders at odd turns are B, at even turns (>0) A: 3 + 2 pairs per dialogue.
    let mut brute: BTreeMap<String, usize> = BTreeMap::new();
    for r in &personas {
        for i in 1..r.turns.len() {
            let who = r.persona(r.turns[i].speaker);
            *brute.entry(persona_key(&who.original)).or_insert(0) += 1;
        }
    }
    assert_eq!(count_by_persona(&prepared.persona_pairs), brute);
    let expected_pool = (0..100).filter(|i| i % 7 != 0).count();
    assert_eq!(prepared.general_pool.len(), expected_pool);
}

#[test]
fn eval_size_larger_than_pool_is_reported() {
    let (personas, general) = fixture(4, 30);
    let config = PipelineConfig::default();
    let err = build_bundle(&personas, &general, 1, &config).unwrap_err();
    assert!(matches!(err, Error::InsufficientGeneralPairs { .. }), "{err:?}");
}

#[test]
fn pretraining_pairs_exclude_held_out() {
    let (personas, general) = fixture(6, 200);
    let config = PipelineConfig { general_eval_size: 20, k_personas: 2, ..PipelineConfig::default() };
    let prepared = PreparedCorpora::new(&personas, &general, &config).unwrap();
    let bundles: Vec<_> = (1..=2).map(|r| prepared.bundle(r, &config).unwrap()).collect();
    let pre = pretraining_pairs(&prepared.persona_pairs, &general, &bundles);
    let held: BTreeSet<_> = bundles
        .iter()
        .flat_map(|b| b.general_eval.iter().chain(&b.persona_eval))
        .map(|p| (p.utterance.clone(), p.response.clone()))
        .collect();
    assert!(pre.iter().all(|p| !held.contains(&(p.utterance.clone(), p.response.clone()))));
    for b in &bundles {
        assert!(pre.iter().all(|p| p.persona_id.as_deref() != Some(b.persona_id.as_str())));
    }
    assert!(pre.iter().any(|p| p.source == Source::PersonaCorpus));
    let held_general = held.iter().filter(|(u, _)| u.starts_with("hello")).count();
    assert!(held_general >= 20);
    assert_eq!(pre.iter().filter(|p| p.source == Source::GeneralCorpus).count(), 200 - held_general);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_invariants(n in 10usize..400, den in 2u64..20, seed in any::<u64>()) {
        let frac = Ratio::new(1, den).unwrap();
        let (train, eval) = split_train_eval((0..n).collect::<Vec<_>>(), frac, seed).unwrap();
        prop_assert_eq!(eval.len(), frac.apply(n).max(1));
        prop_assert_eq!(train.len() + eval.len(), n);
        let t: BTreeSet<_> = train.iter().collect();
        prop_assert!(eval.iter().all(|e| !t.contains(e)));
    }

    #[test]
    fn mix_count_is_rounded_half_even(n in 0usize..200, num in 0u64..30, den in 1u64..8, seed in any::<u64>()) {
        let ratio = Ratio::new(num, den).unwrap();
        let persona: Vec<_> = (0..n).map(|_| pair("p")).collect();
        let needed = round_half_even(n as u128 * num as u128, den as u128) as usize;
        let m = mix(&persona, &pool(needed + 3), ratio, seed, false).unwrap();
        prop_assert_eq!(m.sampled_general.len(), needed);
        prop_assert_eq!(m.pairs.len(), n + needed);
    }
}

#[test]
fn pretraining_corpus_adds_one_context_copy_per_persona_pair() {
    let (personas, general) = fixture(6, 200);
    let config = PipelineConfig { general_eval_size: 20, k_personas: 2, ..PipelineConfig::default() };
    let prepared = PreparedCorpora::new(&personas, &general, &config).unwrap();
    let bundles: Vec<_> = (1..=2).map(|r| prepared.bundle(r, &config).unwrap()).collect();
    let plain = pretraining_pairs(&prepared.persona_pairs, &general, &bundles);
    let corpus = prepared.pretraining_corpus(&general, &bundles);
    let persona = plain.iter().filter(|p| p.persona_id.is_some()).count();
    assert_eq!(corpus.len(), plain.len() + persona);
    for c in corpus.iter().filter(|c| !c.context.is_empty()) {
        assert_eq!(persona_key(&c.context), *c.pair.persona_id.as_ref().unwrap());
    }
}
