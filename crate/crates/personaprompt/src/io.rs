//! File plumbing: atomic writes, JSON Lines with line-numbered errors, JSON
//! documents and the vocabulary file.

use std::fs;
use std::io::Write;
use std::path::Path;

use personaprompt_core::tokenizer::Vocab;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the destination directory, so readers
/// see either the old file or the complete new one.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// One record per non-blank line. Errors name the 1-based line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    parse_jsonl(&read_text(path)?, path)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(records))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_atomic(path, &to_json(value))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// One word per line; line `n` (0-based) holds id `n + 5`. Specials are
/// implicit and never written.
pub fn vocab_to_text(vocab: &Vocab) -> String {
    let mut out = String::new();
    for w in vocab.words() {
        out.push_str(w);
        out.push('\n');
    }
    out
}

pub fn parse_vocab(text: &str, path: &Path) -> Result<Vocab> {
    let words: Vec<&str> = text.lines().collect();
    if let Some(i) = words.iter().position(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: "vocabulary entries must be single non-empty tokens".into(),
        });
    }
    Vocab::from_words(words).map_err(|e| Error::Schema { path: path.to_path_buf(), line: 0, message: e.to_string() })
}

pub fn read_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    parse_vocab(&read_text(path)?, path)
}

pub fn write_vocab(path: impl AsRef<Path>, vocab: &Vocab) -> Result<()> {
    write_atomic(path, vocab_to_text(vocab).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use personaprompt_core::corpus::{DialoguePair, GeneralRecord, PretrainPair, Source};
    use personaprompt_core::tokenizer::FIRST_WORD_ID;

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let text = "{\"record_id\":\"a\",\"topic\":\"t\",\"turns\":[\"x\",\"y\"]}\n\n{\"record_id\":\"b\"}\n";
        match parse_jsonl::<GeneralRecord>(text, Path::new("g.jsonl")) {
            Err(e @ Error::Schema { line: 3, .. }) => assert_eq!(e.exit_code(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let recs = vec![GeneralRecord { record_id: "a".into(), topic: "t".into(), turns: vec!["x".into(), "y".into()] }];
        let bytes = to_jsonl(&recs);
        let back: Vec<GeneralRecord> = parse_jsonl(std::str::from_utf8(&bytes).unwrap(), Path::new("-")).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn pretrain_pairs_without_context_omit_the_field() {
        let pair = DialoguePair { utterance: "u".into(), response: "r".into(), persona_id: None, source: Source::GeneralCorpus };
        let recs = vec![PretrainPair::plain(pair.clone()), PretrainPair { context: vec!["i am x .".into()], pair }];
        let bytes = to_jsonl(&recs);
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(!text.lines().next().unwrap().contains("context"));
        let back: Vec<PretrainPair> = parse_jsonl(text, Path::new("-")).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn vocab_line_numbers_are_ids_minus_five() {
        let vocab = Vocab::from_words(["hello", "world"]).unwrap();
        let text = vocab_to_text(&vocab);
        assert_eq!(text, "hello\nworld\n");
        let back = parse_vocab(&text, Path::new("v")).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.id("world"), Some(FIRST_WORD_ID + 1));
    }

    #[test]
    fn vocab_rejects_blank_lines() {
        assert!(matches!(parse_vocab("a\n\nb\n", Path::new("v")), Err(Error::Schema { line: 2, .. })));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/f.txt");
        write_atomic(&p, b"first version").unwrap();
        write_atomic(&p, b"2").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"2");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
