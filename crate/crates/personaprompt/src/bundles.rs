//! On-disk dataset bundles: one directory per persona rank holding
//! `train.jsonl`, `persona_eval.jsonl`, `general_eval.jsonl` and
//! `manifest.json`.

use std::path::{Path, PathBuf};

use personaprompt_core::corpus::{BundleCounts, DatasetBundle, DialoguePair, Provenance};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, to_json, to_jsonl, write_atomic};

pub const TRAIN: &str = "train.jsonl";
pub const PERSONA_EVAL: &str = "persona_eval.jsonl";
pub const GENERAL_EVAL: &str = "general_eval.jsonl";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub persona_id: String,
    pub persona_rank: usize,
    pub persona_sentences: Vec<String>,
    pub revised_persona_sentences: Vec<String>,
    pub provenance: Provenance,
    pub counts: BundleCounts,
}

pub fn rank_dir(root: &Path, rank: usize) -> PathBuf {
    root.join(format!("rank-{rank}"))
}

/// File name and contents for every file of `bundle`.
pub fn bundle_files(bundle: &DatasetBundle) -> Vec<(&'static str, Vec<u8>)> {
    let manifest = Manifest {
        persona_id: bundle.persona_id.clone(),
        persona_rank: bundle.provenance.persona_rank,
        persona_sentences: bundle.persona_sentences.clone(),
        revised_persona_sentences: bundle.revised_persona_sentences.clone(),
        provenance: bundle.provenance.clone(),
        counts: bundle.counts,
    };
    vec![
        (TRAIN, to_jsonl(&bundle.train)),
        (PERSONA_EVAL, to_jsonl(&bundle.persona_eval)),
        (GENERAL_EVAL, to_jsonl(&bundle.general_eval)),
        (MANIFEST, to_json(&manifest)),
    ]
}

pub fn write_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    for (name, bytes) in bundle_files(bundle) {
        write_atomic(dir.join(name), &bytes)?;
    }
    Ok(())
}

/// Reads a bundle back; a missing directory or manifest is a missing
/// prerequisite.
pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::missing("dataset bundle (run prepare-data)", &manifest_path));
    }
    let m: Manifest = read_json(&manifest_path)?;
    let pairs = |name: &str| -> Result<Vec<DialoguePair>> { read_jsonl(dir.join(name)) };
    let bundle = DatasetBundle {
        persona_id: m.persona_id,
        persona_sentences: m.persona_sentences,
        revised_persona_sentences: m.revised_persona_sentences,
        train: pairs(TRAIN)?,
        persona_eval: pairs(PERSONA_EVAL)?,
        general_eval: pairs(GENERAL_EVAL)?,
        provenance: m.provenance,
        counts: m.counts,
    };
    let c = &bundle.counts;
    if (bundle.train.len(), bundle.persona_eval.len(), bundle.general_eval.len()) != (c.train, c.persona_eval, c.general_eval) {
        return Err(Error::Schema {
            path: manifest_path,
            line: 0,
            message: "bundle files disagree with the manifest counts".into(),
        });
    }
    Ok(bundle)
}
