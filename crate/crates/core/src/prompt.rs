//! The persona info tokens: an `L × d_model` block of trainable embedding rows
//! placed in front of the token embeddings.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DecoderLM;
use crate::real::Real;
use crate::rng::{seeded, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const DEFAULT_PROMPT_LENGTH: usize = 200;
const RANDOM_INIT_STD: f64 = 0.02;

/// How the prompt matrix was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PromptInit {
    /// Tiled copies of the persona sentences' token embeddings.
    Persona,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonaPrompt<T> {
    matrix: Tensor<T>,
    pub persona_id: String,
    pub init_source: Vec<String>,
    pub init: PromptInit,
}

impl<T: Real> PersonaPrompt<T> {
    /// Row `r` is a copy of the token embedding of `t[r mod k]`, where
    /// `t_0..t_{k-1}` are the tokens of the space-joined sentences. When
    /// `k > length` this reduces to the first `length` tokens.
    pub fn init_from_persona(
        sentences: &[String],
        vocab: &Vocab,
        model: &DecoderLM<T>,
        length: usize,
        persona_id: impl Into<String>,
    ) -> Result<Self> {
        if length == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        let ids = vocab.encode(&sentences.join(" "));
        if ids.is_empty() {
            return Err(Error::EmptyPersona);
        }
        let table = &model.token_embedding;
        let (v, d) = table.dims2()?;
        let mut data = Vec::with_capacity(length * d);
        for r in 0..length {
            let id = ids[r % ids.len()];
            if id >= v {
                return Err(Error::Index { what: "token", index: id, bound: v });
            }
            data.extend_from_slice(table.row(id));
        }
        let matrix = Tensor::new(&[length, d], data)?.with_trainable(true);
        Ok(Self {
            matrix,
            persona_id: persona_id.into(),
            init_source: sentences.to_vec(),
            init: PromptInit::Persona,
        })
    }

    /// Entries i.i.d. `normal(0, 0.02²)` from the seeded prompt stream.
    pub fn random_init(
        length: usize,
        d_model: usize,
        seed: u64,
        persona_id: impl Into<String>,
        init_source: Vec<String>,
    ) -> Result<Self> {
        if length == 0 || d_model == 0 {
            return Err(Error::Config("prompt length and d_model must be positive".into()));
        }
        let mut rng = seeded(seed, Stream::PromptInit);
        let matrix = Tensor::randn(&[length, d_model], RANDOM_INIT_STD, &mut rng).with_trainable(true);
        Ok(Self {
            matrix,
            persona_id: persona_id.into(),
            init_source,
            init: PromptInit::Random { seed },
        })
    }

    /// Reassembles a prompt from stored parts; the matrix is made trainable.
    pub fn from_parts(matrix: Tensor<T>, persona_id: String, init_source: Vec<String>, init: PromptInit) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.numel() == 0 {
            return Err(Error::Shape(alloc::format!(
                "prompt matrix must be a non-empty 2-D tensor, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self {
            matrix: matrix.with_trainable(true),
            persona_id,
            init_source,
            init,
        })
    }

    pub fn length(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    /// Mutable access for optimizer steps. The shape cannot be changed
    /// through this handle's public API.
    pub fn matrix_mut(&mut self) -> &mut Tensor<T> {
        &mut self.matrix
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.matrix.numel()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Result<Var> {
        tape.leaf(&self.matrix)
    }

    pub fn cast<U: Real>(&self) -> PersonaPrompt<U> {
        PersonaPrompt {
            matrix: self.matrix.cast(),
            persona_id: self.persona_id.clone(),
            init_source: self.init_source.clone(),
            init: self.init,
        }
    }
}

/// `(L + T) × d` rows: the prompt first, then `tokens`.
pub fn prepend<T: Real>(tape: &mut Tape<'_, T>, prompt: Var, tokens: Var, max_seq: usize) -> Result<Var> {
    let (l, d) = tape.shape(prompt);
    let (t, dt) = tape.shape(tokens);
    if d != dt {
        return Err(Error::dims("prepend", &[l, d], &[t, dt]));
    }
    if l + t > max_seq {
        return Err(Error::SequenceLength { len: l + t, max: max_seq, context: None });
    }
    tape.concat_rows(prompt, tokens)
}
