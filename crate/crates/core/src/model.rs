//! Pre-norm GPT-style causal decoder.
//!
//! The forward pass consumes embedding rows rather than token ids, so callers
//! can put a soft prompt in front of the looked-up token embeddings. Position
//! embeddings are added inside [`DecoderLM::forward`] for absolute positions
//! `0..S`; a prepended prompt therefore occupies positions `0..L`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{seeded, Stream};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub tie_output_to_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 8000,
            max_seq: 360,
            tie_output_to_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], T::one()),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// One transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNormParams<T>,
    /// `d × 3d`, columns laid out as `[q | k | v]`.
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub ln2: LayerNormParams<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

const BLOCK_PARAMS: usize = 12;
const BLOCK_NAMES: [&str; BLOCK_PARAMS] = [
    "ln1.gamma", "ln1.beta", "attn.w_qkv", "attn.b_qkv", "attn.w_out", "attn.b_out",
    "ln2.gamma", "ln2.beta", "mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj",
];

impl<T: Real> Block<T> {
    fn tensors(&self) -> [&Tensor<T>; BLOCK_PARAMS] {
        [
            &self.ln1.gamma, &self.ln1.beta, &self.w_qkv, &self.b_qkv, &self.w_out, &self.b_out,
            &self.ln2.gamma, &self.ln2.beta, &self.w_fc, &self.b_fc, &self.w_proj, &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; BLOCK_PARAMS] {
        [
            &mut self.ln1.gamma, &mut self.ln1.beta, &mut self.w_qkv, &mut self.b_qkv,
            &mut self.w_out, &mut self.b_out, &mut self.ln2.gamma, &mut self.ln2.beta,
            &mut self.w_fc, &mut self.b_fc, &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLM<T> {
    pub config: ModelConfig,
    /// `vocab_size × d_model`; doubles as the output projection when tied.
    pub token_embedding: Tensor<T>,
    /// `max_seq × d_model`
    pub position_embedding: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNormParams<T>,
    /// Separate `vocab_size × d_model` output projection when untied.
    pub lm_head: Option<Tensor<T>>,
    frozen: bool,
}

/// Tape handles for every parameter of a bound model, in
/// [`DecoderLM::parameters`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    params: Vec<Var>,
}

impl ModelVars {
    pub fn all(&self) -> &[Var] {
        &self.params
    }

    pub fn token_embedding(&self) -> Var {
        self.params[0]
    }

    fn position_embedding(&self) -> Var {
        self.params[1]
    }

    fn block(&self, layer: usize) -> &[Var] {
        let start = 2 + layer * BLOCK_PARAMS;
        &self.params[start..start + BLOCK_PARAMS]
    }
}

impl<T: Real> DecoderLM<T> {
    /// Seeded initialization; every parameter starts trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, Stream::ModelInit);
        let ModelConfig { n_layer, d_model: d, d_ff, vocab_size, max_seq, .. } = config;
        let resid_std = INIT_STD / libm_sqrt(2.0 * n_layer as f64);
        let token_embedding = Tensor::randn(&[vocab_size, d], INIT_STD, &mut rng);
        let position_embedding = Tensor::randn(&[max_seq, d], INIT_STD, &mut rng);
        let blocks = (0..n_layer)
            .map(|_| Block {
                ln1: LayerNormParams::new(d),
                w_qkv: Tensor::randn(&[d, 3 * d], INIT_STD, &mut rng),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_out: Tensor::randn(&[d, d], resid_std, &mut rng),
                b_out: Tensor::zeros(&[d]),
                ln2: LayerNormParams::new(d),
                w_fc: Tensor::randn(&[d, d_ff], INIT_STD, &mut rng),
                b_fc: Tensor::zeros(&[d_ff]),
                w_proj: Tensor::randn(&[d_ff, d], resid_std, &mut rng),
                b_proj: Tensor::zeros(&[d]),
            })
            .collect();
        let lm_head = if config.tie_output_to_embedding {
            None
        } else {
            Some(Tensor::randn(&[vocab_size, d], INIT_STD, &mut rng))
        };
        let mut model = Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_norm: LayerNormParams::new(d),
            lm_head,
            frozen: false,
        };
        model.unfreeze();
        Ok(model)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter non-trainable and drops gradient buffers.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for p in self.parameters_mut() {
            p.set_trainable(false);
        }
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        for p in self.parameters_mut() {
            p.set_trainable(true);
        }
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(4 + self.blocks.len() * BLOCK_PARAMS);
        names.push("token_embedding".into());
        names.push("position_embedding".into());
        for i in 0..self.blocks.len() {
            for n in BLOCK_NAMES {
                names.push(format!("blocks.{i}.{n}"));
            }
        }
        names.push("final_norm.gamma".into());
        names.push("final_norm.beta".into());
        if self.lm_head.is_some() {
            names.push("lm_head".into());
        }
        names
    }

    /// Every parameter in a fixed order. A tied output projection is the
    /// token embedding and is listed once.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::with_capacity(4 + self.blocks.len() * BLOCK_PARAMS);
        out.push(&self.token_embedding);
        out.push(&self.position_embedding);
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm.gamma);
        out.push(&self.final_norm.beta);
        if let Some(h) = &self.lm_head {
            out.push(h);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(4 + self.blocks.len() * BLOCK_PARAMS);
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        if let Some(h) = &mut self.lm_head {
            out.push(h);
        }
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.parameter_names().into_iter().zip(self.parameters()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.parameters().iter().filter(|p| p.trainable()).map(|p| p.numel()).sum()
    }

    /// Rebuilds a model from tensors listed in [`Self::parameter_names`] order.
    pub fn from_parameters(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(config);
        let names = model.parameter_names();
        if names.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((want, slot), (name, t)) in names.iter().zip(model.parameters_mut()).zip(tensors) {
            if *want != name {
                return Err(Error::Shape(format!("expected tensor {want:?}, found {name:?}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name:?} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if frozen {
            model.freeze();
        } else {
            model.unfreeze();
        }
        Ok(model)
    }

    fn zeros(config: ModelConfig) -> Self {
        let ModelConfig { n_layer, d_model: d, d_ff, vocab_size, max_seq, .. } = config;
        Self {
            config,
            token_embedding: Tensor::zeros(&[vocab_size, d]),
            position_embedding: Tensor::zeros(&[max_seq, d]),
            blocks: (0..n_layer)
                .map(|_| Block {
                    ln1: LayerNormParams::new(d),
                    w_qkv: Tensor::zeros(&[d, 3 * d]),
                    b_qkv: Tensor::zeros(&[3 * d]),
                    w_out: Tensor::zeros(&[d, d]),
                    b_out: Tensor::zeros(&[d]),
                    ln2: LayerNormParams::new(d),
                    w_fc: Tensor::zeros(&[d, d_ff]),
                    b_fc: Tensor::zeros(&[d_ff]),
                    w_proj: Tensor::zeros(&[d_ff, d]),
                    b_proj: Tensor::zeros(&[d]),
                })
                .collect(),
            final_norm: LayerNormParams::new(d),
            lm_head: (!config.tie_output_to_embedding).then(|| Tensor::zeros(&[vocab_size, d])),
            frozen: false,
        }
    }

    /// Same weights in another precision, with the same trainable flags.
    pub fn cast<U: Real>(&self) -> DecoderLM<U> {
        let mut out = DecoderLM::<U>::zeros(self.config);
        for (dst, src) in out.parameters_mut().into_iter().zip(self.parameters()) {
            *dst = src.cast();
        }
        out.frozen = self.frozen;
        out
    }

    /// Registers every parameter on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Result<ModelVars> {
        let params = self.parameters().into_iter().map(|p| tape.leaf(p)).collect::<Result<_>>()?;
        Ok(ModelVars { params })
    }

    /// Token-embedding rows for `ids`, without position embeddings.
    pub fn embed_tokens(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(vars.token_embedding(), ids)
    }

    /// Final-layer-norm hidden states for `S × d_model` input embeddings.
    pub fn hidden_states(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, input: Var) -> Result<Var> {
        let (s, d) = tape.shape(input);
        if d != self.config.d_model {
            return Err(Error::dims("forward", &[s, d], &[self.config.max_seq, self.config.d_model]));
        }
        if s > self.config.max_seq {
            return Err(Error::SequenceLength { len: s, max: self.config.max_seq, context: None });
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let pos = tape.slice_rows(vars.position_embedding(), 0, s)?;
        let mut x = tape.add(input, pos)?;
        for layer in 0..self.blocks.len() {
            let p = vars.block(layer);
            let h = tape.layer_norm(x, p[0], p[1], eps)?;
            let qkv = tape.matmul(h, p[2])?;
            let qkv = tape.add_row(qkv, p[3])?;
            let a = tape.causal_attention(qkv, self.config.n_head)?;
            let a = tape.matmul(a, p[4])?;
            let a = tape.add_row(a, p[5])?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, p[6], p[7], eps)?;
            let f = tape.matmul(h, p[8])?;
            let f = tape.add_row(f, p[9])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p[10])?;
            let f = tape.add_row(f, p[11])?;
            x = tape.add(x, f)?;
        }
        let n = vars.params.len();
        let (g, b) = if self.lm_head.is_some() {
            (vars.params[n - 3], vars.params[n - 2])
        } else {
            (vars.params[n - 2], vars.params[n - 1])
        };
        tape.layer_norm(x, g, b, eps)
    }

    /// Output projection of hidden rows to vocabulary logits.
    pub fn project(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, hidden: Var) -> Result<Var> {
        let head = if self.lm_head.is_some() {
            *vars.params.last().expect("untied model has an lm_head var")
        } else {
            vars.token_embedding()
        };
        tape.matmul_bt(hidden, head)
    }

    /// `S × vocab_size` logits for `S × d_model` input embeddings.
    pub fn forward(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, input: Var) -> Result<Var> {
        let h = self.hidden_states(tape, vars, input)?;
        self.project(tape, vars, h)
    }

    /// Untaped convenience: logits for a token-id sequence.
    pub fn logits_for_ids(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let x = self.embed_tokens(&mut tape, &vars, ids)?;
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.to_tensor(y))
    }

    /// Adds the gradients in `grads` into every trainable parameter.
    pub fn accumulate_grads(&mut self, vars: &ModelVars, grads: &Gradients<T>) -> Result<()> {
        for (p, &v) in self.parameters_mut().into_iter().zip(&vars.params) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[cfg(test)]
mod tests;
