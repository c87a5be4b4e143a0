//! Central-difference checks of tape gradients, for every differentiable op
//! and for the loss of a whole toy decoder.

use alloc::vec::Vec;

use crate::model::{DecoderLM, ModelConfig, ModelVars};
use crate::rng::{seeded, Stream};
use crate::tape::{Tape, Var};
use crate::{Real, Result, Tensor};

/// Step for central differences.
pub const H: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A trainable standard-normal tensor.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut seeded(seed, Stream::ModelInit)).with_trainable(true)
}

/// Max relative error between tape gradients and central differences of the
/// scalar that `f` builds over `inputs`. Only trainable inputs are checked.
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ts.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let Some(analytic) = grads.get(vars[i]) else { continue };
        for j in 0..t.numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += H;
            let plus = eval(&shifted)?;
            shifted[i].data_mut()[j] -= 2.0 * H;
            let minus = eval(&shifted)?;
            worst = worst.max(rel_err(analytic[j], (plus - minus) / (2.0 * H), 1e-8));
        }
    }
    Ok(worst)
}

/// Sum weighted by fixed pseudo-random constants, so the check sees a generic
/// gradient (the plain sum of a layer-norm or softmax output has none).
pub fn weighted_sum(tape: &mut Tape<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(x);
    let w = rand_tensor(&[r, c], seed).into_data();
    let wv = tape.constant(r, c, w)?;
    let p = tape.mul(x, wv)?;
    tape.sum(p)
}

/// Worst relative error of one op's gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

/// Gradient checks for every differentiable tape op, in f64.
pub fn op_suite() -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    let mut check = |op: &'static str, err: Result<f64>| -> Result<()> {
        out.push(OpCheck { op, max_rel_err: err? });
        Ok(())
    };
    check(
        "matmul",
        max_rel_error(&[rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            weighted_sum(t, c, 3)
        }),
    )?;
    check(
        "matmul_bt",
        max_rel_error(&[rand_tensor(&[3, 5], 4), rand_tensor(&[4, 5], 5)], |t, v| {
            let c = t.matmul_bt(v[0], v[1])?;
            weighted_sum(t, c, 6)
        }),
    )?;
    check(
        "add, mul",
        max_rel_error(&[rand_tensor(&[3, 4], 7), rand_tensor(&[3, 4], 8)], |t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[1])?;
            weighted_sum(t, p, 9)
        }),
    )?;
    check(
        "add_row, gelu, scale, sum",
        max_rel_error(&[rand_tensor(&[3, 4], 10), rand_tensor(&[4], 11)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.gelu(y)?;
            let y = t.scale(y, 0.7)?;
            let s = t.sum(y)?;
            let w = weighted_sum(t, y, 12)?;
            t.add(s, w)
        }),
    )?;
    check(
        "layer_norm",
        max_rel_error(&[rand_tensor(&[2, 8], 13), rand_tensor(&[8], 14), rand_tensor(&[8], 15)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 16)
        }),
    )?;
    check(
        "gather_rows, concat_rows, slice_rows, select_rows",
        max_rel_error(&[rand_tensor(&[6, 3], 17), rand_tensor(&[2, 3], 18)], |t, v| {
            let g = t.gather_rows(v[0], &[4, 1, 4])?;
            let c = t.concat_rows(v[1], g)?;
            let s = t.slice_rows(c, 1, 3)?;
            let r = t.select_rows(s, &[2, 0, 2])?;
            weighted_sum(t, r, 19)
        }),
    )?;
    check(
        "softmax",
        max_rel_error(&[rand_tensor(&[4, 7], 20)], |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, 21)
        }),
    )?;
    check(
        "causal_attention",
        max_rel_error(&[rand_tensor(&[5, 12], 22)], |t, v| {
            let y = t.causal_attention(v[0], 2)?;
            weighted_sum(t, y, 23)
        }),
    )?;
    check(
        "masked_cross_entropy",
        max_rel_error(&[rand_tensor(&[3, 5], 24)], |t, v| {
            t.masked_cross_entropy(v[0], &[1, 4, 0], &[true, false, true])
        }),
    )?;
    Ok(out)
}

/// The decoder used for full-model checks.
pub fn toy_config(tie_output_to_embedding: bool) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 11,
        max_seq: 12,
        tie_output_to_embedding,
    }
}

/// A toy decoder with every parameter pushed well away from zero, so that
/// activations and gradients are generic.
pub fn toy_model(tie_output_to_embedding: bool) -> Result<DecoderLM<f64>> {
    let mut model = DecoderLM::<f64>::new(toy_config(tie_output_to_embedding), 7)?;
    let mut rng = seeded(8, Stream::ModelInit);
    for p in model.parameters_mut() {
        let noise = Tensor::<f64>::randn(p.shape(), 0.3, &mut rng);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += *n;
        }
    }
    Ok(model)
}

/// Masked next-token loss of the whole decoder on a fixed sequence.
pub fn toy_loss<T: Real>(model: &DecoderLM<T>, tape: &mut Tape<'_, T>, vars: &ModelVars) -> Result<Var> {
    let ids = [2usize, 5, 9, 4, 7, 6, 3];
    let targets = [5usize, 9, 4, 7, 6, 3, 0];
    let mask = [false, true, false, true, true, true, false];
    let x = model.embed_tokens(tape, vars, &ids)?;
    let y = model.forward(tape, vars, x)?;
    tape.masked_cross_entropy(y, &targets, &mask)
}

fn loss_value(model: &DecoderLM<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let l = toy_loss(model, &mut tape, &vars)?;
    tape.scalar(l)
}

fn analytic_grads<T: Real>(model: &DecoderLM<T>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let l = toy_loss(model, &mut tape, &vars)?;
    let g = tape.backward(l)?;
    Ok(vars
        .all()
        .iter()
        .map(|&v| g.get(v).map_or_else(Vec::new, |g| g.iter().map(|&x| x.to_f64()).collect()))
        .collect())
}

/// Result of a full-model check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck {
    /// Worst relative error over all checked entries.
    pub max_rel_err: f64,
    /// Largest |analytic| over the entries whose true gradient is zero.
    pub max_zero_grad: f64,
}

/// Compares `analytic` against central differences of `reference`'s f64
/// loss.
///
/// The key slice of each `b_qkv` has an identically zero gradient (softmax is
/// invariant to a per-query shift), so both sides are pure roundoff there and
/// a relative error means nothing. Those entries are reported separately.
/// Gradients under 1e-4 are judged against that floor: differences at
/// h = 1e-5 carry about 1e-11 absolute noise.
fn compare(reference: &DecoderLM<f64>, analytic: &[Vec<f64>]) -> Result<ModelCheck> {
    let d = reference.config.d_model;
    let names = reference.parameter_names();
    let mut out = ModelCheck { max_rel_err: 0.0, max_zero_grad: 0.0 };
    for (pi, name) in names.iter().enumerate() {
        for j in 0..analytic[pi].len() {
            if name.ends_with("attn.b_qkv") && (d..2 * d).contains(&j) {
                out.max_zero_grad = out.max_zero_grad.max(analytic[pi][j].abs());
                continue;
            }
            let mut m = reference.clone();
            m.parameters_mut()[pi].data_mut()[j] += H;
            let plus = loss_value(&m)?;
            m.parameters_mut()[pi].data_mut()[j] -= 2.0 * H;
            let minus = loss_value(&m)?;
            let e = rel_err(analytic[pi][j], (plus - minus) / (2.0 * H), 1e-4);
            out.max_rel_err = out.max_rel_err.max(e);
        }
    }
    Ok(out)
}

/// Full toy-decoder loss gradients in f64.
pub fn full_model_f64(tie_output_to_embedding: bool) -> Result<ModelCheck> {
    let model = toy_model(tie_output_to_embedding)?;
    compare(&model, &analytic_grads(&model)?)
}

/// Full toy-decoder loss gradients taken in f32. The differences are taken
/// in f64 on the f32 weights promoted exactly, since f32 differences at
/// h = 1e-5 fall below f32 resolution.
pub fn full_model_f32(tie_output_to_embedding: bool) -> Result<ModelCheck> {
    let single = toy_model(tie_output_to_embedding)?.cast::<f32>();
    compare(&single.cast::<f64>(), &analytic_grads(&single)?)
}
