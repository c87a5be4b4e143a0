use super::*;
use alloc::vec;

fn tiny_config(vocab_size: usize, tie: bool) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size,
        max_seq: 12,
        tie_output_to_embedding: tie,
    }
}

/// Rescales every parameter so activations and gradients are well away from
/// zero; useful for finite-difference checks.
fn spread<T: Real>(model: &mut DecoderLM<T>, seed: u64) {
    let mut rng = seeded(seed, Stream::ModelInit);
    for p in model.parameters_mut() {
        let noise = Tensor::<T>::randn(p.shape(), 0.3, &mut rng);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += *n;
        }
    }
}

#[test]
fn default_config_is_valid() {
    let c = ModelConfig::default();
    c.validate().unwrap();
    assert_eq!((c.n_layer, c.n_head, c.d_model, c.d_ff, c.max_seq), (4, 4, 128, 512, 360));
    let bad = ModelConfig { n_head: 3, ..c };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn forward_shape() {
    let model = DecoderLM::<f32>::new(tiny_config(11, true), 1).unwrap();
    let logits = model.logits_for_ids(&[5, 6, 7, 8, 9, 10, 2]).unwrap();
    assert_eq!(logits.shape(), &[7, 11]);
}

#[test]
fn sequence_longer_than_max_seq_is_rejected() {
    let model = DecoderLM::<f32>::new(tiny_config(11, true), 1).unwrap();
    let ids = vec![5usize; 13];
    assert_eq!(
        model.logits_for_ids(&ids).unwrap_err(),
        Error::SequenceLength { len: 13, max: 12, context: None }
    );
    assert!(model.logits_for_ids(&ids[..12]).is_ok());
}

#[test]
fn embed_tokens_is_a_lookup() {
    let model = DecoderLM::<f32>::new(tiny_config(11, true), 1).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape).unwrap();
    let x = model.embed_tokens(&mut tape, &vars, &[7, 7]).unwrap();
    let rows = tape.value(x);
    assert_eq!(&rows[..8], &rows[8..]);
    assert_eq!(&rows[..8], model.token_embedding.row(7));
    let e = model.embed_tokens(&mut tape, &vars, &[]).unwrap();
    assert_eq!(tape.shape(e), (0, 8));
    assert!(matches!(
        model.embed_tokens(&mut tape, &vars, &[11]),
        Err(Error::Index { index: 11, bound: 11, .. })
    ));
}

#[test]
fn embedding_gradient_counts_lookups() {
    let model = DecoderLM::<f64>::new(tiny_config(11, true), 1).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape).unwrap();
    let x = model.embed_tokens(&mut tape, &vars, &[3, 6, 3]).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    let g = g.get(vars.token_embedding()).unwrap();
    for id in 0..11 {
        let want = match id {
            3 => 2.0,
            6 => 1.0,
            _ => 0.0,
        };
        assert!(g[id * 8..(id + 1) * 8].iter().all(|&v| v == want), "row {id}");
    }
}

#[test]
fn causal_dependence() {
    let mut model = DecoderLM::<f64>::new(tiny_config(11, true), 4).unwrap();
    spread(&mut model, 5);
    let mut rng = seeded(6, Stream::ModelInit);
    let input = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape).unwrap();
        let xv = tape.leaf(x).unwrap();
        let y = model.forward(&mut tape, &vars, xv).unwrap();
        tape.value(y).to_vec()
    };
    let base = run(&input);
    for j in 0..6 {
        let mut changed = input.clone();
        changed.data_mut()[j * 8 + 2] += 0.5;
        let out = run(&changed);
        for t in 0..6 {
            let same = base[t * 11..(t + 1) * 11] == out[t * 11..(t + 1) * 11];
            assert_eq!(same, t < j, "perturb {j}, row {t}");
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let model = DecoderLM::<f32>::new(tiny_config(11, true), 9).unwrap();
    let a = model.logits_for_ids(&[2, 5, 6, 4, 7]).unwrap();
    let b = model.logits_for_ids(&[2, 5, 6, 4, 7]).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let again = DecoderLM::<f32>::new(tiny_config(11, true), 9).unwrap();
    assert_eq!(again, model);
}

#[test]
fn freeze_flags_every_parameter() {
    let mut model = DecoderLM::<f32>::new(tiny_config(11, false), 1).unwrap();
    assert!(model.parameters().iter().all(|p| p.trainable()));
    assert_eq!(model.trainable_parameter_count(), model.parameter_count());
    model.freeze();
    assert!(model.is_frozen());
    assert!(model.parameters().iter().all(|p| !p.trainable()));
    assert_eq!(model.trainable_parameter_count(), 0);
}

#[test]
fn parameter_count_default_config() {
    let c = ModelConfig { vocab_size: 100, ..ModelConfig::default() };
    let model = DecoderLM::<f32>::new(c, 0).unwrap();
    let d = 128;
    let block = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * 512 + 512 + 512 * d + d;
    assert_eq!(model.parameter_count(), 100 * d + 360 * d + 4 * block + 2 * d);
    assert_eq!(model.parameter_names().len(), model.parameters().len());
}

#[test]
fn tied_head_is_the_token_embedding() {
    let mut model = DecoderLM::<f32>::new(tiny_config(11, true), 2).unwrap();
    assert!(model.lm_head.is_none());
    let before = model.logits_for_ids(&[5, 6]).unwrap();
    // Bump only the row of token 9: its logit changes everywhere.
    for x in model.token_embedding.data_mut()[9 * 8..10 * 8].iter_mut() {
        *x += 1.0;
    }
    let after = model.logits_for_ids(&[5, 6]).unwrap();
    for t in 0..2 {
        assert_ne!(before.row(t)[9], after.row(t)[9]);
        assert_eq!(before.row(t)[8], after.row(t)[8]);
    }
}

#[test]
fn from_parameters_roundtrip_and_errors() {
    let model = DecoderLM::<f32>::new(tiny_config(11, false), 2).unwrap();
    let named: Vec<(String, Tensor<f32>)> =
        model.named_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let back = DecoderLM::from_parameters(model.config, named.clone(), false).unwrap();
    assert_eq!(back, model);

    let mut renamed = named.clone();
    renamed[3].0 = "nope".into();
    assert!(matches!(DecoderLM::from_parameters(model.config, renamed, false), Err(Error::Shape(_))));
    let mut reshaped = named.clone();
    reshaped[0].1 = Tensor::zeros(&[10, 8]);
    assert!(matches!(DecoderLM::from_parameters(model.config, reshaped, false), Err(Error::Shape(_))));
    let mut short = named;
    short.pop();
    assert!(matches!(DecoderLM::from_parameters(model.config, short, false), Err(Error::Shape(_))));
}

#[test]
fn frozen_backward_touches_nothing() {
    let mut model = DecoderLM::<f32>::new(tiny_config(11, true), 2).unwrap();
    model.freeze();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape).unwrap();
    let x = model.embed_tokens(&mut tape, &vars, &[5, 6, 7]).unwrap();
    let y = model.forward(&mut tape, &vars, x).unwrap();
    let loss = tape.masked_cross_entropy(y, &[6, 7, 8], &[true, true, true]).unwrap();
    assert!(!tape.requires_grad(loss));
    let g = tape.backward(loss).unwrap();
    assert!(g.is_empty());
}

/// Independent reimplementation of the forward equations, written as plain
/// loops over `f64` slices with no shared helpers.
mod reference {
    use super::*;

    fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            for j in 0..d {
                o[j] = (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt() * g[j] + b[j];
            }
        }
        out
    }

    fn linear(x: &[f64], rows: usize, k: usize, w: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for c in 0..n {
                let mut acc = b[c];
                for i in 0..k {
                    acc += x[r * k + i] * w[i * n + c];
                }
                out[r * n + c] = acc;
            }
        }
        out
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn forward(m: &DecoderLM<f64>, ids: &[usize]) -> Vec<f64> {
        let c = m.config;
        let (s, d, h) = (ids.len(), c.d_model, c.n_head);
        let dh = d / h;
        let mut x = vec![0.0; s * d];
        for t in 0..s {
            for j in 0..d {
                x[t * d + j] = m.token_embedding.data()[ids[t] * d + j] + m.position_embedding.data()[t * d + j];
            }
        }
        for blk in &m.blocks {
            let a_in = layer_norm(&x, d, blk.ln1.gamma.data(), blk.ln1.beta.data());
            let qkv = linear(&a_in, s, d, blk.w_qkv.data(), 3 * d, blk.b_qkv.data());
            let mut att = vec![0.0; s * d];
            for head in 0..h {
                for i in 0..s {
                    let mut scores = vec![0.0; i + 1];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for e in 0..dh {
                            dot += qkv[i * 3 * d + head * dh + e] * qkv[j * 3 * d + d + head * dh + e];
                        }
                        *sc = dot / (dh as f64).sqrt();
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..=i {
                        let p = (scores[j] - mx).exp() / z;
                        for e in 0..dh {
                            att[i * d + head * dh + e] += p * qkv[j * 3 * d + 2 * d + head * dh + e];
                        }
                    }
                }
            }
            let proj = linear(&att, s, d, blk.w_out.data(), d, blk.b_out.data());
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
            let m_in = layer_norm(&x, d, blk.ln2.gamma.data(), blk.ln2.beta.data());
            let mut hid = linear(&m_in, s, d, blk.w_fc.data(), c.d_ff, blk.b_fc.data());
            for v in hid.iter_mut() {
                *v = gelu(*v);
            }
            let out = linear(&hid, s, c.d_ff, blk.w_proj.data(), d, blk.b_proj.data());
            for (xi, p) in x.iter_mut().zip(&out) {
                *xi += p;
            }
        }
        let fin = layer_norm(&x, d, m.final_norm.gamma.data(), m.final_norm.beta.data());
        let head = m.lm_head.as_ref().unwrap_or(&m.token_embedding).data();
        let mut logits = vec![0.0; s * c.vocab_size];
        for t in 0..s {
            for v in 0..c.vocab_size {
                logits[t * c.vocab_size + v] = (0..d).map(|j| fin[t * d + j] * head[v * d + j]).sum();
            }
        }
        logits
    }
}

#[test]
fn matches_hand_set_reference() {
    let config = ModelConfig {
        n_layer: 1,
        n_head: 1,
        d_model: 4,
        d_ff: 8,
        vocab_size: 5,
        max_seq: 6,
        tie_output_to_embedding: false,
    };
    let mut model = DecoderLM::<f64>::new(config, 0).unwrap();
    // Hand-set weights from a fixed formula, distinct per tensor.
    for (pi, p) in model.parameters_mut().into_iter().enumerate() {
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            *x = 0.5 * num_traits::Float::sin(0.37 * i as f64 + 1.3 * pi as f64 + 0.1);
        }
    }
    let ids = [2usize, 4, 1, 0, 3];
    let got = model.logits_for_ids(&ids).unwrap();
    let want = reference::forward(&model, &ids);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-5, "{g} vs {w}");
    }

    let tied = ModelConfig { tie_output_to_embedding: true, ..config };
    let mut m2 = DecoderLM::<f64>::new(tied, 0).unwrap();
    spread(&mut m2, 1);
    let got = m2.logits_for_ids(&ids).unwrap();
    let want = reference::forward(&m2, &ids);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-5, "{g} vs {w}");
    }
}

#[test]
fn full_model_gradients_f64() {
    for tie in [true, false] {
        let c = crate::gradcheck::full_model_f64(tie).unwrap();
        assert!(c.max_rel_err <= 1e-6, "tied={tie}: {:e}", c.max_rel_err);
        assert!(c.max_zero_grad <= 1e-15, "tied={tie}: {:e}", c.max_zero_grad);
    }
}

#[test]
fn full_model_gradients_f32() {
    let c = crate::gradcheck::full_model_f32(true).unwrap();
    assert!(c.max_rel_err <= 1e-3, "{:e}", c.max_rel_err);
    assert!(c.max_zero_grad <= 1e-7, "{:e}", c.max_zero_grad);
}

#[test]
fn accumulate_grads_skips_frozen() {
    let mut model = DecoderLM::<f64>::new(tiny_config(11, true), 7).unwrap();
    let grads = {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape).unwrap();
        let l = crate::gradcheck::toy_loss(&model, &mut tape, &vars).unwrap();
        (vars.clone(), tape.backward(l).unwrap())
    };
    model.accumulate_grads(&grads.0, &grads.1).unwrap();
    assert!(model.parameters().iter().all(|p| p.grad().is_some()));
    model.zero_grads();
    assert!(model.parameters().iter().all(|p| p.grad().unwrap().iter().all(|&g| g == 0.0)));
}
