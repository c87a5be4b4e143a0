use super::*;
use personaprompt_core::tokenizer::Vocab;

fn tiny() -> ModelConfig {
    ModelConfig { n_layer: 2, n_head: 2, d_model: 8, d_ff: 16, vocab_size: 13, max_seq: 12, tie_output_to_embedding: false }
}

fn model() -> DecoderLM<f32> {
    let mut m = DecoderLM::new(tiny(), 3).unwrap();
    m.freeze();
    m
}

fn prompt(m: &DecoderLM<f32>) -> PersonaPrompt<f32> {
    let vocab = Vocab::from_words(["a", "b", "c", "d"]).unwrap();
    PersonaPrompt::init_from_persona(&["a b".into(), "c".into()], &vocab, m, 5, "0123456789abcdef").unwrap()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn model_roundtrip_is_bit_exact() {
    for tie in [true, false] {
        let mut m = DecoderLM::<f32>::new(ModelConfig { tie_output_to_embedding: tie, ..tiny() }, 9).unwrap();
        if tie {
            m.freeze();
        }
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.is_frozen(), m.is_frozen());
        assert_eq!(back.parameter_names(), m.parameter_names());
        for (a, b) in back.parameters().iter().zip(m.parameters()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(bits(a), bits(b));
        }
        let ids = [2, 5, 7, 3];
        assert_eq!(bits(&back.logits_for_ids(&ids).unwrap()), bits(&m.logits_for_ids(&ids).unwrap()));
    }
}

#[test]
fn prompt_roundtrip_keeps_metadata() {
    let m = model();
    let p = prompt(&m);
    let back = decode_prompt(&encode_prompt(&p)).unwrap();
    assert_eq!(back, p);
    let r = PersonaPrompt::<f32>::random_init(3, 8, 77, "id", vec!["x".into()]).unwrap();
    assert_eq!(decode_prompt(&encode_prompt(&r)).unwrap(), r);
}

#[test]
fn header_lists_offsets_in_order() {
    let m = model();
    let ck = decode(&encode_model(&m)).unwrap();
    let mut off = 0;
    for (e, (name, t)) in ck.header.tensors.iter().zip(m.named_parameters()) {
        assert_eq!(e.name, name);
        assert_eq!(e.offset, off);
        assert_eq!(e.nbytes, 4 * t.numel() as u64);
        off += e.nbytes;
    }
    let p = decode(&encode_prompt(&prompt(&m))).unwrap();
    assert_eq!(p.header.tensors.len(), 1);
    assert_eq!(p.header.tensors[0].name, PROMPT_TENSOR);
}

#[test]
fn corrupted_magic_is_rejected() {
    let mut bytes = encode_model(&model());
    bytes[0] = b'X';
    assert!(matches!(decode_model(&bytes), Err(CheckpointError::BadMagic(_))));
    assert!(matches!(decode(b"hello world, not a checkpoint"), Err(CheckpointError::BadMagic(_))));
}

#[test]
fn other_versions_are_rejected() {
    let mut bytes = encode_model(&model());
    bytes[7] = b'9';
    assert_eq!(decode(&bytes).unwrap_err(), CheckpointError::UnsupportedVersion("09".into()));
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = encode_prompt(&prompt(&model()));
    for len in 0..bytes.len() {
        match decode_prompt(&bytes[..len]) {
            Err(CheckpointError::Truncated { actual, .. }) => assert_eq!(actual, len as u64),
            other => panic!("length {len}: {other:?}"),
        }
    }
}

#[test]
fn trailing_bytes_are_a_manifest_mismatch() {
    let mut bytes = encode_prompt(&prompt(&model()));
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(decode(&bytes), Err(CheckpointError::ManifestMismatch(_))));
}

fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut Header)) -> Vec<u8> {
    let ck = decode(bytes).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header = ck.header;
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + len..]);
    out
}

#[test]
fn manifest_shape_disagreement_is_rejected() {
    let bytes = encode_model(&model());
    // Same byte count, wrong shape for the config.
    let swapped = rewrite_header(&bytes, |h| h.tensors[0].shape.reverse());
    assert!(matches!(decode_model(&swapped), Err(CheckpointError::ManifestMismatch(_))));
    let overlong = rewrite_header(&bytes, |h| h.tensors[1].nbytes += 4);
    assert!(matches!(decode_model(&overlong), Err(CheckpointError::ManifestMismatch(_))));
    let renamed = rewrite_header(&bytes, |h| h.tensors[2].name = "nope".into());
    assert!(matches!(decode_model(&renamed), Err(CheckpointError::ManifestMismatch(_))));
    let unconfigured = rewrite_header(&bytes, |h| h.model_config = None);
    assert!(matches!(decode_model(&unconfigured), Err(CheckpointError::ManifestMismatch(_))));
}

#[test]
fn kinds_are_not_interchangeable() {
    let m = model();
    assert!(matches!(
        decode_prompt(&encode_model(&m)),
        Err(CheckpointError::WrongKind { expected: Kind::Prompt, found: Kind::Model })
    ));
    assert!(matches!(decode_model(&encode_prompt(&prompt(&m))), Err(CheckpointError::WrongKind { .. })));
}

#[test]
fn garbage_header_is_rejected() {
    let mut bytes = MAGIC.to_vec();
    bytes.extend_from_slice(&3u64.to_le_bytes());
    bytes.extend_from_slice(b"{x}");
    assert!(matches!(decode(&bytes), Err(CheckpointError::Header(_))));
}

#[test]
fn files_roundtrip_and_failed_loads_exit_five() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let path = dir.path().join("m.ckpt");
    save_model(&path, &m).unwrap();
    assert_eq!(load_model(&path).unwrap(), m);
    std::fs::write(&path, b"PFCKPT01").unwrap();
    let err = load_model(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::Truncated { .. })));
    assert_eq!(err.exit_code(), 5);
}
