use linearize_core::attention::{FeatureKind, WindowMode};
use linearize_core::model::{
    generate_greedy, load_checkpoint, save_checkpoint, AttnPath, HybridSpec, InferenceSession, LoraConfig, Model,
    ModelConfig, ParamKind, PrefillMode, Projection, BOS,
};
use linearize_core::Error;
use linearize_tensor::{Tape, Tensor};

fn tiny(seed: u64) -> Model {
    let mut cfg = ModelConfig::new(2, 2, 8);
    cfg.seed = seed;
    Model::build(cfg).unwrap()
}

fn converted(kind: FeatureKind, window: usize, mode: WindowMode) -> Model {
    let mut m = tiny(3);
    m.convert(HybridSpec::new(window, mode, kind, 8), 11).unwrap();
    m
}

fn logits(model: &Model, tokens: &[u32], path: AttnPath) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, |_| false);
    let y = model.logits_graph(&mut tape, &bound, &[tokens.to_vec()], path).unwrap();
    tape.value(y).clone()
}

fn last_row(t: &Tensor<f32>) -> Vec<f32> {
    let v = *t.shape().last().unwrap();
    t.data()[t.numel() - v..].to_vec()
}

fn argmax(x: &[f32]) -> usize {
    (0..x.len()).fold(0, |b, i| if x[i] > x[b] { i } else { b })
}

fn prompt(n: usize) -> Vec<u32> {
    (0..n).map(|i| if i == 0 { BOS } else { (i as u32 * 37 + 11) % 256 }).collect()
}

#[test]
fn parameter_count_matches_closed_form() {
    // V=258, D=16, hidden=64, M=2:
    // embed 4128 + head 4128 + final norm 16
    // per layer: 2 norms 32 + 4 projections 1024 + MLP 3072 = 4128
    let m = tiny(0);
    let total: usize = m.params().iter().map(|p| p.tensor.numel()).sum();
    assert_eq!(total, 16_528);
    assert_eq!(m.config().base_param_count(), 16_528);
}

#[test]
fn same_seed_is_bit_identical() {
    assert_eq!(tiny(5), tiny(5));
    assert_ne!(tiny(5), tiny(6));
}

#[test]
fn bos_only_logits_shape() {
    let y = logits(&tiny(0), &[BOS], AttnPath::Native);
    assert_eq!(y.shape(), &[1, 1, 258]);
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = ModelConfig::new(2, 2, 8);
    cfg.vocab_size = 1;
    assert!(matches!(Model::build(cfg), Err(Error::InvalidConfig(_))));
    let mut cfg = ModelConfig::new(2, 2, 8);
    cfg.n_layers = 0;
    cfg.attention.clear();
    assert!(matches!(Model::build(cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn conversion_adds_only_feature_maps_and_gates() {
    let mut cfg = ModelConfig::new(2, 2, 16);
    cfg.seed = 1;
    let mut m = Model::build(cfg).unwrap();
    let spec = HybridSpec::new(4, WindowMode::Standard, FeatureKind::Hedgehog, 16);
    assert_eq!(spec.feature_dim, 8);
    m.convert(spec, 2).unwrap();
    // M·H·2·d·d' = 2·2·2·16·8
    assert_eq!(m.params().count(|k| k == ParamKind::FeatureMap), 1024);
    assert_eq!(m.params().count(|k| k == ParamKind::Gamma), 4);
    let names: Vec<_> = m
        .params()
        .iter()
        .filter(|p| p.kind.is_attention_transfer())
        .map(|p| p.name.clone())
        .collect();
    let mut want = Vec::new();
    for l in 0..2 {
        want.push(format!("layers.{l}.attn.fmap_q.weight"));
        want.push(format!("layers.{l}.attn.fmap_k.weight"));
        want.push(format!("layers.{l}.attn.gamma_raw"));
    }
    let mut got = names.clone();
    got.sort();
    want.sort();
    assert_eq!(got, want);
    assert!(matches!(m.convert(spec, 2), Err(Error::AlreadyConverted)));
}

#[test]
fn t2r_conversion_adds_biases() {
    let m = converted(FeatureKind::T2r, 4, WindowMode::Standard);
    assert!(m.params().contains("layers.1.attn.fmap_k.bias"));
    // weights 2·2·2·8·8 plus biases 2·2·2·8
    assert_eq!(m.params().count(|k| k == ParamKind::FeatureMap), 512 + 64);
}

#[test]
fn conversion_preserves_softmax_path() {
    let base = tiny(3);
    let before = logits(&base, &prompt(12), AttnPath::Native);
    let after = converted(FeatureKind::Hedgehog, 4, WindowMode::Terraced);
    assert!(before.bit_eq(&logits(&after, &prompt(12), AttnPath::Softmax)));
}

#[test]
fn teacher_forcing_requires_conversion() {
    let m = tiny(0);
    let mut tape = Tape::<f32>::new();
    let b = m.bind(&mut tape, |_| false);
    assert!(matches!(
        m.teacher_forced_graph(&mut tape, &b, &[prompt(4)]),
        Err(Error::NotConverted)
    ));
}

fn layer_inputs(model: &Model, tokens: &[u32]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let b = model.bind(&mut tape, |_| false);
    let recs = model.teacher_forced_graph(&mut tape, &b, &[tokens.to_vec()]).unwrap();
    recs.iter().map(|r| tape.value(r.x).clone()).collect()
}

#[test]
fn layer_inputs_ignore_feature_maps() {
    let m = converted(FeatureKind::Hedgehog, 4, WindowMode::Standard);
    let mut perturbed = m.clone();
    let fm = perturbed.params_mut().get_mut("layers.0.attn.fmap_q.weight");
    fm.data_mut().iter_mut().for_each(|v| *v = -3.0 * *v + 0.5);
    *perturbed.params_mut().get_mut("layers.0.attn.gamma_raw") = Tensor::full(vec![2], -4.0);
    let a = layer_inputs(&m, &prompt(10));
    let b = layer_inputs(&perturbed, &prompt(10));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bit_eq(y));
    }
}

/// Layer-0 feature-map gradients with and without the layer-1 loss term.
fn layer0_grads(model: &Model, include_layer1: bool) -> Vec<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let b = model.bind(&mut tape, |k| k.is_attention_transfer());
    let recs = model.teacher_forced_graph(&mut tape, &b, &[prompt(9)]).unwrap();
    let mut terms = Vec::new();
    for (m, r) in recs.iter().enumerate() {
        if m == 1 && !include_layer1 {
            continue;
        }
        let d = tape.sub(r.y_hat, r.y).unwrap();
        let sq = tape.mul(d, d).unwrap();
        terms.push(tape.mean_all(sq).unwrap());
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t).unwrap();
    }
    let g = tape.backward(loss).unwrap();
    model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.starts_with("layers.0.") && p.kind.is_attention_transfer())
        .map(|(id, _)| g.get(b.var(id)).unwrap().clone())
        .collect()
}

#[test]
fn layer_losses_decouple() {
    let m = converted(FeatureKind::T2r, 3, WindowMode::Standard);
    let joint = layer0_grads(&m, true);
    let alone = layer0_grads(&m, false);
    assert_eq!(joint.len(), 5);
    for (a, b) in joint.iter().zip(&alone) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn full_window_collapses_to_softmax() {
    for mode in [WindowMode::Standard, WindowMode::Terraced] {
        let m = converted(FeatureKind::Hedgehog, 16, mode);
        let mut tape = Tape::<f64>::new();
        let b = m.bind(&mut tape, |_| false);
        let recs = m.teacher_forced_graph(&mut tape, &b, &[prompt(16)]).unwrap();
        for r in recs {
            let err = tape.value(r.y_hat).max_abs_diff(tape.value(r.y)).unwrap();
            let mse = {
                let (a, c) = (tape.value(r.y_hat), tape.value(r.y));
                a.data().iter().zip(c.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
            };
            assert!(mse <= 1e-10, "mse {mse}, max err {err}");
        }
    }
}

#[test]
fn lora_attach_is_identity() {
    let base = converted(FeatureKind::Hedgehog, 4, WindowMode::Standard);
    let mut m = base.clone();
    m.attach_lora(LoraConfig::default(), 9).unwrap();
    let toks = prompt(12);
    assert!(logits(&base, &toks, AttnPath::Native).bit_eq(&logits(&m, &toks, AttnPath::Native)));
    let mut s0 = InferenceSession::new(&base, AttnPath::Native).unwrap();
    let mut s1 = InferenceSession::new(&m, AttnPath::Native).unwrap();
    assert_eq!(
        s0.feed(&toks, PrefillMode::Naive).unwrap(),
        s1.feed(&toks, PrefillMode::Naive).unwrap()
    );
    assert_eq!(m.params().count(|k| k.is_adapter()), 2 * 4 * 2 * 8 * 16);
    assert!(matches!(
        m.attach_lora(
            LoraConfig {
                targets: vec![Projection::Wq],
                ..LoraConfig::default()
            },
            1
        ),
        Err(Error::DuplicateAdapter(_))
    ));
}

#[test]
fn lora_alpha_scales_delta() {
    let mut rng = 0x1234_5678u64;
    let mut next = || {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng >> 33) as f32 / (1u64 << 31) as f32) - 0.5
    };
    let a = Tensor::from_fn(vec![4, 6], |_| next());
    let b = Tensor::from_fn(vec![5, 4], |_| next());
    let base = Tensor::from_fn(vec![6, 5], |_| next());
    let x = Tensor::from_fn(vec![3, 6], |_| next());
    let run = |alpha| {
        linearize_core::model::LoraAdapter {
            a: a.clone(),
            b: b.clone(),
            alpha,
        }
        .forward(&base, &x)
        .unwrap()
    };
    let zero = linearize_core::model::LoraAdapter {
        a: a.clone(),
        b: Tensor::zeros(vec![5, 4]),
        alpha: 16.0,
    }
    .forward(&base, &x)
    .unwrap();
    let y1 = run(8.0);
    let y2 = run(16.0);
    for ((&z, &p), &q) in zero.data().iter().zip(y1.data()).zip(y2.data()) {
        assert!(((q - z) - 2.0 * (p - z)).abs() <= 1e-6);
    }
    let mut plain = vec![0.0f32; 15];
    for i in 0..3 {
        for j in 0..5 {
            plain[i * 5 + j] = (0..6).map(|k| x.data()[i * 6 + k] * base.data()[k * 5 + j]).sum();
        }
    }
    for (z, p) in zero.data().iter().zip(&plain) {
        assert!((z - p).abs() <= 1e-6);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = converted(FeatureKind::T2r, 4, WindowMode::Terraced);
    m.attach_lora(LoraConfig::default(), 4).unwrap();
    m.params_mut().get_mut("layers.1.attn.wq.lora_b").data_mut()[3] = 0.25;
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let toks = prompt(9);
    assert!(logits(&m, &toks, AttnPath::Native).bit_eq(&logits(&back, &toks, AttnPath::Native)));
}

#[test]
fn checkpoint_header_lists_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = converted(FeatureKind::Hedgehog, 4, WindowMode::Standard);
    save_checkpoint(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"LOLC");
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    let table: Vec<(String, Vec<usize>)> = header["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| {
            let shape = t["shape"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap() as usize).collect();
            (t["name"].as_str().unwrap().to_string(), shape)
        })
        .collect();
    let direct: Vec<_> = m.params().iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect();
    assert_eq!(table, direct);
}

#[test]
fn checkpoint_corruption_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&tiny(0), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::CorruptPayload(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    std::fs::write(&cut, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::CorruptPayload(_))));

    let mut old = bytes.clone();
    old[4] = 9;
    std::fs::write(&cut, &old).unwrap();
    assert!(matches!(
        load_checkpoint(&cut),
        Err(Error::FormatVersionMismatch { found: 9, .. })
    ));

    assert!(matches!(
        load_checkpoint(&dir.path().join("absent.ckpt")),
        Err(Error::MissingCheckpoint(_))
    ));
}

#[test]
fn decode_matches_reprefill() {
    let w = 4;
    for mode in [WindowMode::Standard, WindowMode::Terraced] {
        for kind in [FeatureKind::T2r, FeatureKind::Hedgehog] {
            let m = converted(kind, w, mode);
            let toks = prompt(2 * w + 1);
            let mut stream = InferenceSession::new(&m, AttnPath::Native).unwrap();
            let mut streamed = vec![stream.feed(&toks[..1], PrefillMode::Naive).unwrap()];
            for &t in &toks[1..] {
                streamed.push(stream.feed(&[t], PrefillMode::Naive).unwrap());
            }
            for p in [w - 1, w, w + 1, 2 * w] {
                let graph = last_row(&logits(&m, &toks[..p], AttnPath::Native));
                for prefill in [PrefillMode::Naive, PrefillMode::Chunked] {
                    let mut s = InferenceSession::new(&m, AttnPath::Native).unwrap();
                    let full = s.feed(&toks[..p], prefill).unwrap();
                    let step = &streamed[p - 1];
                    assert_eq!(argmax(step), argmax(&full));
                    let err = step.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                    assert!(err <= 1e-4, "{mode:?} {kind:?} p={p} err={err}");
                    let err = graph.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                    assert!(err <= 1e-4, "graph vs session p={p} err={err}");
                }
            }
        }
    }
}

#[test]
fn softmax_session_matches_graph() {
    let m = tiny(2);
    let toks = prompt(7);
    let mut s = InferenceSession::new(&m, AttnPath::Native).unwrap();
    s.feed(&toks[..3], PrefillMode::Naive).unwrap();
    let got = s.feed(&toks[3..], PrefillMode::Naive).unwrap();
    let want = last_row(&logits(&m, &toks, AttnPath::Native));
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(err <= 1e-4);
    assert_eq!(s.position(), 7);
}

#[test]
fn chunked_and_naive_generation_agree() {
    let m = converted(FeatureKind::Hedgehog, 4, WindowMode::Terraced);
    let p = prompt(11);
    let a = generate_greedy(&m, &p, 12, PrefillMode::Chunked).unwrap();
    let b = generate_greedy(&m, &p, 12, PrefillMode::Naive).unwrap();
    let c = generate_greedy(&m, &p, 12, PrefillMode::Stepwise).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(a.len(), 23);
    assert_eq!(&a[..11], &p[..]);
}

#[test]
fn generate_edge_cases() {
    let m = converted(FeatureKind::T2r, 4, WindowMode::Standard);
    let p = prompt(5);
    assert_eq!(generate_greedy(&m, &p, 0, PrefillMode::Chunked).unwrap(), p);
    let long = prompt(m.config().max_seq_len + 1);
    assert!(matches!(
        generate_greedy(&m, &long, 1, PrefillMode::Chunked),
        Err(Error::PromptTooLong { .. })
    ));
}

#[test]
fn hybrid_session_memory_is_constant() {
    let m = converted(FeatureKind::Hedgehog, 4, WindowMode::Standard);
    let mut s = InferenceSession::new(&m, AttnPath::Native).unwrap();
    let toks = prompt(40);
    s.feed(&toks[..2], PrefillMode::Naive).unwrap();
    let bytes = s.state_bytes() + s.cache_bytes();
    for &t in &toks[2..] {
        s.feed(&[t], PrefillMode::Naive).unwrap();
        assert_eq!(s.state_bytes() + s.cache_bytes(), bytes);
    }
    let mut soft = InferenceSession::new(&m, AttnPath::Softmax).unwrap();
    soft.feed(&toks[..10], PrefillMode::Naive).unwrap();
    let c10 = soft.cache_bytes();
    soft.feed(&toks[10..20], PrefillMode::Naive).unwrap();
    assert_eq!(soft.cache_bytes(), 2 * c10);
}
