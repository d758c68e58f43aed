use linearize_core::attention::{FeatureKind, WindowMode};
use linearize_core::model::{AttnPath, HybridSpec, LoraConfig, Model, ModelConfig, ParamKind, BOS, EOS};
use linearize_core::train::*;
use linearize_core::Error;
use linearize_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Rows of random positive entries over the causal prefix, normalized to sum to 1.
fn stochastic(n: usize, heads: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; heads * n * n];
    for h in 0..heads {
        for i in 0..n {
            let row = &mut data[(h * n + i) * n..(h * n + i + 1) * n];
            for v in &mut row[..=i] {
                *v = rng.random_range(0.05..1.0);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Tensor::new(vec![1, heads, n, n], data).unwrap()
}

fn scalar(t: &Tape<f64>, v: Var) -> f64 {
    t.value(v).data()[0]
}

fn consts(t: &mut Tape<f64>, pairs: &[(Tensor<f64>, Tensor<f64>)]) -> Vec<(Var, Var)> {
    pairs.iter().map(|(a, b)| (t.constant(a.clone()), t.constant(b.clone()))).collect()
}

fn direct_mse(pairs: &[(Tensor<f64>, Tensor<f64>)]) -> f64 {
    let per: Vec<f64> = pairs
        .iter()
        .map(|(y, yh)| y.data().iter().zip(yh.data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / y.numel() as f64)
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn layer_pairs(layers: usize, seed: u64) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    (0..layers as u64)
        .map(|m| (random(&[2, 3, 5, 4], seed + 2 * m, 1.0), random(&[2, 3, 5, 4], seed + 2 * m + 1, 1.0)))
        .collect()
}

#[test]
fn mse_loss_examples() {
    let pairs = layer_pairs(3, 1);
    let mut t = Tape::new();
    let same: Vec<_> = pairs.iter().map(|(y, _)| (y.clone(), y.clone())).collect();
    let v = consts(&mut t, &same);
    let l = mse_attention_loss(&mut t, &v).unwrap();
    assert_eq!(scalar(&t, l), 0.0);

    let c = 0.375;
    let shifted: Vec<_> = pairs.iter().map(|(y, _)| (y.clone(), Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + c))).collect();
    let v = consts(&mut t, &shifted);
    let l = mse_attention_loss(&mut t, &v).unwrap();
    assert!((scalar(&t, l) - c * c).abs() < 1e-12);

    let v = consts(&mut t, &pairs);
    let l = mse_attention_loss(&mut t, &v).unwrap();
    assert!((scalar(&t, l) - direct_mse(&pairs)).abs() < 1e-7);

    let bad = vec![(random(&[1, 2, 3, 4], 0, 1.0), random(&[1, 2, 3, 2], 0, 1.0))];
    let v = consts(&mut t, &bad);
    assert!(matches!(mse_attention_loss(&mut t, &v), Err(Error::ShapeMismatch(_))));
}

#[test]
fn blockwise_loss_examples() {
    let pairs = layer_pairs(4, 7);
    let mut t = Tape::new();
    let v = consts(&mut t, &pairs);
    let joint = mse_attention_loss(&mut t, &v).unwrap();
    let one = blockwise_mse(&mut t, &v, 4).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(scalar(&t, one[0]), scalar(&t, joint));

    let per_layer = blockwise_mse(&mut t, &v, 1).unwrap();
    let mean = per_layer.iter().map(|&l| scalar(&t, l)).sum::<f64>() / 4.0;
    assert!((mean - scalar(&t, joint)).abs() < 1e-12);
    for (m, &l) in per_layer.iter().enumerate() {
        assert!((scalar(&t, l) - direct_mse(&pairs[m..m + 1])).abs() < 1e-12);
    }

    assert!(matches!(blockwise_mse(&mut t, &v, 3), Err(Error::IndivisibleBlocks { layers: 4, block: 3 })));
}

#[test]
fn blockwise_gradients_stay_in_their_block() {
    let pairs = layer_pairs(4, 9);
    let mut t = Tape::new();
    let v: Vec<(Var, Var)> = pairs.iter().map(|(y, yh)| (t.constant(y.clone()), t.leaf(yh.clone(), true))).collect();
    let blocks = blockwise_mse(&mut t, &v, 2).unwrap();
    for (j, &loss) in blocks.iter().enumerate() {
        let g = t.backward(loss).unwrap();
        for (m, &(_, yh)) in v.iter().enumerate() {
            let norm = g.get(yh).map_or(0.0, |g| g.data().iter().map(|x| x * x).sum::<f64>());
            assert_eq!(norm == 0.0, m / 2 != j, "block {j} layer {m}");
        }
    }
}

#[test]
fn weight_xent_examples() {
    let n = 5;
    let one_hot = Tensor::from_fn(vec![1, 1, n, n], |i| if i % n == (i / n) / 2 { 1.0 } else { 0.0 });
    let mut t = Tape::new();
    let v = consts(&mut t, &[(one_hot.clone(), one_hot)]);
    let l = weight_xent_loss(&mut t, &v).unwrap();
    assert!(scalar(&t, l).abs() < 1e-12);

    let uniform = Tensor::full(vec![1, 2, 3, n], 1.0 / n as f64);
    let v = consts(&mut t, &[(uniform.clone(), uniform)]);
    let l = weight_xent_loss(&mut t, &v).unwrap();
    assert!((scalar(&t, l) - (n as f64).ln()).abs() < 1e-12);

    let layers: Vec<_> = (0..2).map(|m| (stochastic(6, 3, 10 + m), stochastic(6, 3, 20 + m))).collect();
    let v = consts(&mut t, &layers);
    let l = weight_xent_loss(&mut t, &v).unwrap();
    let mut expect = 0.0;
    for (a, a_hat) in &layers {
        let rows = a.numel() / 6;
        let total: f64 = a
            .data()
            .iter()
            .zip(a_hat.data())
            .map(|(&p, &q)| -p * q.max(1e-12).ln())
            .sum();
        expect += total / rows as f64;
    }
    assert!((scalar(&t, l) - expect / 2.0).abs() < 1e-7);

    let not_rows = vec![(Tensor::full(vec![1, 1, 2, 2], 0.7), Tensor::full(vec![1, 1, 2, 2], 0.5))];
    let v = consts(&mut t, &not_rows);
    assert!(matches!(weight_xent_loss(&mut t, &v), Err(Error::NotStochastic { .. })));
}

#[test]
fn combined_loss_is_exact_weighted_sum() {
    let mut t = Tape::new();
    let mse = t.constant(Tensor::scalar(0.0123));
    let xent = t.constant(Tensor::scalar(2.5));
    let l = combined_loss(&mut t, mse, xent, 1000.0, 1.0).unwrap();
    assert_eq!(scalar(&t, l), 1000.0 * 0.0123 + 2.5);
    assert!(TransferLoss::Combined { w_mse: -1.0, w_xent: 1.0 }.validate().is_err());
}

#[test]
fn next_token_loss_examples() {
    let v = 7;
    let targets = vec![vec![0, 3, 6]];
    let mut t = Tape::new();
    let flat = t.constant(Tensor::zeros(vec![1, 3, v]));
    let l = next_token_loss(&mut t, flat, &targets, None).unwrap();
    assert!((scalar(&t, l) - (v as f64).ln()).abs() < 1e-6);

    let sharp = Tensor::from_fn(vec![1, 3, v], |i| if i % v == targets[0][i / v] as usize { 20.0 } else { 0.0 });
    let sharp = t.constant(sharp);
    let l = next_token_loss(&mut t, sharp, &targets, None).unwrap();
    assert!(scalar(&t, l) <= 1e-3);

    let logits = random(&[2, 3, 5], 4, 3.0);
    let targets = vec![vec![1, 0, 4], vec![2, 2, 3]];
    let x = t.constant(logits.clone());
    let l = next_token_loss(&mut t, x, &targets, None).unwrap();
    let mut expect = 0.0;
    for b in 0..2 {
        for i in 0..3 {
            let row = &logits.data()[(b * 3 + i) * 5..(b * 3 + i + 1) * 5];
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            expect += lse - row[targets[b][i] as usize];
        }
    }
    assert!((scalar(&t, l) - expect / 6.0).abs() < 1e-7);

    let mask = mask_after_eos(&[vec![5, EOS, 9, 1]], EOS);
    assert_eq!(mask, vec![vec![true, true, false, false]]);
    assert!(matches!(
        next_token_loss(&mut t, x, &[vec![1, 0]], None),
        Err(Error::ShapeMismatch(_))
    ));
}

fn tiny(layers: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(layers, 2, 16);
    cfg.seed = seed;
    Model::build(cfg).unwrap()
}

fn converted(layers: usize, seed: u64, kind: FeatureKind) -> Model {
    let mut m = tiny(layers, seed);
    m.convert(HybridSpec::new(8, WindowMode::Standard, kind, 16), seed + 1).unwrap();
    m
}

fn batch(seed: u64, b: usize, n: usize) -> Vec<Vec<u32>> {
    let corpus = Corpus::from_text(&synthetic_text(seed, 40));
    corpus.fixed_batches(1, b, n).unwrap().remove(0)
}

fn quick(lr: f64) -> TransferConfig {
    TransferConfig {
        lr,
        steps: 3,
        batch_size: 2,
        seq_len: 24,
        eval_every: 0,
        ..Default::default()
    }
}

/// Every parameter whose kind fails `keep` is bit-identical between the two models.
fn frozen_unchanged(before: &Model, after: &Model, keep: fn(ParamKind) -> bool) {
    for (a, b) in before.params().iter().zip(after.params().iter()) {
        if !keep(a.kind) {
            assert_eq!(a.tensor, b.tensor, "{} changed", a.name);
        }
    }
}

#[test]
fn transfer_step_with_zero_lr_changes_nothing() {
    let mut m = converted(2, 0, FeatureKind::Hedgehog);
    let before = m.clone();
    let mut tr = TransferTrainer::new(&m, quick(0.0)).unwrap();
    tr.step(&mut m, &batch(0, 2, 24)).unwrap();
    assert_eq!(m, before);
}

#[test]
fn transfer_updates_only_feature_maps_and_gates() {
    for kind in [FeatureKind::T2r, FeatureKind::Hedgehog] {
        let mut m = converted(2, 1, kind);
        let before = m.clone();
        let mut tr = TransferTrainer::new(&m, quick(1e-2)).unwrap();
        for _ in 0..5 {
            tr.step(&mut m, &batch(1, 2, 24)).unwrap();
        }
        frozen_unchanged(&before, &m, ParamKind::is_attention_transfer);
        for (a, b) in before.params().iter().zip(m.params().iter()) {
            if a.kind.is_attention_transfer() {
                assert_ne!(a.tensor, b.tensor, "{} did not move", a.name);
            }
        }
        let wq = "layers.0.attn.wq";
        assert_eq!(m.params().get(wq), before.params().get(wq));
    }
}

#[test]
fn transfer_gradients_reach_only_feature_maps_and_gates() {
    let m = converted(2, 2, FeatureKind::Hedgehog);
    let mut tape = Tape::<f64>::new();
    let bound = m.bind(&mut tape, ParamKind::is_attention_transfer);
    let recs = m.teacher_forced_graph(&mut tape, &bound, &batch(2, 2, 24)).unwrap();
    let pairs: Vec<_> = recs.iter().map(|r| (r.y, r.y_hat)).collect();
    let loss = mse_attention_loss(&mut tape, &pairs).unwrap();
    let grads = m.collect_grads(&tape.backward(loss).unwrap(), &bound);
    for (p, g) in m.params().iter().zip(&grads) {
        let norm = g.as_ref().map_or(0.0, |g| g.data().iter().map(|x| x * x).sum::<f64>());
        if p.kind.is_attention_transfer() {
            assert!(norm > 0.0, "{} has no gradient", p.name);
        } else {
            assert_eq!(norm, 0.0, "{} has a gradient", p.name);
        }
    }
}

#[test]
fn transfer_is_deterministic() {
    let run = || {
        let mut m = converted(2, 3, FeatureKind::Hedgehog);
        let corpus = Corpus::from_text(&synthetic_text(3, 40));
        train_transfer(&mut m, &TransferConfig { steps: 4, ..quick(1e-2) }, &corpus, &corpus).unwrap();
        m
    };
    assert_eq!(run(), run());
}

#[test]
fn transfer_rejects_bad_configs() {
    let m = tiny(4, 0);
    assert!(matches!(TransferTrainer::new(&m, quick(1e-2)), Err(Error::NotConverted)));
    let m = converted(4, 0, FeatureKind::T2r);
    let cfg = TransferConfig { block_size: Some(3), ..quick(1e-2) };
    assert!(matches!(TransferTrainer::new(&m, cfg), Err(Error::IndivisibleBlocks { layers: 4, block: 3 })));
    let cfg = TransferConfig { block_size: Some(0), ..quick(1e-2) };
    assert!(TransferTrainer::new(&m, cfg).is_err());
}

/// Gradients of each block's loss, in parameter order, summed over blocks.
fn block_grads(m: &Model, tokens: &[Vec<u32>], block: usize) -> Vec<Option<Tensor<f64>>> {
    let mut tape = Tape::<f64>::new();
    let bound = m.bind(&mut tape, ParamKind::is_attention_transfer);
    let recs = m.teacher_forced_graph(&mut tape, &bound, tokens).unwrap();
    let pairs: Vec<_> = recs.iter().map(|r| (r.y, r.y_hat)).collect();
    let losses = blockwise_mse(&mut tape, &pairs, block).unwrap();
    let mut total: Vec<Option<Tensor<f64>>> = vec![None; m.params().len()];
    for &l in &losses {
        for (acc, g) in total.iter_mut().zip(m.collect_grads(&tape.backward(l).unwrap(), &bound)) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                (None, g) => *acc = g,
                _ => {}
            }
        }
    }
    total
}

#[test]
fn block_gradients_match_joint_gradients() {
    let m = converted(4, 4, FeatureKind::Hedgehog);
    let tokens = batch(4, 2, 24);
    let joint = block_grads(&m, &tokens, 4);
    for b in [1, 2] {
        let blocks = block_grads(&m, &tokens, b);
        // block loss carries 1/b where the joint loss carries 1/M
        let rescale = b as f64 / 4.0;
        for ((p, j), g) in m.params().iter().zip(&joint).zip(&blocks) {
            let (Some(j), Some(g)) = (j, g) else {
                assert!(!p.kind.is_attention_transfer());
                continue;
            };
            for (&x, &y) in j.data().iter().zip(g.data()) {
                let y = y * rescale;
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-12), "{} b={b}: {x} vs {y}", p.name);
            }
        }
    }
}

#[test]
fn nan_feature_map_diverges() {
    let mut m = converted(2, 5, FeatureKind::Hedgehog);
    m.params_mut().get_mut("layers.1.attn.fmap_q.weight").data_mut()[0] = f32::NAN;
    let mut tr = TransferTrainer::new(&m, quick(1e-2)).unwrap();
    assert!(matches!(tr.step(&mut m, &batch(5, 2, 24)), Err(Error::DivergedLoss { step: 0 })));
}

#[test]
fn diagnostics_rows_and_collapse() {
    let mut m = tiny(3, 6);
    m.convert(HybridSpec::new(64, WindowMode::Terraced, FeatureKind::Hedgehog, 16), 7).unwrap();
    let batches = vec![batch(6, 2, 24)];
    let d = layerwise_diagnostics(&m, &batches).unwrap();
    assert_eq!(d.layers.len(), 3);
    for (i, l) in d.layers.iter().enumerate() {
        assert_eq!(l.layer, i);
        assert!(l.eval_mse <= 1e-10, "layer {i}: {}", l.eval_mse);
        assert!(l.mean_entropy.is_finite() && l.mean_entropy >= 0.0);
    }
    assert!(d.mean_esl.is_finite());
    let csv = d.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,eval_mse,mean_entropy"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn uniform_attention_entropy_is_log_of_positions() {
    let mut m = converted(2, 8, FeatureKind::T2r);
    // zero queries make every causal row uniform
    m.params_mut().get_mut("layers.1.attn.wq").data_mut().iter_mut().for_each(|v| *v = 0.0);
    let n = 24;
    let d = layerwise_diagnostics(&m, &[batch(8, 2, n)]).unwrap();
    let expect = (1..=n).map(|i| (i as f64).ln()).sum::<f64>() / n as f64;
    assert!((d.layers[1].mean_entropy - expect).abs() < 1e-9);
    assert!(d.layers[0].mean_entropy < expect);
}

#[test]
fn diagnostics_csv_written() {
    let m = converted(2, 9, FeatureKind::T2r);
    let d = layerwise_diagnostics(&m, &[batch(9, 1, 16)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diag.csv");
    d.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), d.to_csv());
}

fn with_adapters(seed: u64) -> Model {
    let mut m = converted(2, seed, FeatureKind::Hedgehog);
    m.attach_lora(LoraConfig::default(), seed).unwrap();
    m
}

#[test]
fn adjust_gradients_reach_only_adapters() {
    let m = with_adapters(10);
    let mut tape = Tape::<f64>::new();
    let bound = m.bind(&mut tape, ParamKind::is_adapter);
    let tokens = batch(10, 2, 25);
    let inputs: Vec<_> = tokens.iter().map(|w| w[..24].to_vec()).collect();
    let targets: Vec<_> = tokens.iter().map(|w| w[1..].to_vec()).collect();
    let logits = m.logits_graph(&mut tape, &bound, &inputs, AttnPath::Native).unwrap();
    let loss = next_token_loss(&mut tape, logits, &targets, None).unwrap();
    let grads = m.collect_grads(&tape.backward(loss).unwrap(), &bound);
    for (p, g) in m.params().iter().zip(&grads) {
        let norm = g.as_ref().map_or(0.0, |g| g.data().iter().map(|x| x * x).sum::<f64>());
        match p.kind {
            // B starts at zero, so only B receives gradient on the first step
            ParamKind::LoraB => assert!(norm > 0.0, "{} has no gradient", p.name),
            k if !k.is_adapter() => assert_eq!(norm, 0.0, "{} has a gradient", p.name),
            _ => {}
        }
    }
}

#[test]
fn adjust_steps_touch_only_adapters() {
    let mut m = with_adapters(11);
    let tokens = batch(11, 2, 25);
    let before = m.clone();
    let mut tr = adjust_trainer(&m, 0.0).unwrap();
    tr.step(&mut m, &tokens).unwrap();
    assert_eq!(m, before);
    let mut tr = adjust_trainer(&m, 1e-2).unwrap();
    for _ in 0..3 {
        tr.step(&mut m, &tokens).unwrap();
    }
    frozen_unchanged(&before, &m, ParamKind::is_adapter);
    assert_ne!(m, before);
}

#[test]
fn adjust_requires_conversion_and_adapters() {
    let m = tiny(2, 12);
    assert!(matches!(adjust_trainer(&m, 1e-3), Err(Error::NotConverted)));
    let m = converted(2, 12, FeatureKind::T2r);
    assert!(matches!(adjust_trainer(&m, 1e-3), Err(Error::AdaptersMissing)));
    let mut m = tiny(2, 12);
    let corpus = Corpus::from_text(&synthetic_text(12, 20));
    assert!(matches!(train_adjust(&mut m, &AdjustConfig::default(), &corpus, &corpus), Err(Error::NotConverted)));
}

/// Documents that repeat a short random byte pattern.
fn patterns(seed: u64, docs: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = Vec::new();
    for _ in 0..docs {
        let len = rng.random_range(2..=5);
        let pat: Vec<u8> = (0..len).map(|_| rng.random_range(b'a'..=b'p')).collect();
        text.extend(pat.iter().cycle().take(60));
        text.extend_from_slice(b"\n\n");
    }
    text
}

#[test]
fn adjust_learns_repeating_patterns() {
    for seed in 0..3 {
        let corpus = Corpus::from_text(&patterns(seed, 400));
        assert_eq!(corpus.tokens()[0], BOS);
        let (train, eval) = corpus.split(0.1);
        let mut m = converted(2, seed, FeatureKind::Hedgehog);
        let cfg = AdjustConfig {
            lr: 1e-2,
            steps: 500,
            batch_size: 8,
            seq_len: 32,
            seed,
            eval_every: 0,
            ..Default::default()
        };
        let r = train_adjust(&mut m, &cfg, &train, &eval).unwrap();
        let (a, b) = (r.initial_eval_loss, r.final_eval_loss);
        assert!(b <= 0.7 * a, "seed {seed}: {a} -> {b}");
    }
}
