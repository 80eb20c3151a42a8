use bliss_core::augment::Supervision;
use bliss_core::checkpoint::Checkpoint;
use bliss_core::model::{HeadTargets, ModelConfig, SourceBatch, TargetBatch, TrainBatch, Transformer};
use bliss_core::Error;
use bliss_tensor::{Graph, Tensor};

fn micro(lambda: f64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 24,
        vocab_size: 20,
        max_positions: 8,
        dropout: 0.0,
        label_smoothing: 0.1,
        lambda_token: lambda,
        lambda_pos: lambda,
    }
}

/// Two sentences: the first has a swap at 1<->2 and a replacement at 4, the
/// second a replacement at 0.
fn micro_batch() -> TrainBatch {
    let sources = vec![vec![7, 9, 8, 10, 15, 12], vec![19, 6, 13]];
    let targets = vec![vec![8, 7, 10, 9], vec![14, 6, 13, 17, 5]];
    let mut a = Supervision::empty(6);
    for (j, orig, from) in [(1, 8, 2), (2, 9, 1)] {
        a.token_mask[j] = true;
        a.token_labels[j] = orig;
        a.pos_mask[j] = true;
        a.pos_labels[j] = from;
    }
    a.token_mask[4] = true;
    a.token_labels[4] = 11;
    let mut b = Supervision::empty(3);
    b.token_mask[0] = true;
    b.token_labels[0] = 18;
    TrainBatch::new(&sources, &targets, vec![a, b], 8).unwrap()
}

fn total_loss(model: &Transformer, batch: &TrainBatch) -> f64 {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false).unwrap();
    model.bliss_loss(&mut g, &b, batch, &mut None).unwrap().total_value
}

/// Relative-error floor; below it the gradient is indistinguishable from
/// finite-difference roundoff.
const GRAD_FLOOR: f64 = 1e-4;

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let mut model = Transformer::new(micro(0.005), 11).unwrap();
    let batch = micro_batch();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true).unwrap();
    let out = model.bliss_loss(&mut g, &bound, &batch, &mut None).unwrap();
    assert!(out.token.count == 4 && out.pos.count == 2);
    let grads = g.backward(out.total).unwrap();
    let analytic: Vec<Tensor> = bound.vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for p in 0..model.params().len() {
        for k in 0..model.params()[p].len() {
            let orig = model.params()[p].data()[k];
            model.param_mut(p).data_mut()[k] = orig + h;
            let up = total_loss(&model, &batch);
            model.param_mut(p).data_mut()[k] = orig - h;
            let down = total_loss(&model, &batch);
            model.param_mut(p).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}] analytic {a} numeric {numeric}", model.param_names()[p]));
            }
        }
    }
    assert!(worst.0 < 1e-4, "worst relative error {} at {}", worst.0, worst.1);
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Transformer::new(micro(0.005), 3).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true).unwrap();
    let out = model.bliss_loss(&mut g, &bound, &micro_batch(), &mut None).unwrap();
    let grads = g.backward(out.total).unwrap();
    for (name, &v) in model.param_names().iter().zip(&bound.vars) {
        let grad = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.sum_squares() > 0.0, "{name} gradient is zero");
    }
}

#[test]
fn head_shapes() {
    let c = ModelConfig {
        vocab_size: 37,
        max_positions: 50,
        ..ModelConfig::default()
    };
    let m = Transformer::new(c.clone(), 1).unwrap();
    assert_eq!(m.param("head.token").unwrap().shape(), &[c.d_model, 37]);
    assert_eq!(m.param("head.pos").unwrap().shape(), &[c.d_model, 50]);
    assert_eq!(m.param("embed").unwrap().shape(), &[37, c.d_model]);
}

fn logits(model: &Transformer, src: &SourceBatch, tgt: &TargetBatch) -> Tensor {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false).unwrap();
    let mem = model.encode(&mut g, &b, src, &mut None).unwrap();
    let out = model.decode(&mut g, &b, mem, src, tgt, &mut None).unwrap();
    g.value(out).clone()
}

#[test]
fn decoder_is_causal() {
    let model = Transformer::new(micro(0.005), 5).unwrap();
    let src = SourceBatch::new(&[vec![7, 8, 9]], 8).unwrap();
    let base = vec![10, 11, 12, 13, 14];
    let reference = logits(&model, &src, &TargetBatch::new(&[base.clone()], 8).unwrap());
    let v = model.config().vocab_size;
    for t in 0..base.len() {
        let mut changed = base.clone();
        for tok in changed.iter_mut().skip(t) {
            *tok = 5 + (*tok + 3) % 15;
        }
        let out = logits(&model, &src, &TargetBatch::new(&[changed], 8).unwrap());
        // decoder input row t is bos or token t-1, so rows 0..=t saw no change
        for row in 0..=t {
            assert_eq!(
                out.data()[row * v..(row + 1) * v],
                reference.data()[row * v..(row + 1) * v],
                "row {row} changed after mutating targets from {t}"
            );
        }
    }
}

#[test]
fn pad_content_is_invisible() {
    let model = Transformer::new(micro(0.005), 6).unwrap();
    let src = SourceBatch::new(&[vec![7, 8, 9, 10], vec![11, 12]], 8).unwrap();
    let encode = |s: &SourceBatch| model.encode_batch(s).unwrap().memory;
    let base = encode(&src);
    let mut noisy = src.clone();
    let w = noisy.width;
    noisy.ids[w + 4] = 17;
    noisy.ids[w + 5] = 6;
    let other = encode(&noisy);
    let e = model.config().d_model;
    for b in 0..2 {
        let valid = src.lens[b] * e;
        let off = b * w * e;
        assert_eq!(base.data()[off..off + valid], other.data()[off..off + valid]);
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let model = Transformer::new(micro(0.005), 6).unwrap();
    let a = model.encode_sentence(&[5, 6, 7]).unwrap();
    let b = model.encode_sentence(&[5, 6, 7]).unwrap();
    assert_eq!(a.shape(), &[5, 16]);
    assert_eq!(a, b);
}

#[test]
fn overlength_inputs_are_rejected() {
    let model = Transformer::new(micro(0.005), 6).unwrap();
    assert!(matches!(model.encode_sentence(&[5; 7]), Err(Error::TooLong { len: 9, limit: 8 })));
    let src = SourceBatch::new(&[vec![5]], 8).unwrap();
    let enc = model.encode_batch(&src).unwrap();
    assert!(model.next_token_log_probs(&enc, &[vec![1; 9]]).is_err());
}

#[test]
fn loss_is_linear_in_lambda() {
    let batch = micro_batch();
    let base = Transformer::new(micro(0.0), 9).unwrap();
    let zero = total_loss(&base, &batch);
    let mut g = Graph::new();
    let b = base.bind(&mut g, false).unwrap();
    let parts = base.bliss_loss(&mut g, &b, &batch, &mut None).unwrap();
    assert_eq!(zero, parts.nll);
    for (lt, lp) in [(0.005, 0.005), (0.3, 0.0), (0.0, 2.0), (1.5, 0.25)] {
        let model = base
            .with_config(ModelConfig {
                lambda_token: lt,
                lambda_pos: lp,
                ..micro(0.0)
            })
            .unwrap();
        let total = total_loss(&model, &batch);
        let expected = lt * parts.token.loss + lp * parts.pos.loss;
        assert!((total - zero - expected).abs() < 1e-12, "{lt} {lp}");
    }
}

#[test]
fn empty_supervision_gives_zero_head_losses() {
    let model = Transformer::new(micro(0.005), 2).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g, false).unwrap();
    let src = SourceBatch::new(&[vec![6, 7]], 8).unwrap();
    let mem = model.encode(&mut g, &b, &src, &mut None).unwrap();
    let ((lt, st), (lp, sp)) = model
        .self_supervision_losses(&mut g, &b, mem, &HeadTargets::default())
        .unwrap();
    assert_eq!((g.value(lt).item(), g.value(lp).item()), (0.0, 0.0));
    assert_eq!((st.count, sp.count), (0, 0));
}

fn single_token_targets() -> HeadTargets {
    HeadTargets {
        token_rows: vec![2],
        token_labels: vec![42],
        ..HeadTargets::default()
    }
}

fn token_head_loss(model: &Transformer) -> f64 {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false).unwrap();
    let src = SourceBatch::new(&[vec![30, 31, 32, 33]], model.config().max_positions).unwrap();
    let mem = model.encode(&mut g, &b, &src, &mut None).unwrap();
    let ((lt, _), _) = model.self_supervision_losses(&mut g, &b, mem, &single_token_targets()).unwrap();
    g.value(lt).item()
}

#[test]
fn untrained_token_head_is_near_uniform() {
    let config = ModelConfig {
        vocab_size: 100,
        ..ModelConfig::default()
    };
    let losses: Vec<f64> = (0..100)
        .map(|seed| token_head_loss(&Transformer::new(config.clone(), seed).unwrap()))
        .collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((mean - 100f64.ln()).abs() < 0.5, "mean initial token loss {mean}");
}

#[test]
fn zero_token_head_gives_exactly_ln_v() {
    let config = ModelConfig {
        vocab_size: 100,
        ..ModelConfig::default()
    };
    let mut model = Transformer::new(config, 4).unwrap();
    let i = model.param_index("head.token").unwrap();
    model.param_mut(i).data_mut().iter_mut().for_each(|w| *w = 0.0);
    assert_eq!(token_head_loss(&model), 100f64.ln());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Transformer::new(micro(0.005), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    let back = Transformer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in back.params().iter().zip(model.params()) {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let batch = micro_batch();
    assert_eq!(total_loss(&back, &batch).to_bits(), total_loss(&model, &batch).to_bits());
}

#[test]
fn checkpoint_with_wrong_shapes_is_rejected() {
    let model = Transformer::new(micro(0.005), 8).unwrap();
    let mut ck = model.to_checkpoint();
    ck.tensors[0].1 = Tensor::zeros(&[3, 3]);
    assert!(Transformer::from_checkpoint(&ck).is_err());
    let mut ck = model.to_checkpoint();
    ck.tensors.pop();
    assert!(Transformer::from_checkpoint(&ck).is_err());
}

#[test]
fn dropout_changes_training_forward_only() {
    use rand::SeedableRng;
    let model = Transformer::new(
        ModelConfig {
            dropout: 0.3,
            ..micro(0.005)
        },
        8,
    )
    .unwrap();
    let batch = micro_batch();
    let eval = total_loss(&model, &batch);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let b = model.bind(&mut g, true).unwrap();
    let train = model.bliss_loss(&mut g, &b, &batch, &mut Some(&mut rng)).unwrap().total_value;
    assert_ne!(eval, train);
    assert_eq!(eval, total_loss(&model, &batch));
}
