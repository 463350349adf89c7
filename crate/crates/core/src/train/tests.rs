use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{begin_id, end_id, BOS, EOP};
use crate::model::{IncrementalDecoder, ModelConfig};
use crate::sequence::{enumerate_orders, EOP_GLOBAL};
use crate::tensor::log_softmax_in_place;

const V: usize = 36;

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        vocab_size: V,
        max_source_len: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn model(seed: u64) -> Model<f64> {
    Model::new(config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_paragraph<R: Rng>(rng: &mut R, t: usize) -> Paragraph {
    let word = |rng: &mut R| rng.random_range(24..V);
    let source = (0..rng.random_range(1..4)).map(|_| word(rng)).collect();
    let sentences = (0..t)
        .map(|_| (0..rng.random_range(1..4)).map(|_| word(rng)).collect())
        .collect();
    Paragraph::new(source, sentences).unwrap()
}

/// Scores a paragraph token by token with the cached decoder, building
/// positions directly from the order instead of through the sequence builder.
fn reference_logprobs(m: &Model<f64>, p: &Paragraph, order: &[usize]) -> Vec<f64> {
    let enc = m.encode_source(&p.source).unwrap();
    let mut stream = vec![(BOS, 0, 0)];
    for &t in order {
        let body = &p.sentences[t - 1];
        stream.push((begin_id(t), t, 1));
        for (j, &w) in body.iter().enumerate() {
            stream.push((w, t, j + 2));
        }
        stream.push((end_id(t), t, body.len() + 2));
    }
    stream.push((EOP, EOP_GLOBAL, 1));
    let mut dec = IncrementalDecoder::new(m, &enc);
    let mut out = Vec::new();
    for w in stream.windows(2) {
        let (tok, g, l) = w[0];
        let mut logits = dec.step(tok, g, l).unwrap();
        log_softmax_in_place(&mut logits);
        out.push(logits[w[1].0]);
    }
    out
}

fn example(p: &Paragraph, order: Vec<usize>) -> PermutedExample<'_> {
    PermutedExample {
        index: 0,
        paragraph: p,
        order: Permutation::new(order).unwrap(),
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = TrainConfig {
        base_lr: 1.0,
        warmup_steps: 4,
        max_steps: 10,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..12).map(|s| cfg.lr_at(s)).collect();
    assert_eq!(&lrs[..4], &[0.25, 0.5, 0.75, 1.0]);
    assert_eq!(lrs[4], 1.0);
    assert!(lrs[4..10].windows(2).all(|w| w[1] < w[0]));
    assert!(lrs.iter().all(|&x| x > 0.0));
    let no_warmup = TrainConfig {
        warmup_steps: 0,
        ..cfg
    };
    assert_eq!(no_warmup.lr_at(0), 1.0);
}

#[test]
fn config_rejects_bad_values() {
    assert!(TrainConfig::default().validate().is_ok());
    let c = TrainConfig {
        warmup_steps: 10,
        max_steps: 5,
        ..TrainConfig::default()
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = TrainConfig {
        base_lr: 0.0,
        ..TrainConfig::default()
    };
    assert!(c.validate().is_err());
    let parsed: std::result::Result<TrainConfig, _> =
        serde_json::from_str(r#"{"batch_size": 2, "bogus": 1}"#);
    assert!(parsed.is_err());
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let mut m = model(1);
    for name in ["tok_emb", "dec.out_bias"] {
        m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_paragraph(&mut rng, 3);
    let loss = permuted_nll(&m, &[example(&p, vec![3, 1, 2])]).unwrap();
    assert!((loss - (V as f64).ln()).abs() < 1e-12);
}

#[test]
fn loss_matches_independent_token_path() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in 1..=4 {
        let p = random_paragraph(&mut rng, t);
        let order = sample_order(t, &mut rng).unwrap();
        let lp = reference_logprobs(&m, &p, order.order());
        let want = -lp.iter().sum::<f64>() / lp.len() as f64;
        let got = paragraph_nll(&m, &p, &order).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn batch_loss_is_mean_of_examples() {
    let m = model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_paragraph(&mut rng, 2);
    let b = random_paragraph(&mut rng, 3);
    let batch = [example(&a, vec![2, 1]), example(&b, vec![1, 3, 2])];
    let each: Vec<f64> = batch
        .iter()
        .map(|e| permuted_nll(&m, std::slice::from_ref(e)).unwrap())
        .collect();
    let both = permuted_nll(&m, &batch).unwrap();
    assert!((both - (each[0] + each[1]) / 2.0).abs() < 1e-12);
    let (loss, _) = loss_and_grads(&m, &batch, None, 1).unwrap();
    assert!((loss - both).abs() < 1e-12);
}

#[test]
fn gradients_match_central_differences() {
    let m = model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_paragraph(&mut rng, 2);
    let q = random_paragraph(&mut rng, 3);
    let batch = [example(&p, vec![2, 1]), example(&q, vec![3, 1, 2])];
    let (_, grads) = loss_and_grads(&m, &batch, None, 1).unwrap();
    let h = 1e-5;
    for (pi, (name, t)) in m.params().iter().enumerate() {
        // A few entries per tensor keep this quick; the acceptance suite checks all.
        for _ in 0..3 {
            let j = rng.random_range(0..t.numel());
            let eval = |delta: f64| {
                let mut mm = m.clone();
                mm.params_mut().at_mut(pi).data_mut()[j] += delta;
                permuted_nll(&mm, &batch).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[pi][j];
            assert!(
                (an - fd).abs() <= 1e-3 * (1.0 + an.abs()),
                "{name}[{j}]: {an} vs {fd}"
            );
        }
    }
}

#[test]
fn thread_count_does_not_change_gradients() {
    let m = model(9).cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ps: Vec<Paragraph> = (0..5)
        .map(|i| random_paragraph(&mut rng, 1 + i % 3))
        .collect();
    let batch = sample_batch(&ps, 5, &mut rng).unwrap();
    let one = loss_and_grads(&m, &batch, Some(&[1, 2, 3, 4, 5]), 1).unwrap();
    let three = loss_and_grads(&m, &batch, Some(&[1, 2, 3, 4, 5]), 3).unwrap();
    assert_eq!(one, three);
}

#[test]
fn order_sampling_is_uniform() {
    let corpus = vec![random_paragraph(&mut ChaCha8Rng::seed_from_u64(0), 3)];
    let orders = enumerate_orders(3).unwrap();
    let mut counts = vec![0usize; orders.len()];
    let cfg = TrainConfig::default();
    for s in 0..10_000 {
        let ex = sample_batch(&corpus, 1, &mut cfg.step_rng(s)).unwrap();
        counts[orders.iter().position(|o| *o == ex[0].order).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 1e4 - 1.0 / 6.0).abs() < 0.02, "{c}");
    }
}

#[test]
fn exact_likelihood_single_sentence_is_sequence_logprob() {
    let m = model(11);
    let p = random_paragraph(&mut ChaCha8Rng::seed_from_u64(12), 1);
    let r = likelihood_report(&m, &p).unwrap();
    let direct: f64 = reference_logprobs(&m, &p, &[1]).iter().sum();
    assert!((r.exact - direct).abs() < 1e-9);
    assert!((r.jensen - direct).abs() < 1e-9);
    assert_eq!(r.normalized, r.exact);
}

#[test]
fn uniform_model_attains_jensen_equality() {
    let mut m = model(13);
    for name in ["tok_emb", "dec.out_bias"] {
        m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let p = random_paragraph(&mut ChaCha8Rng::seed_from_u64(14), 3);
    let r = likelihood_report(&m, &p).unwrap();
    let per = r.per_order[0].1;
    assert!(r.per_order.iter().all(|(_, v)| (v - per).abs() < 1e-12));
    assert!((r.exact - (per + 6f64.ln())).abs() < 1e-9);
    assert!((r.jensen - r.exact).abs() < 1e-9);
}

#[test]
fn exact_likelihood_refuses_large_paragraphs() {
    let m = model(15);
    let p = random_paragraph(&mut ChaCha8Rng::seed_from_u64(16), 6);
    let err = exact_log_likelihood(&m, &p).unwrap_err().to_string();
    assert!(err.contains("budget of 5"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn jensen_bound_never_exceeds_exact(seed in any::<u64>(), t in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::<f64>::new(config(), &mut rng).unwrap();
        let p = random_paragraph(&mut rng, t);
        let r = likelihood_report(&m, &p).unwrap();
        prop_assert!(r.jensen <= r.exact + 1e-9);
        prop_assert_eq!(r.per_order.len(), (1..=t).product::<usize>());
    }
}

fn tiny_corpus() -> Vec<Paragraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..4)
        .map(|i| random_paragraph(&mut rng, 1 + i % 3))
        .collect()
}

fn small_run_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        base_lr: 1e-2,
        warmup_steps: 2,
        max_steps: 8,
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_loss() {
    let corpus = tiny_corpus();
    let mut tr = Trainer::new(
        model(22).cast::<f32>(),
        TrainConfig {
            max_steps: 60,
            ..small_run_config()
        },
    )
    .unwrap();
    let all: Vec<PermutedExample<'_>> = corpus
        .iter()
        .map(|p| example(p, (1..=p.num_sentences()).collect()))
        .collect();
    let before = permuted_nll(tr.model(), &all).unwrap();
    let mut logged = 0;
    tr.run_until(&corpus, u64::MAX, |_, r| {
        logged += 1;
        assert_eq!(r.pi_sample.len(), 2);
        Ok(())
    })
    .unwrap();
    assert_eq!(logged, 60);
    assert!(tr.is_done());
    assert!(permuted_nll(tr.model(), &all).unwrap() < before);
}

#[test]
fn sgd_trainer_applies_literal_updates() {
    let corpus = tiny_corpus();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        clip_norm: 0.0,
        ..small_run_config()
    };
    let mut tr = Trainer::new(model(23), cfg.clone()).unwrap();
    let before = tr.model().clone();
    let mut rng = cfg.step_rng(0);
    let batch = sample_batch(&corpus, cfg.batch_size, &mut rng).unwrap();
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.next_u64()).collect();
    let (_, g) = loss_and_grads(&before, &batch, Some(&seeds), 1).unwrap();
    tr.train_step(&corpus).unwrap();
    let lr = cfg.lr_at(0);
    for (i, (_, t)) in tr.model().params().iter().enumerate() {
        let old = before.params().at(i).data();
        for j in 0..t.numel() {
            assert_eq!(t.data()[j], old[j] - lr * g[i][j]);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let corpus = tiny_corpus();
    let mut tr = Trainer::new(model(24).cast::<f32>(), small_run_config()).unwrap();
    tr.run_until(&corpus, 3, |_, _| Ok(())).unwrap();
    let ck = tr.checkpoint("abc", serde_json::json!({"config_hash": "xyz"}));
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn checkpoint_detects_tampering_and_mismatches() {
    let ck = Checkpoint::from_model(&model(25).cast::<f32>(), "hash-a");
    let bytes = ck.to_bytes().unwrap();
    let mut tampered = bytes.clone();
    tampered[20] ^= 1;
    let err = Checkpoint::from_bytes(&tampered).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    let mut versioned = bytes.clone();
    versioned[4] = 9;
    let err = Checkpoint::from_bytes(&versioned).unwrap_err().to_string();
    assert!(
        err.contains("version 9") && err.contains("expected 1"),
        "{err}"
    );

    assert!(Checkpoint::from_bytes(b"nope").is_err());
    let err = ck.check_vocab("hash-b").unwrap_err().to_string();
    assert!(err.contains("hash-a") && err.contains("hash-b"), "{err}");
    assert!(ck.check_vocab("hash-a").is_ok());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = tiny_corpus();
    let mut cfg = small_run_config();
    cfg.threads = 1;
    let start = model(26).cast::<f32>();
    let mut full = Trainer::new(start.clone(), cfg.clone()).unwrap();
    full.run_until(&corpus, 8, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(start, cfg.clone()).unwrap();
    first.run_until(&corpus, 5, |_, _| Ok(())).unwrap();
    let bytes = first
        .checkpoint("v", serde_json::Value::Null)
        .to_bytes()
        .unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), cfg).unwrap();
    resumed.run_until(&corpus, 8, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.step(), 8);
    assert_eq!(resumed.model().params(), full.model().params());
    assert_eq!(resumed.optimizer(), full.optimizer());
}

#[test]
fn non_finite_loss_reports_the_example() {
    let corpus = tiny_corpus();
    let mut m = model(27);
    m.params_mut().get_mut("dec.out_bias").unwrap().data_mut()[30] = f64::NAN;
    let mut tr = Trainer::new(m, small_run_config()).unwrap();
    let err = tr.train_step(&corpus).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    let msg = err.to_string();
    assert!(msg.contains("step 0") && msg.contains("order"), "{msg}");
}
