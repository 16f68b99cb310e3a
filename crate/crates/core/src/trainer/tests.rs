use super::*;
use crate::attention::ShareConfig;
use crate::model::ModelConfig;
use proptest::prelude::*;
use rand::Rng;

fn tiny_model(seed: u64) -> Model<f32> {
    let share = ShareConfig::new(2, 2, 1, 1, 4).unwrap();
    Model::init(
        ModelConfig::uniform(BYTE_VOCAB, 16, share, 16).unwrap(),
        seed,
    )
    .unwrap()
}

fn corpus(docs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran"];
    (0..docs)
        .map(|_| {
            let n = rng.random_range(2..8);
            let text: Vec<&str> = (0..n)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect();
            encode_bytes(&text.join(" "))
        })
        .collect()
}

#[test]
fn byte_round_trip() {
    let text = "héllo, wörld";
    let tokens = encode_bytes(text);
    assert!(tokens.iter().all(|&t| t < 256));
    let mut with_specials = vec![BOS];
    with_specials.extend(&tokens);
    with_specials.push(EOS);
    assert_eq!(decode_bytes(&with_specials), text);
}

#[test]
fn corpus_formats() {
    let lines = parse_corpus("one\n\ntwo two\n", CorpusFormat::Lines).unwrap();
    assert_eq!(lines, vec!["one", "two two"]);
    let jsonl = parse_corpus(
        "{\"text\": \"a\"}\n{\"text\": \"b c\", \"id\": 3}\n",
        CorpusFormat::Jsonl,
    )
    .unwrap();
    assert_eq!(jsonl, vec!["a", "b c"]);
    assert!(parse_corpus("{\"body\": \"a\"}", CorpusFormat::Jsonl).is_err());
}

#[test]
fn packing_examples() {
    let eos = 99;
    let docs = vec![vec![1, 2, 3], vec![4, 5, 6, 7]];
    let data = pack_documents(&docs, 9, eos).unwrap();
    assert_eq!(data.rows, vec![vec![1, 2, 3, eos, 4, 5, 6, 7, eos]]);

    let data = pack_documents(&docs, 6, eos).unwrap();
    assert_eq!(data.rows, vec![vec![1, 2, 3, eos, 4, 5]]);
    assert_eq!(data.stats.truncated, 2);

    let data = pack_documents(&[vec![1, 2, 3], vec![4, 5, 6, 7]], 10, eos).unwrap();
    assert!(data.rows.is_empty());
    assert_eq!(data.stats.discarded, 7);

    let long: Vec<usize> = (0..16).collect();
    let data = pack_documents(std::slice::from_ref(&long), 8, eos).unwrap();
    assert_eq!(data.rows, vec![long[..8].to_vec(), long[8..].to_vec()]);

    let data = pack_documents(&[vec![1], (10..20).collect(), vec![2, 3]], 4, eos).unwrap();
    assert_eq!(
        data.rows,
        vec![
            vec![10, 11, 12, 13],
            vec![14, 15, 16, 17],
            vec![1, eos, 18, 19]
        ]
    );
    assert_eq!((data.stats.truncated, data.stats.discarded), (0, 2));

    assert!(matches!(
        pack_documents(&[vec![]], 8, eos),
        Err(Error::EmptyCorpus)
    ));
    assert!(pack_documents(&docs, 1, eos).is_err());
}

#[test]
fn first_fit_skips_units_that_do_not_fit() {
    let eos = 0;
    let docs = vec![vec![1, 1, 1], vec![2, 2, 2, 2, 2], vec![3]];
    let data = pack_documents(&docs, 6, eos).unwrap();
    assert_eq!(data.rows[0], vec![1, 1, 1, eos, 3, eos]);
    assert_eq!(data.rows.len(), 2);
    assert_eq!(data.rows[1], vec![2, 2, 2, 2, 2, eos]);
}

proptest! {
    #[test]
    fn packed_tokens_are_traceable(
        lens in proptest::collection::vec(0usize..40, 1..30),
        max_seq in 2usize..24,
    ) {
        prop_assume!(lens.iter().any(|&l| l > 0));
        let docs: Vec<Vec<usize>> = lens
            .iter()
            .enumerate()
            .map(|(d, &l)| (0..l).map(|p| (d * 7 + p * 3) % 250).collect())
            .collect();
        let eos = 257;
        let (data, origins) = pack_traced(&docs, max_seq, eos).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (row, trace) in data.rows.iter().zip(&origins) {
            prop_assert_eq!(row.len(), max_seq);
            for (&tok, origin) in row.iter().zip(trace) {
                match *origin {
                    TokenOrigin::Doc { doc, pos } => {
                        prop_assert_eq!(tok, docs[doc][pos]);
                        prop_assert!(seen.insert((doc, pos)));
                    }
                    TokenOrigin::Eos { .. } => prop_assert_eq!(tok, eos),
                }
            }
        }
        let s = data.stats;
        prop_assert_eq!(s.packed_tokens, seen.len());
        prop_assert_eq!(s.input_tokens, s.packed_tokens + s.truncated + s.discarded);
    }
}

#[test]
fn schedule_points() {
    let plan = TrainPlan::new(4, 100, 0);
    assert_eq!(lr_at(0, &plan).unwrap(), 0.0);
    assert!((lr_at(20, &plan).unwrap() - 6e-4).abs() < 1e-15);
    assert!((lr_at(100, &plan).unwrap() - 6e-5).abs() < 1e-15);
    assert!((lr_at(10, &plan).unwrap() - 3e-4).abs() < 1e-15);
    assert!(lr_at(101, &plan).is_err());
    let lrs: Vec<f64> = (20..=100).map(|s| lr_at(s, &plan).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn schedule_is_continuous_at_warmup_end() {
    let plan = TrainPlan::new(1, 37, 0);
    let warmup = plan.warmup_ratio * plan.total_steps as f64;
    let left = plan.base_lr * (warmup - 1e-9) / warmup;
    let progress_right = 1e-9 / (plan.total_steps as f64 - warmup);
    let floor = 0.1 * plan.base_lr;
    let right = floor
        + (plan.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress_right).cos());
    assert!((left - plan.base_lr).abs() < 1e-12);
    assert!((right - plan.base_lr).abs() < 1e-12);
}

#[test]
fn plan_validation() {
    let mut plan = TrainPlan::new(4, 10, 0);
    assert!(plan.validate().is_ok());
    plan.warmup_ratio = 1.0;
    assert!(plan
        .validate()
        .unwrap_err()
        .to_string()
        .contains("warmup_ratio"));
    let mut plan = TrainPlan::new(4, 10, 0);
    plan.betas.1 = 1.0;
    assert!(plan.validate().unwrap_err().to_string().contains("beta2"));
}

#[test]
fn zero_gradient_decays_only_weights() {
    let model = tiny_model(1);
    let mut params = model.params().clone();
    for t in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.5);
    }
    let zeros = params.map(|_, t| Tensor2::zeros(t.rows(), t.cols()));
    let plan = TrainPlan::new(1, 10, 0);
    let mut opt = AdamW::new(&params, &plan);
    opt.step(&mut params, &zeros, 1e-2);
    for (name, t) in params.named() {
        let want = if is_norm_or_bias(&name) {
            0.5
        } else {
            0.5 * (1.0 - 1e-2 * 0.01)
        };
        assert!(t.data().iter().all(|&v| v == want as f32), "{name}");
    }
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut params = tiny_model(2).params().clone();
    let before = params.clone();
    let grads = params.map(|_, t| Tensor2::from_fn(t.rows(), t.cols(), |_, _| 3.0f32));
    let mut plan = TrainPlan::new(1, 10, 0);
    plan.weight_decay = 0.0;
    let mut opt = AdamW::new(&params, &plan);
    opt.step(&mut params, &grads, 1e-3);
    for ((_, a), (_, b)) in params.named().iter().zip(before.named()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(((y - x) as f64 - 1e-3).abs() < 1e-6);
        }
    }
}

fn dataset(rows: usize, seq: usize, seed: u64) -> PackedDataset {
    let data = pack_documents(&corpus(rows * 4, seed), seq, EOS).unwrap();
    let mut data = data;
    data.rows.truncate(rows);
    assert_eq!(data.rows.len(), rows);
    data
}

#[test]
fn training_reduces_loss() {
    let mut model = tiny_model(3);
    let data = dataset(32, 17, 4);
    let mut plan = TrainPlan::new(8, 50, 5);
    plan.base_lr = 1e-2;
    let history = uptrain(&mut model, &data, &plan).unwrap();
    assert_eq!(history.len(), 50);
    let first = history[0].loss;
    let last = eval_loss(&model, &data).unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn training_is_bit_deterministic() {
    let data = dataset(16, 9, 6);
    let plan = TrainPlan::new(4, 12, 7);
    let mut a = tiny_model(8);
    let mut b = tiny_model(8);
    let ha = uptrain(&mut a, &data, &plan).unwrap();
    let hb = uptrain(&mut b, &data, &plan).unwrap();
    let bits = |h: &[StepLog]| h.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ha), bits(&hb));
    assert_eq!(a, b);

    let mut c = tiny_model(8);
    let hc = uptrain(&mut c, &data, &TrainPlan::new(4, 12, 8)).unwrap();
    assert_ne!(bits(&ha), bits(&hc));
}

#[test]
fn eval_matches_last_training_loss() {
    let data = dataset(4, 9, 9);
    let mut plan = TrainPlan::new(4, 5, 10);
    plan.shuffle = false;
    let mut model = tiny_model(11);
    let mut trainer = Trainer::new(&mut model, &data, plan).unwrap();
    for _ in 0..4 {
        trainer.step().unwrap();
    }
    let expected = eval_loss(trainer.model(), &data).unwrap();
    let last = trainer.step().unwrap();
    assert!(
        (last.loss - expected).abs() < 1e-6,
        "{} vs {expected}",
        last.loss
    );
    assert!(trainer.step().is_err());
}

#[test]
fn uniform_head_gives_log_vocab() {
    let mut model = tiny_model(12);
    let p = model.params_mut();
    p.unembed.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let data = dataset(5, 9, 13);
    let loss = eval_loss(&model, &data).unwrap();
    assert!((loss - (BYTE_VOCAB as f64).ln()).abs() < 1e-5);
    assert_eq!(loss.to_bits(), eval_loss(&model, &data).unwrap().to_bits());
}

#[test]
fn divergence_reports_step() {
    let mut model = tiny_model(14);
    model.params_mut().unembed.data_mut()[0] = f32::INFINITY;
    let data = dataset(4, 9, 15);
    let err = uptrain(&mut model, &data, &TrainPlan::new(2, 3, 0)).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0 }), "{err}");
}

#[test]
fn subset_is_seeded_fraction() {
    let data = dataset(40, 9, 16);
    let a = data.subset(0.05, 1).unwrap();
    assert_eq!(a.row_count(), 2);
    assert_eq!(a, data.subset(0.05, 1).unwrap());
    assert!(a.rows.iter().all(|r| data.rows.contains(r)));
    assert!(data.subset(0.0, 1).is_err());
}

#[test]
fn loss_csv_schema() {
    let mut out = Vec::new();
    write_loss_csv(
        &mut out,
        &[StepLog {
            step: 0,
            lr: 1e-4,
            loss: 5.5,
        }],
    )
    .unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,lr,loss"));
    assert_eq!(lines.next().unwrap().split(',').count(), 3);
}
