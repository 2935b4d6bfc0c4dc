mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transference::model::{decode_forward, encode, Checkpoint, ModelConfig, PaddedIds, Runtime};
use transference::tensor::{NamedTensors, ParamVars, Tape, Tensor};
use transference::trainer::{
    average_checkpoints, label_smoothed_loss, make_batches, Adam, EncodedPair, Phase, TrainConfig,
    Trainer,
};
use transference::vocab::PAD_ID;
use transference::Error;

fn scalar_params(values: &[f32]) -> NamedTensors<f32> {
    let mut p = NamedTensors::new();
    p.insert("x", Tensor::new([values.len()], values.to_vec()).unwrap())
        .unwrap();
    p
}

#[test]
fn zero_gradient_from_fresh_state_is_a_fixed_point() {
    let mut p = scalar_params(&[0.5, -2.0, 3.0]);
    let before = p.clone();
    let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
    adam.step(&mut p, &scalar_params(&[0.0; 3]), 0.1).unwrap();
    assert_eq!(p, before);
}

#[test]
fn three_step_trace_matches_recurrence() {
    let (b1, b2, eps, lr) = (0.9f64, 0.98f64, 1e-9f64, 0.01f64);
    let mut p = scalar_params(&[1.0]);
    let mut adam = Adam::new(&p, b1, b2, eps);
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        adam.step(&mut p, &scalar_params(&[1.0]), lr).unwrap();
        m = b1 * m + (1.0 - b1);
        v = b2 * v + (1.0 - b2);
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
    }
    let got = p.get("x").unwrap().data()[0] as f64;
    assert!((got - theta).abs() < 1e-6, "{got} vs {theta}");
    assert!((theta - 0.97).abs() < 1e-6);
}

#[test]
fn fresh_step_moves_against_gradient_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init: Vec<f32> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad: Vec<f32> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut p = scalar_params(&init);
    Adam::new(&p, 0.9, 0.98, 1e-9)
        .step(&mut p, &scalar_params(&grad), 1e-3)
        .unwrap();
    for ((a, b), g) in init.iter().zip(p.get("x").unwrap().data()).zip(&grad) {
        assert_eq!((b - a).signum(), -g.signum());
    }
}

fn arb_pairs() -> impl Strategy<Value = Vec<EncodedPair>> {
    prop::collection::vec((1usize..40, 1usize..40), 1..100).prop_map(|lens| {
        lens.into_iter()
            .enumerate()
            .map(|(i, (s, t))| EncodedPair {
                index: i,
                words: vec![4; s.min(5)],
                subwords: vec![5; s],
                target: vec![6; t],
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_partition_the_surviving_pairs(pairs in arb_pairs(), budget in 40usize..400, max_len in 10usize..45, seed: u64, epoch in 0usize..5) {
        let batches = make_batches(&pairs, budget, max_len, seed, epoch).unwrap();
        let mut seen = Vec::new();
        for b in &batches {
            prop_assert!(!b.is_empty());
            let longest = b.iter().map(|&i| pairs[i].cost()).max().unwrap();
            prop_assert!(b.len() * longest <= budget);
            seen.extend(b.iter().copied());
        }
        let unique: BTreeSet<usize> = seen.iter().copied().collect();
        prop_assert_eq!(unique.len(), seen.len());
        let surviving: BTreeSet<usize> = (0..pairs.len())
            .filter(|&i| pairs[i].subwords.len() <= max_len && pairs[i].target.len() <= max_len)
            .collect();
        prop_assert_eq!(unique, surviving);
        prop_assert_eq!(&batches, &make_batches(&pairs, budget, max_len, seed, epoch).unwrap());
    }
}

#[test]
fn epochs_reshuffle() {
    let pairs: Vec<EncodedPair> = (0..100)
        .map(|i| EncodedPair {
            index: i,
            words: vec![4; 3],
            subwords: vec![5; 3],
            target: vec![6; 1 + i % 7],
        })
        .collect();
    let a = make_batches(&pairs, 40, 256, 9, 1).unwrap();
    let b = make_batches(&pairs, 40, 256, 9, 2).unwrap();
    assert_ne!(a, b);
}

fn mini() -> ModelConfig {
    ModelConfig::miniature(8, 2, 20, 20)
}

#[test]
fn averaging_identities() {
    let c = Checkpoint::init(mini(), 3).unwrap();
    let eight = vec![c.clone(); 8];
    assert_eq!(average_checkpoints(&eight).unwrap().params, c.params);

    let mut neg = c.clone();
    for (_, t) in neg.params.iter_mut() {
        *t = t.map(|x| -x);
    }
    let zero = average_checkpoints(&[c.clone(), neg]).unwrap();
    assert!(zero
        .params
        .iter()
        .all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn averaging_matches_scalar_loop_and_ignores_order() {
    let mut ckpts: Vec<Checkpoint> = (0..3)
        .map(|s| Checkpoint::init(mini(), 10 + s).unwrap())
        .collect();
    for (i, c) in ckpts.iter_mut().enumerate() {
        c.step = 100 * (i as u64 + 1);
    }
    ckpts[2].config.dropout = 0.25;
    let avg = average_checkpoints(&ckpts).unwrap();
    for (name, t) in avg.params.iter() {
        let a = ckpts[0].params.get(name).unwrap().data();
        let b = ckpts[1].params.get(name).unwrap().data();
        let c = ckpts[2].params.get(name).unwrap().data();
        for i in 0..t.len() {
            let want = ((a[i] as f64 + b[i] as f64 + c[i] as f64) / 3.0) as f32;
            assert_eq!(t.data()[i], want, "{name}[{i}]");
        }
    }
    assert_eq!(avg.step, 300);
    assert_eq!(avg.config.dropout, 0.25);
    let reversed: Vec<Checkpoint> = ckpts.iter().rev().cloned().collect();
    assert_eq!(average_checkpoints(&reversed).unwrap(), avg);
}

#[test]
fn averaging_mismatch_names_the_tensor() {
    let a = Checkpoint::init(mini(), 1).unwrap();
    let b = Checkpoint::init(ModelConfig::miniature(8, 2, 21, 20), 1).unwrap();
    let err = average_checkpoints(&[a, b]).unwrap_err().to_string();
    assert!(err.contains("`embed/bpe`"), "{err}");
}

fn toy_pairs(n: usize, seed: u64) -> Vec<EncodedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(2..6);
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(4..20)).collect();
            EncodedPair {
                index: i,
                words: src.clone(),
                subwords: src.clone(),
                target: src.iter().map(|&s| 4 + (s * 7) % 16).collect(),
            }
        })
        .collect()
}

#[test]
fn appending_padding_leaves_loss_unchanged() {
    let cfg = mini();
    let params = common::random_params(&cfg, 21);
    let pairs = toy_pairs(3, 2);
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    let batch = EncodedPair::collate(&refs).unwrap();
    let loss_with = |prefix: &PaddedIds, labels: &[usize]| {
        let tape = Tape::<f64>::new();
        let pv = ParamVars::bind(&tape, &params);
        let enc = encode(&cfg, &pv, &batch.source, &mut Runtime::eval()).unwrap();
        let logits = decode_forward(&cfg, &pv, &enc, prefix, &mut Runtime::eval()).unwrap();
        let loss = label_smoothed_loss(logits, labels, 0.1, PAD_ID).unwrap();
        loss.value().item().unwrap()
    };
    let base = loss_with(&batch.prefix, &batch.labels);
    let (len, extra) = (batch.prefix.len, 3);
    let mut longer = PaddedIds {
        batch: batch.prefix.batch,
        len: len + extra,
        ids: Vec::new(),
        valid: Vec::new(),
    };
    let mut labels = Vec::new();
    for b in 0..batch.prefix.batch {
        longer.ids.extend(batch.prefix.row(b));
        longer.ids.extend([PAD_ID; 3]);
        longer
            .valid
            .extend(&batch.prefix.valid[b * len..(b + 1) * len]);
        longer.valid.extend([false; 3]);
        labels.extend(&batch.labels[b * len..(b + 1) * len]);
        labels.extend([PAD_ID; 3]);
    }
    assert_eq!(loss_with(&longer, &labels), base);
}

fn quick_config(epochs: usize, finetune_epochs: usize, keep: usize) -> TrainConfig {
    TrainConfig {
        warmup_steps: 20,
        batch_tokens: 40,
        epochs,
        finetune_epochs,
        checkpoint_keep: keep,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn two_phase_training_writes_layout_and_continues_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (generic, finetune, val) = (toy_pairs(24, 1), toy_pairs(8, 2), toy_pairs(6, 3));
    let mut tr = Trainer::new(Checkpoint::init(mini(), 1).unwrap(), quick_config(3, 2, 2))
        .unwrap()
        .with_output_dir(dir.path());
    let out = tr.train(&generic, &finetune, &val).unwrap();

    assert_eq!(out.generic.kept.len(), 2);
    assert_eq!(out.finetune.as_ref().unwrap().kept.len(), 2);
    for n in 1..=5 {
        assert!(dir.path().join(format!("ckpt/epoch_{n}.tfrx")).exists());
    }
    let on_disk = Checkpoint::load(&dir.path().join("ckpt/averaged.tfrx")).unwrap();
    assert_eq!(on_disk, out.final_model);

    let generic_steps = out.generic.epochs.last().unwrap().step;
    let ft = &out.finetune.as_ref().unwrap().epochs;
    assert!(ft[0].step > generic_steps);
    assert_eq!(ft.last().unwrap().step, tr.step());
    let steps: Vec<u64> = tr.log.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=tr.step()).collect::<Vec<_>>());
    assert!(tr.log.iter().any(|r| r.phase == Phase::Finetune));

    let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,phase,lr,train_loss,val_loss"));
    assert_eq!(lines.count() as u64, tr.step());
    assert_eq!(csv.lines().filter(|l| !l.ends_with(',')).count(), 1 + 5);
}

#[test]
fn best_k_keeps_min_of_epochs_and_k() {
    let (generic, val) = (toy_pairs(16, 1), toy_pairs(4, 3));
    for (epochs, keep, want) in [(3, 8, 3), (4, 2, 2)] {
        let mut tr = Trainer::new(
            Checkpoint::init(mini(), 1).unwrap(),
            quick_config(epochs, 0, keep),
        )
        .unwrap();
        let out = tr.train(&generic, &[], &val).unwrap();
        assert_eq!(out.generic.kept.len(), want);
        let mut by_val = out.generic.epochs.clone();
        by_val.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
        let best: BTreeSet<usize> = by_val.iter().take(want).map(|e| e.epoch).collect();
        assert_eq!(
            out.generic.kept.iter().copied().collect::<BTreeSet<_>>(),
            best
        );
    }
}

#[test]
fn without_finetuning_final_is_the_generic_average() {
    let mut tr = Trainer::new(Checkpoint::init(mini(), 1).unwrap(), quick_config(2, 0, 8)).unwrap();
    let data = toy_pairs(12, 1);
    let out = tr.train(&data, &data, &toy_pairs(4, 2)).unwrap();
    assert!(out.finetune.is_none());
    assert_eq!(out.final_model, out.generic.averaged);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut cfg = mini();
        cfg.dropout = 0.1;
        let mut tr =
            Trainer::new(Checkpoint::init(cfg, 1).unwrap(), quick_config(2, 1, 2)).unwrap();
        tr.train(&toy_pairs(16, 1), &toy_pairs(6, 2), &toy_pairs(4, 3))
            .unwrap()
            .final_model
    };
    assert_eq!(run(), run());
}

#[test]
fn nan_parameters_diverge_and_keep_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let mut init = Checkpoint::init(mini(), 1).unwrap();
    let t = init.params.get_mut("out/bias").unwrap();
    t.data_mut()[0] = f32::NAN;
    let mut tr = Trainer::new(init, quick_config(1, 0, 1))
        .unwrap()
        .with_output_dir(dir.path());
    let err = tr
        .train(&toy_pairs(8, 1), &[], &toy_pairs(2, 2))
        .unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err}");
    assert!(dir.path().join("ckpt/last_good.tfrx").exists());
}
