use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rocknet::data_io::{make_synthetic_dataset, Dataset, Split};
use rocknet::gradcheck::{check, GradCheckOptions};
use rocknet::nn::{Init, ParamStore};
use rocknet::train_eval::{
    cross_entropy, evaluate, evaluate_split, metrics_csv, run_ablation, top1_accuracy, train, Adam,
    Checkpoint, GridEntry, MetricsRecord, Preset, TrainConfig,
};
use rocknet::{Error, ModelConfig, Network, Tape, Tensor};

fn tiny_model(classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes: classes,
        input_size: (32, 32),
        base_width: 4,
        ..Default::default()
    }
}

fn tiny_data(root: &Path, train: usize, test: usize) -> Dataset {
    make_synthetic_dataset(root, 3, train, test, (32, 32), 11).unwrap();
    Dataset::open(root, (32, 32)).unwrap()
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn uniform_logits_give_log_k() {
    let mut tape: Tape = Tape::new();
    let z = tape.constant(Tensor::zeros(vec![4, 53]));
    let l = cross_entropy(&mut tape, z, &[0, 5, 52, 17]).unwrap();
    let v = tape.value(l).item().unwrap() as f64;
    assert!((v - 53f64.ln()).abs() <= 1e-4, "{v}");
    assert!((v - 3.9703).abs() <= 1e-4);
}

#[test]
fn confident_correct_logits_give_tiny_loss() {
    let mut tape: Tape = Tape::new();
    let z = tape.constant(Tensor::from_fn(vec![2, 3], |i| {
        if i == 1 || i == 5 {
            20.0
        } else {
            0.0
        }
    }));
    let l = cross_entropy(&mut tape, z, &[1, 2]).unwrap();
    assert!(tape.value(l).item().unwrap() <= 1e-6);
}

#[test]
fn out_of_range_label_is_rejected() {
    let mut tape: Tape = Tape::new();
    let z = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(cross_entropy(&mut tape, z, &[0, 3]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Tensor::<f64>::from_fn(vec![5, 7], |_| rng.gen_range(-3.0..3.0));
    let labels = [0, 6, 3, 3, 1];
    let r = check("cross_entropy", &[z], &GradCheckOptions::default(), |tape, v| {
        tape.cross_entropy(v[0], &labels)
    })
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn top1_examples() {
    let eye = Tensor::<f32>::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    assert_eq!(top1_accuracy(&eye, &[0, 1, 2, 3]).unwrap(), 1.0);
    assert_eq!(top1_accuracy(&eye, &[0, 0, 0, 0]).unwrap(), 0.25);
    let tied = Tensor::<f32>::new(vec![1, 3], vec![2.0, 1.0, 2.0]).unwrap();
    assert_eq!(top1_accuracy(&tied, &[0]).unwrap(), 1.0);
    assert_eq!(top1_accuracy(&tied, &[2]).unwrap(), 0.0);
    assert!(top1_accuracy(&Tensor::<f32>::zeros(vec![0, 3]), &[]).is_err());
}

#[test]
fn adam_follows_hand_computed_recurrence() {
    // f(p) = a/2 (p - c)^2, gradient a (p - c).
    let (a, c) = (3.0f64, 0.25f64);
    let mut store: ParamStore = ParamStore::new(0);
    store.add("p", &[1], Init::Zeros);
    store
        .set_index(0, Tensor::new(vec![1], vec![1.5]).unwrap())
        .unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        ..Default::default()
    };
    let mut adam = Adam::new(&cfg, &store);

    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
    let (mut p, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for t in 1..=20 {
        let cur = store.params()[0].1.data()[0] as f64;
        let g = a * (cur - c);
        adam.update(&mut store, &[Tensor::new(vec![1], vec![g as f32]).unwrap()])
            .unwrap();

        let g_ref = a * (p - c);
        m = b1 * m + (1.0 - b1) * g_ref;
        v = b2 * v + (1.0 - b2) * g_ref * g_ref;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        let before = p;
        p -= lr * mhat / (vhat.sqrt() + eps);
        if t == 1 {
            // First step: opposite the gradient, magnitude lr·|g|/(|g|+eps).
            assert!(p < before);
            assert!((before - p) <= lr * (1.0 + 1e-6));
        }
        let got = store.params()[0].1.data()[0] as f64;
        assert!((got - p).abs() <= 1e-6, "step {t}: {got} vs {p}");
    }
    assert_eq!(adam.step, 20);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut store: ParamStore = ParamStore::new(0);
    store.add("p", &[2], Init::Zeros);
    let mut adam = Adam::new(&TrainConfig::default(), &store);
    assert!(adam.update(&mut store, &[]).is_err());
    assert!(adam.update(&mut store, &[Tensor::zeros(vec![3])]).is_err());
}

#[test]
fn train_config_validation() {
    for bad in [
        TrainConfig {
            epochs: 0,
            ..Default::default()
        },
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 2, 1);
    let mut net: Network = Network::build(&tiny_model(3)).unwrap();
    let err = train(
        &mut net,
        &data,
        &TrainConfig {
            epochs: 0,
            ..tiny_train(1)
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn one_epoch_gives_train_and_test_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 3, 2);
    let mut net: Network = Network::build(&tiny_model(3)).unwrap();
    let out = train(&mut net, &data, &tiny_train(1)).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert_eq!((out.metrics[0].epoch, out.metrics[0].split), (1, Split::Train));
    assert_eq!((out.metrics[1].epoch, out.metrics[1].split), (1, Split::Test));
    for m in &out.metrics {
        assert!((0.0..=1.0).contains(&m.top1_accuracy));
        assert!(m.loss.is_finite());
    }
    let csv = metrics_csv(&out.metrics);
    assert!(csv.starts_with("epoch,split,loss,top1_accuracy\n1,train,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 3, 1);
    let run = || {
        let mut net: Network = Network::build(&tiny_model(3)).unwrap();
        train(&mut net, &data, &tiny_train(2)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.metrics, b.metrics);
    let mut net: Network = Network::build(&tiny_model(3)).unwrap();
    let c = train(
        &mut net,
        &data,
        &TrainConfig {
            seed: 4,
            ..tiny_train(2)
        },
    )
    .unwrap();
    assert_ne!(a.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_and_reload_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 3, 2);
    let cfg = ModelConfig {
        bot_blocks: 1,
        irc: true,
        kernel_mod: 2,
        ..tiny_model(3)
    };
    let mut net: Network = Network::build(&cfg).unwrap();
    let out = train(&mut net, &data, &tiny_train(1)).unwrap();
    let before = evaluate_split(&mut net, &data.test, &data.standardization, 4, 1).unwrap();

    let path = dir.path().join("a.rkcp");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let path2 = dir.path().join("b.rkcp");
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert_eq!(loaded.standardization().unwrap(), data.standardization);
    assert_eq!(loaded.adam().unwrap().step, out.checkpoint.optimizer_step);

    let mut fresh: Network = Network::build(&cfg).unwrap();
    let after = evaluate(&mut fresh, &loaded, &data.test).unwrap();
    assert_eq!(after.loss.to_bits(), before.loss.to_bits());
    assert_eq!(after.top1_accuracy, before.top1_accuracy);
    assert_eq!(evaluate(&mut fresh, &loaded, &data.test).unwrap(), after);
}

#[test]
fn checkpoint_layout_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 2, 1);
    let mut net: Network = Network::build(&tiny_model(3)).unwrap();
    let ckpt = train(&mut net, &data, &tiny_train(1)).unwrap().checkpoint;
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"RKCP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
        net.store.params().len()
    );
    let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    assert_eq!(&bytes[14..14 + name_len], b"conv1.weight");
    assert_eq!(bytes[14 + name_len], 4);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));

    let mut other: Network = Network::build(&ModelConfig {
        kernel_mod: 1,
        ..tiny_model(3)
    })
    .unwrap();
    assert!(matches!(
        evaluate(&mut other, &ckpt, &data.test),
        Err(Error::Checkpoint(_))
    ));
    let mut reseeded: Network = Network::build(&ModelConfig {
        seed: 9,
        ..tiny_model(3)
    })
    .unwrap();
    assert!(matches!(ckpt.restore(&mut reseeded), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_loss_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 2, 1);
    let mut net: Network = Network::build(&tiny_model(3)).unwrap();
    let i = net
        .store
        .params()
        .iter()
        .position(|(n, _)| n == "fc.bias")
        .unwrap();
    net.store.set_index(i, Tensor::full(vec![3], f32::NAN)).unwrap();
    let err = train(&mut net, &data, &tiny_train(1)).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }),
        "{err}"
    );
}

#[test]
fn class_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 2, 1);
    let mut net: Network = Network::build(&tiny_model(5)).unwrap();
    assert!(matches!(
        train(&mut net, &data, &tiny_train(1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn random_init_accuracy_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 1, 20);
    let n = data.test.len() as f64;
    let p = 1.0 / 3.0;
    let sigma = (p * (1.0 - p) / n).sqrt();
    for seed in 0..3 {
        let mut net: Network = Network::build(&ModelConfig {
            seed,
            ..tiny_model(3)
        })
        .unwrap();
        let r = evaluate_split(&mut net, &data.test, &data.standardization, 16, 0).unwrap();
        assert!(
            (r.top1_accuracy - p).abs() <= 3.0 * sigma,
            "seed {seed}: {}",
            r.top1_accuracy
        );
    }
}

#[test]
fn tiny_set_is_memorized() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 3, 1);
    let mut net: Network = Network::build(&ModelConfig {
        base_width: 8,
        ..tiny_model(3)
    })
    .unwrap();
    // Running BN statistics need a few dozen full-batch steps to settle.
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 60,
        batch_size: 9,
        seed: 0,
        ..Default::default()
    };
    let out = train(&mut net, &data, &cfg).unwrap();
    assert_eq!(out.metrics[out.metrics.len() - 2].top1_accuracy, 1.0);
    let r = evaluate_split(&mut net, &data.train, &data.standardization, 9, 60).unwrap();
    assert_eq!(r.top1_accuracy, 1.0, "{r:?}");
}

#[test]
fn preset_grids_have_table_shapes() {
    let base = ModelConfig::default();
    let t3: Vec<(usize, bool)> = Preset::Table3
        .grid(&base)
        .iter()
        .map(|e| (e.config.bot_blocks, e.config.irc))
        .collect();
    assert_eq!(t3, vec![(0, false), (1, false), (1, true), (2, false), (2, true)]);
    let t2: Vec<u8> = Preset::Table2
        .grid(&base)
        .iter()
        .map(|e| e.config.kernel_mod)
        .collect();
    assert_eq!(t2, vec![0, 1, 2, 3, 4]);
    assert_eq!(Preset::Table1.grid(&base).len(), 1);
    let full = Preset::Full.grid(&base);
    assert_eq!(full.len(), 25);
    assert!(full.iter().all(|e| e.config.validate().is_ok()));
}

#[test]
fn empty_grid_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 1, 1);
    let r = run_ablation(&[], &data, &tiny_train(1)).unwrap();
    assert_eq!(
        r.to_csv(true),
        "config_id,bot_blocks,irc,kernel_mod,test_accuracy,param_count,wall_seconds\n"
    );
}

#[test]
fn ablation_rows_share_protocol_and_failures_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 2, 1);
    let mut grid = Preset::Table3.grid(&tiny_model(3));
    grid.insert(
        1,
        GridEntry {
            id: "wrong_head".into(),
            config: tiny_model(7),
        },
    );
    let r = run_ablation(&grid, &data, &tiny_train(1)).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.rows[1].test_accuracy.is_err());
    assert!(r
        .rows
        .iter()
        .enumerate()
        .all(|(i, row)| i == 1 || row.test_accuracy.is_ok()));
    let pc: Vec<usize> = r.rows.iter().map(|x| x.param_count).collect();
    assert!(pc[0] < pc[2] && pc[2] < pc[4]);
    assert!(pc[0] < pc[3] && pc[3] < pc[5]);
    assert!(r
        .manifest
        .windows(2)
        .all(|w| w[0].data_order_hash == w[1].data_order_hash
            && w[0].model_seed == w[1].model_seed
            && w[0].train_seed == w[1].train_seed));
    let csv = r.to_csv(false);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(2).unwrap().contains("error: "));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
    assert!(r
        .manifest_csv()
        .starts_with("config_id,model_seed,train_seed,data_order_hash\n"));
}

#[test]
fn metrics_record_csv_row() {
    let r = MetricsRecord {
        epoch: 3,
        split: Split::Test,
        loss: 0.5,
        top1_accuracy: 0.75,
    };
    assert_eq!(r.csv_row(), "3,test,0.5,0.75");
}
