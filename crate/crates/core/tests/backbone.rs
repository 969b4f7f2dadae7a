use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rocknet::backbone::param_count;
use rocknet::{BlockKind, Error, Mode, ModelConfig, Network, Tape, Tensor};

/// Layer sequence of torchvision-layout ResNet-34, written out from its
/// published architecture: [3,4,6,3] basic blocks at widths 64..512.
fn canonical_resnet34(classes: usize, h: usize, w: usize) -> String {
    let mut l = vec![
        format!("input 3x{h}x{w}"),
        "conv1 conv7x7 3->64 s2 p3".to_string(),
        "bn1 batch_norm 64".to_string(),
        "relu relu".to_string(),
        "maxpool maxpool3x3 s2 p1".to_string(),
    ];
    let mut cin = 64;
    for (s, (depth, width)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        for i in 0..depth {
            let b = format!("layer{}.{i}", s + 1);
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            l.push(format!("{b}.conv1 conv3x3 {cin}->{width} s{stride} p1"));
            l.push(format!("{b}.bn1 batch_norm {width}"));
            l.push(format!("{b}.act1 relu"));
            l.push(format!("{b}.conv2 conv3x3 {width}->{width} s1 p1"));
            l.push(format!("{b}.bn2 batch_norm {width}"));
            if stride != 1 || cin != width {
                l.push(format!("{b}.downsample.0 conv1x1 {cin}->{width} s{stride} p0"));
                l.push(format!("{b}.downsample.1 batch_norm {width}"));
            } else {
                l.push(format!("{b}.skip identity"));
            }
            l.push(format!("{b}.add residual"));
            l.push(format!("{b}.act relu"));
            cin = width;
        }
    }
    l.push("avgpool global_avg".into());
    l.push("flatten".into());
    l.push(format!("fc linear 512->{classes}"));
    let mut s = l.join("\n");
    s.push('\n');
    s
}

/// Parameter tensor shapes of torchvision ResNet-34 (BN affine only).
fn canonical_shapes(classes: usize) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    m.insert("conv1.weight".to_string(), vec![64, 3, 7, 7]);
    m.insert("bn1.weight".to_string(), vec![64]);
    m.insert("bn1.bias".to_string(), vec![64]);
    let mut cin = 64;
    for (s, (depth, width)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        for i in 0..depth {
            let b = format!("layer{}.{i}", s + 1);
            m.insert(format!("{b}.conv1.weight"), vec![width, cin, 3, 3]);
            m.insert(format!("{b}.conv2.weight"), vec![width, width, 3, 3]);
            for n in ["bn1", "bn2"] {
                m.insert(format!("{b}.{n}.weight"), vec![width]);
                m.insert(format!("{b}.{n}.bias"), vec![width]);
            }
            if cin != width {
                m.insert(format!("{b}.downsample.0.weight"), vec![width, cin, 1, 1]);
                m.insert(format!("{b}.downsample.1.weight"), vec![width]);
                m.insert(format!("{b}.downsample.1.bias"), vec![width]);
            }
            cin = width;
        }
    }
    m.insert("fc.weight".to_string(), vec![classes, 512]);
    m.insert("fc.bias".to_string(), vec![classes]);
    m
}

fn shapes_of(net: &Network) -> BTreeMap<String, Vec<usize>> {
    net.store
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, 3, h, w], |_| rng.gen_range(-1.0..1.0))
}

fn logits(net: &mut Network, x: &Tensor, mode: Mode) -> Result<Tensor, Error> {
    let mut tape: Tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, xv, mode)?;
    Ok(tape.value(out.logits).clone())
}

#[test]
fn baseline_is_canonical_resnet34() {
    let net = Network::<f32>::build(&ModelConfig::default()).unwrap();
    assert_eq!(net.descriptor(), canonical_resnet34(53, 224, 224));
    assert_eq!(shapes_of(&net), canonical_shapes(53));
}

#[test]
fn baseline_parameter_count() {
    let net = Network::<f32>::build(&ModelConfig::default()).unwrap();
    let from_shapes: usize = canonical_shapes(53)
        .values()
        .map(|s| s.iter().product::<usize>())
        .sum();
    // ResNet-34 has 21,797,672 parameters with a 1000-way head; swapping in a
    // 53-way head removes 947·513.
    assert_eq!(from_shapes, 21_797_672 - 947 * 513);
    assert_eq!(param_count(&net), from_shapes);
    assert_eq!(param_count(&net), 21_311_861);
    assert_eq!(512 * 53 + 53, 27_189);
    assert_eq!(
        net.store.find("fc.weight").unwrap().numel() + net.store.find("fc.bias").unwrap().numel(),
        27_189
    );
}

/// Closed-form count from the stage plan, independent of the layer code.
fn closed_form(cfg: &ModelConfig) -> usize {
    let bw = cfg.base_width;
    let widths = [bw, 2 * bw, 4 * bw, 8 * bw];
    let plan = cfg.spatial_plan();
    let mut total = 3 * 49 * bw + 2 * bw;
    let mut cin = bw;
    for (s, &depth) in [3usize, 4, 6, 3].iter().enumerate() {
        let c = widths[s];
        for i in 0..depth {
            let bot = s == 3 && i >= depth - cfg.bot_blocks;
            total += if bot {
                let (h, w) = plan[4];
                22 * c * c + 6 * c + (h + w) * (c / cfg.heads)
            } else {
                match cfg.kernel_mod {
                    0 | 1 => 9 * cin * c + 9 * c * c + 4 * c,
                    2 | 3 => 9 * cin * c + 9 * c * c + 2 * c,
                    _ => cin * (c / 2) + 9 * (c / 2) * (c / 2) + 9 * (c / 2) * c + c,
                }
            };
            if cin != c {
                total += cin * c + 2 * c;
            }
            cin = c;
        }
    }
    total + cin * cfg.num_classes + cfg.num_classes
}

#[test]
fn parameter_count_matches_closed_form_over_grid() {
    for bot in 0..=2 {
        for irc in [false, true] {
            if irc && bot == 0 {
                continue;
            }
            for km in 0..=4 {
                let cfg = ModelConfig {
                    bot_blocks: bot,
                    irc,
                    kernel_mod: km,
                    ..ModelConfig::default()
                };
                let net = Network::<f32>::build(&cfg).unwrap();
                assert_eq!(param_count(&net), closed_form(&cfg), "{}", cfg.id());
            }
        }
    }
}

#[test]
fn bot_blocks_occupy_last_stage_four_positions() {
    for (bot, irc, want) in [
        (1, false, [BlockKind::Basic, BlockKind::Basic, BlockKind::Bot]),
        (2, false, [BlockKind::Basic, BlockKind::Bot, BlockKind::Bot]),
        (2, true, [BlockKind::Basic, BlockKind::BotIrc, BlockKind::BotIrc]),
    ] {
        let cfg = ModelConfig {
            bot_blocks: bot,
            irc,
            input_size: (64, 64),
            ..ModelConfig::default()
        };
        let net = Network::<f32>::build(&cfg).unwrap();
        assert_eq!(net.stage_kinds(4), want);
        for s in 1..=3 {
            assert!(net.stage_kinds(s).iter().all(|&k| k == BlockKind::Basic));
        }
    }
}

#[test]
fn only_bot_positions_differ_from_baseline_initialization() {
    let base_cfg = ModelConfig {
        input_size: (64, 64),
        seed: 17,
        ..ModelConfig::default()
    };
    let base = Network::<f32>::build(&base_cfg).unwrap();
    for bot in [1, 2] {
        let cfg = ModelConfig {
            bot_blocks: bot,
            irc: true,
            ..base_cfg.clone()
        };
        let net = Network::<f32>::build(&cfg).unwrap();
        let replaced: Vec<String> = (3 - bot..3).map(|i| format!("layer4.{i}.")).collect();
        for (name, t) in base.store.params() {
            if replaced.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let other = net.store.find(name).unwrap_or_else(|| panic!("{name} missing"));
            assert!(t.bit_eq(other), "{name}");
        }
        let keep = |l: &&str| !replaced.iter().any(|p| l.starts_with(p.as_str()));
        let base_desc = base.descriptor();
        let desc = net.descriptor();
        let a: Vec<&str> = base_desc.lines().filter(keep).collect();
        let b: Vec<&str> = desc.lines().filter(keep).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let cfg = ModelConfig {
        bot_blocks: 2,
        irc: true,
        kernel_mod: 3,
        input_size: (64, 64),
        seed: 4,
        ..ModelConfig::default()
    };
    let a = Network::<f32>::build(&cfg).unwrap();
    let b = Network::<f32>::build(&cfg).unwrap();
    assert_eq!(a.store.params().len(), b.store.params().len());
    for ((na, ta), (nb, tb)) in a.store.params().iter().zip(b.store.params()) {
        assert_eq!(na, nb);
        assert!(ta.bit_eq(tb));
    }
    let c = Network::<f32>::build(&ModelConfig { seed: 5, ..cfg }).unwrap();
    assert!(!a
        .store
        .find("conv1.weight")
        .unwrap()
        .bit_eq(c.store.find("conv1.weight").unwrap()));
}

#[test]
fn forward_shapes_and_eval_determinism() {
    let cfg = ModelConfig {
        input_size: (64, 64),
        ..ModelConfig::default()
    };
    let mut net = Network::<f32>::build(&cfg).unwrap();
    let x = images(2, 64, 64, 1);
    let a = logits(&mut net, &x, Mode::Eval).unwrap();
    let b = logits(&mut net, &x, Mode::Eval).unwrap();
    assert_eq!(a.shape(), &[2, 53]);
    assert!(a.bit_eq(&b));
    let wrong = images(2, 32, 32, 1);
    assert!(matches!(
        logits(&mut net, &wrong, Mode::Eval),
        Err(Error::Shape(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig {
            irc: true,
            ..ModelConfig::default()
        },
        ModelConfig {
            bot_blocks: 3,
            ..ModelConfig::default()
        },
        ModelConfig {
            kernel_mod: 5,
            ..ModelConfig::default()
        },
        ModelConfig {
            num_classes: 0,
            ..ModelConfig::default()
        },
    ];
    for cfg in bad {
        assert!(
            matches!(Network::<f32>::build(&cfg), Err(Error::Config(_))),
            "{cfg:?}"
        );
    }
}

#[test]
fn attention_tables_bind_to_stage_four_size() {
    for (input, hw) in [((224, 224), 7), ((64, 64), 2), ((96, 64), 3)] {
        let cfg = ModelConfig {
            input_size: input,
            bot_blocks: 1,
            ..ModelConfig::default()
        };
        let net = Network::<f32>::build(&cfg).unwrap();
        let rel_h = net.store.find("layer4.2.mhsa.rel_h").unwrap();
        assert_eq!(rel_h.shape(), &[hw, 128]);
    }
}

#[test]
fn full_grid_runs_forward_and_backward_at_64() {
    let x = images(2, 64, 64, 3);
    for bot in 0..=2 {
        for irc in [false, true] {
            if irc && bot == 0 {
                continue;
            }
            for km in 0..=4 {
                let cfg = ModelConfig {
                    bot_blocks: bot,
                    irc,
                    kernel_mod: km,
                    input_size: (64, 64),
                    ..ModelConfig::default()
                };
                let mut net = Network::<f32>::build(&cfg).unwrap();
                let mut tape: Tape = Tape::new();
                tape.set_check_finite(true);
                let xv = tape.constant(x.clone());
                let out = net.forward(&mut tape, xv, Mode::Train).unwrap();
                let loss = tape.cross_entropy(out.logits, &[0, 52]).unwrap();
                tape.backward(loss).unwrap();
                let g = tape.grad(out.params[0]);
                assert!(g.all_finite(), "{}", cfg.id());
                assert!(g.data().iter().any(|&v| v != 0.0), "{}", cfg.id());
            }
        }
    }
}
