//! Central finite-difference gradient checking in 64-bit arithmetic.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! every backward rule it verifies.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error; below it the comparison is
    /// effectively absolute.
    pub floor: f64,
    /// Check at most this many elements per input (evenly strided), 0 = all.
    pub max_elements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            max_elements: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares autodiff gradients of a scalar function with central finite
/// differences for every element of every input.
///
/// `build` receives a fresh tape and one gradient-tracked leaf per input, and
/// must return a scalar. `prepare` lets the caller adjust the tape before each
/// evaluation (for example to inject a fault into the analytic pass); it is
/// called with `true` for the analytic run and `false` for numeric runs.
pub fn check_with<F, P>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    mut prepare: P,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    P: FnMut(&mut Tape<f64>, bool),
{
    let mut eval = |vals: &[Tensor<f64>], analytic: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        prepare(&mut tape, analytic);
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = tape.value(out).item()?;
        if !analytic {
            return Ok((loss, Vec::new()));
        }
        tape.backward(out)?;
        Ok((loss, vars.iter().map(|&v| tape.grad(v)).collect()))
    };

    let (_, grads) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        passed: true,
    };
    let mut current: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = if opts.max_elements == 0 || n <= opts.max_elements {
            1
        } else {
            n.div_ceil(opts.max_elements)
        };
        for e in (0..n).step_by(stride) {
            let mut plus = input.to_vec();
            plus[e] += opts.step;
            current[idx] = Tensor::new(input.shape().to_vec(), plus)?;
            let (lp, _) = eval(&current, false)?;
            let mut minus = input.to_vec();
            minus[e] -= opts.step;
            current[idx] = Tensor::new(input.shape().to_vec(), minus)?;
            let (lm, _) = eval(&current, false)?;
            let numeric = (lp - lm) / (2.0 * opts.step);
            let analytic = grads[idx].data()[e];
            let rel = relative_error(analytic, numeric, opts.floor);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            report.checked += 1;
        }
        current[idx] = input.clone();
    }
    report.passed = report.max_rel_err <= opts.tolerance;
    Ok(report)
}

/// [`check_with`] without tape preparation.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_with(name, inputs, opts, |_, _| {}, build)
}

/// Named finite-difference suites used by the test suite and the CLI.
pub mod suites {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check_with, GradCheckOptions, GradCheckReport};
    use crate::backbone::{ModelConfig, Network};
    use crate::blocks::{BlockKind, BlockVariant, ModFlags, ResidualBlock};
    use crate::error::{Error, Result};
    use crate::nn::{Ctx, ParamStore};
    use crate::tape::{Mode, NormConfig, OpKind, PoolKind, RunningStats, Tape, Var};
    use crate::tensor::Tensor;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Scope {
        Op,
        Block,
        Model,
    }

    impl std::str::FromStr for Scope {
        type Err = Error;
        fn from_str(s: &str) -> Result<Self> {
            match s {
                "op" => Ok(Scope::Op),
                "block" => Ok(Scope::Block),
                "model" => Ok(Scope::Model),
                other => Err(Error::Config(format!(
                    "unknown gradcheck scope {other:?} (expected op, block or model)"
                ))),
            }
        }
    }

    pub fn run(scope: Scope, fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
        match scope {
            Scope::Op => op_suite(fault),
            Scope::Block => block_suite(fault),
            Scope::Model => model_suite(fault),
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
    }

    /// Values with magnitude in [0.1, 1], random sign: clear of the ReLU kink.
    fn rand_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    /// Distinct values at least 0.1 apart, in random order (no pooling ties).
    fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        Tensor::from_fn(shape.to_vec(), |i| idx[i] as f64 * 0.1 - 1.0)
    }

    /// `sum(out ⊙ R)` for a fixed random `R`, so every output element carries
    /// a distinct weight into the scalar loss.
    fn weighted_sum(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
        let shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let r = Tensor::from_fn(shape, |_| {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let r = tape.constant(r);
        let m = tape.mul(out, r)?;
        tape.sum(m)
    }

    type Build = Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>>;

    struct Case {
        inputs: Vec<Tensor<f64>>,
        build: Build,
    }

    fn case(
        inputs: Vec<Tensor<f64>>,
        mut f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        Case {
            inputs,
            build: Box::new(move |tape, v| {
                let out = f(tape, v)?;
                weighted_sum(tape, out)
            }),
        }
    }

    fn op_cases(kind: OpKind, rng: &mut ChaCha8Rng) -> Vec<Case> {
        let mut r = |s: &[usize]| rand_tensor(rng, s, -1.0, 1.0);
        match kind {
            OpKind::Add => vec![case(vec![r(&[2, 3]), r(&[2, 3])], |t, v| t.add(v[0], v[1]))],
            OpKind::Mul => vec![case(vec![r(&[2, 3]), r(&[2, 3])], |t, v| t.mul(v[0], v[1]))],
            OpKind::Scale => vec![case(vec![r(&[2, 3])], |t, v| t.scale(v[0], -1.7))],
            OpKind::Reshape => vec![case(vec![r(&[2, 3])], |t, v| t.reshape(v[0], &[3, 2]))],
            OpKind::Sum => vec![case(vec![r(&[2, 3])], |t, v| t.sum(v[0]))],
            OpKind::Relu => vec![case(vec![rand_nonzero(rng, &[4, 4])], |t, v| t.relu(v[0]))],
            OpKind::Gelu => vec![case(vec![rand_tensor(rng, &[4, 4], -3.0, 3.0)], |t, v| {
                t.gelu(v[0])
            })],
            OpKind::Conv2d => vec![
                case(vec![r(&[1, 2, 4, 4]), r(&[3, 2, 3, 3]), r(&[3])], |t, v| {
                    t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
                }),
                case(vec![r(&[1, 2, 5, 5]), r(&[2, 2, 3, 3])], |t, v| {
                    t.conv2d(v[0], v[1], None, 2, 1)
                }),
                case(vec![r(&[2, 1, 3, 3]), r(&[2, 1, 1, 1])], |t, v| {
                    t.conv2d(v[0], v[1], None, 1, 0)
                }),
            ],
            OpKind::Linear => vec![case(vec![r(&[2, 3]), r(&[4, 3]), r(&[4])], |t, v| {
                t.linear(v[0], v[1], Some(v[2]))
            })],
            OpKind::BatchNorm2dTrain => vec![case(vec![r(&[2, 3, 2, 2]), r(&[3]), r(&[3])], |t, v| {
                let mut st = RunningStats::new(3);
                t.batch_norm2d(v[0], v[1], v[2], &mut st, Mode::Train, NormConfig::default())
            })],
            OpKind::BatchNorm2dEval => {
                let stats = RunningStats {
                    mean: r(&[3]).to_vec(),
                    var: rand_tensor(rng, &[3], 0.5, 2.0).to_vec(),
                };
                vec![case(
                    vec![
                        rand_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0),
                        rand_tensor(rng, &[3], -1.0, 1.0),
                        rand_tensor(rng, &[3], -1.0, 1.0),
                    ],
                    move |t, v| {
                        let mut st = stats.clone();
                        t.batch_norm2d(v[0], v[1], v[2], &mut st, Mode::Eval, NormConfig::default())
                    },
                )]
            }
            OpKind::LayerNorm => vec![
                case(vec![r(&[2, 3, 2, 2]), r(&[3]), r(&[3])], |t, v| {
                    t.layer_norm(v[0], 1..2, v[1], v[2], 1e-5)
                }),
                case(vec![r(&[2, 4, 3]), r(&[4, 3]), r(&[4, 3])], |t, v| {
                    t.layer_norm(v[0], 1..3, v[1], v[2], 1e-5)
                }),
            ],
            OpKind::Softmax => vec![
                case(vec![r(&[2, 3, 4])], |t, v| t.softmax(v[0], 1)),
                case(vec![r(&[3, 5])], |t, v| t.softmax(v[0], 1)),
            ],
            OpKind::MaxPool2d => vec![
                case(vec![rand_distinct(rng, &[1, 2, 4, 4])], |t, v| {
                    t.pool(v[0], PoolKind::Max, 2, 2, 0)
                }),
                case(vec![rand_distinct(rng, &[1, 2, 5, 5])], |t, v| {
                    t.pool(v[0], PoolKind::Max, 3, 2, 1)
                }),
            ],
            OpKind::AvgPool2d => vec![case(vec![r(&[1, 2, 5, 5])], |t, v| {
                t.pool(v[0], PoolKind::Avg, 3, 2, 1)
            })],
            OpKind::GlobalAvgPool => vec![case(vec![r(&[2, 3, 2, 2])], |t, v| {
                t.pool(v[0], PoolKind::GlobalAvg, 0, 0, 0)
            })],
            OpKind::BatchMatmul => vec![
                case(vec![r(&[2, 3, 4]), r(&[2, 4, 2])], |t, v| {
                    t.bmm(v[0], v[1], false, false)
                }),
                case(vec![r(&[2, 4, 3]), r(&[2, 2, 4])], |t, v| {
                    t.bmm(v[0], v[1], true, true)
                }),
                case(vec![r(&[2, 3, 4]), r(&[1, 5, 4])], |t, v| {
                    t.bmm(v[0], v[1], false, true)
                }),
            ],
            OpKind::PosEmbed2d => vec![case(vec![r(&[3, 2]), r(&[2, 2])], |t, v| {
                t.pos_embed_2d(v[0], v[1])
            })],
            OpKind::CrossEntropy => vec![case(vec![rand_tensor(rng, &[3, 4], -2.0, 2.0)], |t, v| {
                t.cross_entropy(v[0], &[0, 3, 1])
            })],
        }
    }

    fn merge(name: &str, parts: Vec<GradCheckReport>, tol: f64) -> GradCheckReport {
        let mut out = GradCheckReport {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            passed: true,
        };
        for p in parts {
            out.checked += p.checked;
            out.max_rel_err = out.max_rel_err.max(p.max_rel_err);
            out.max_abs_err = out.max_abs_err.max(p.max_abs_err);
        }
        out.passed = out.max_rel_err <= tol;
        out
    }

    fn fault_hook(fault: Option<OpKind>) -> impl FnMut(&mut Tape<f64>, bool) {
        move |tape, analytic| {
            if analytic {
                tape.inject_fault(fault);
            }
        }
    }

    /// One report per differentiable op kind, in [`OpKind::ALL`] order.
    pub fn op_suite(fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
        let opts = GradCheckOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut reports = Vec::new();
        for kind in OpKind::ALL {
            let mut parts = Vec::new();
            for mut c in op_cases(kind, &mut rng) {
                parts.push(check_with(
                    kind.name(),
                    &c.inputs,
                    &opts,
                    fault_hook(fault),
                    &mut c.build,
                )?);
            }
            reports.push(merge(kind.name(), parts, opts.tolerance));
        }
        Ok(reports)
    }

    /// The block variants exercised by [`block_suite`], as (name, variant).
    pub fn block_variants() -> Result<Vec<(String, BlockVariant)>> {
        let mut v = vec![
            ("basic".to_string(), BlockVariant::new(BlockKind::Basic, 8, 8, 1)),
            (
                "basic_down".to_string(),
                BlockVariant::new(BlockKind::Basic, 8, 16, 2),
            ),
        ];
        for level in 1..=ModFlags::MAX_LEVEL {
            let kind = BlockKind::ModifiedKernel(ModFlags::level(level)?);
            v.push((format!("modified_l{level}"), BlockVariant::new(kind, 8, 8, 1)));
        }
        let l4 = BlockKind::ModifiedKernel(ModFlags::level(4)?);
        v.push(("modified_l4_down".into(), BlockVariant::new(l4, 8, 16, 2)));
        v.push(("bot".into(), BlockVariant::new(BlockKind::Bot, 8, 8, 1)));
        v.push(("bot_irc".into(), BlockVariant::new(BlockKind::BotIrc, 8, 8, 1)));
        Ok(v)
    }

    /// Randomizes zero-initialized attention output projections so every
    /// attention parameter receives gradient.
    fn wake_attention(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = store
            .params()
            .iter()
            .filter(|(n, _)| n.ends_with("mhsa.out.weight"))
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for (n, shape) in names {
            store.set_by_name(&n, rand_tensor(rng, &shape, -0.3, 0.3))?;
        }
        Ok(())
    }

    /// Every block family on a 1×8×3×3 input (train-mode normalization).
    pub fn block_suite(fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
        let opts = GradCheckOptions {
            max_elements: 48,
            ..GradCheckOptions::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut reports = Vec::new();
        for (name, variant) in block_variants()? {
            let mut store = ParamStore::<f64>::new(11);
            let block = ResidualBlock::new(&mut store, "b", variant, (3, 3), 4)?;
            wake_attention(&mut store, &mut rng)?;
            let mut inputs = vec![rand_tensor(&mut rng, &[1, 8, 3, 3], -1.0, 1.0)];
            inputs.extend(store.params().iter().map(|(_, t)| t.clone()));
            let buffers = store.buffers().to_vec();
            let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let mut bufs = buffers.clone();
                let mut cx = Ctx::new(tape, &v[1..], &mut bufs, Mode::Train);
                let out = block.forward(&mut cx, v[0])?;
                weighted_sum(tape, out)
            };
            reports.push(check_with(
                &format!("block:{name}"),
                &inputs,
                &opts,
                fault_hook(fault),
                build,
            )?);
        }
        Ok(reports)
    }

    /// End-to-end checks on width-reduced networks (full depth, 2 classes).
    pub fn model_suite(fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
        let opts = GradCheckOptions {
            max_elements: 3,
            // A full-depth network has thousands of ReLU and max-pool kinks;
            // a small step keeps the two probes on the same linear piece.
            step: 1e-8,
            ..GradCheckOptions::default()
        };
        let base = ModelConfig {
            num_classes: 2,
            input_size: (32, 32),
            base_width: 4,
            seed: 5,
            ..ModelConfig::default()
        };
        let configs = [
            ("model:baseline_32", base.clone()),
            (
                "model:bot1_irc_64",
                ModelConfig {
                    input_size: (64, 64),
                    bot_blocks: 1,
                    irc: true,
                    ..base.clone()
                },
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut reports = Vec::new();
        for (name, cfg) in configs {
            let mut net = Network::<f64>::build(&cfg)?;
            wake_attention(&mut net.store, &mut rng)?;
            let (h, w) = cfg.input_size;
            let images = rand_tensor(&mut rng, &[4, 3, h, w], -1.0, 1.0);
            let inputs: Vec<Tensor<f64>> = net.store.params().iter().map(|(_, t)| t.clone()).collect();
            let buffers: Vec<_> = net.store.buffers().to_vec();
            let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                net.store.buffers_mut().clone_from_slice(&buffers);
                let x = tape.constant(images.clone());
                let logits = net.forward_with(tape, x, v, Mode::Train)?;
                tape.cross_entropy(logits, &[0, 1, 1, 0])
            };
            reports.push(check_with(name, &inputs, &opts, fault_hook(fault), build)?);
        }
        Ok(reports)
    }
}
