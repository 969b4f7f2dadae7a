//! Named parameter storage and the parameterized layers shared by all
//! architectures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Mode, NormConfig, RunningStats, Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Ordered, named parameters and batch-norm running statistics.
///
/// Each parameter draws its initial values from its own ChaCha stream keyed
/// by `(seed, name)`, so a parameter's initialization does not depend on what
/// else the model contains.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element = f32> {
    seed: u64,
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, RunningStats<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            !self.params.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(fnv1a(name.as_bytes()));
                (0..numel)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect()
            }
        };
        self.params
            .push((name.to_string(), Tensor::from_parts(shape.to_vec(), data)));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, channels: usize) -> BufferId {
        self.buffers.push((name.to_string(), RunningStats::new(channels)));
        BufferId(self.buffers.len() - 1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, RunningStats<T>)] {
        &self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces a parameter's values; the shape must be unchanged.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.set_index(id.0, value)
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
        self.set_index(i, value)
    }

    pub fn set_index(&mut self, i: usize, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[i];
        if slot.1.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                slot.0,
                slot.1.shape(),
                value.shape()
            )));
        }
        slot.1 = value.detached();
        Ok(())
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        &mut self.buffers[id.0].1
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.buffers
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Same parameters in another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, s)| {
                    let cv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
                    (
                        n.clone(),
                        RunningStats {
                            mean: cv(&s.mean),
                            var: cv(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    params: &'a [Var],
    buffers: &'a mut [(String, RunningStats<T>)],
    pub mode: Mode,
    pub norm: NormConfig,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a [Var],
        buffers: &'a mut [(String, RunningStats<T>)],
        mode: Mode,
    ) -> Self {
        Ctx {
            tape,
            params,
            buffers,
            mode,
            norm: NormConfig::default(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

/// Activation choice for a layer position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Gelu,
}

impl Act {
    pub fn apply<T: Element>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Act::Relu => tape.relu(x),
            Act::Gelu => tape.gelu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Act::Relu => "relu",
            Act::Gelu => "gelu",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::FanInUniform { fan_in },
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[c_out], Init::FanInUniform { fan_in }));
        Conv2d {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), self.bias.map(|b| cx.p(b)));
        cx.tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.bias.map_or(0, |_| self.c_out)
    }

    pub fn describe(&self) -> String {
        format!(
            "{} conv{k}x{k} {}->{} s{} p{}{}",
            self.name,
            self.c_in,
            self.c_out,
            self.stride,
            self.padding,
            if self.bias.is_some() { " bias" } else { "" },
            k = self.kernel
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let init = Init::FanInUniform { fan_in: d_in };
        Linear {
            name: name.to_string(),
            weight: store.add(&format!("{name}.weight"), &[d_out, d_in], init),
            bias: store.add(&format!("{name}.bias"), &[d_out], init),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        cx.tape.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.d_out * self.d_in + self.d_out
    }

    pub fn describe(&self) -> String {
        format!("{} linear {}->{}", self.name, self.d_in, self.d_out)
    }
}

/// Batch normalization (per channel over N,H,W) or layer normalization
/// (over the channel axis at each spatial position).
#[derive(Debug, Clone)]
pub enum Norm {
    Batch {
        name: String,
        gamma: ParamId,
        beta: ParamId,
        stats: BufferId,
        channels: usize,
    },
    Layer {
        name: String,
        gamma: ParamId,
        beta: ParamId,
        channels: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

impl Norm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, kind: NormKind, channels: usize) -> Self {
        let gamma = store.add(&format!("{name}.weight"), &[channels], Init::Ones);
        let beta = store.add(&format!("{name}.bias"), &[channels], Init::Zeros);
        match kind {
            NormKind::Batch => Norm::Batch {
                name: name.to_string(),
                gamma,
                beta,
                stats: store.add_buffer(name, channels),
                channels,
            },
            NormKind::Layer => Norm::Layer {
                name: name.to_string(),
                gamma,
                beta,
                channels,
            },
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Norm::Batch {
                gamma, beta, stats, ..
            } => {
                let (g, b) = (cx.p(*gamma), cx.p(*beta));
                let (mode, cfg) = (cx.mode, cx.norm);
                let stats = &mut cx.buffers[stats.0].1;
                cx.tape.batch_norm2d(x, g, b, stats, mode, cfg)
            }
            Norm::Layer { gamma, beta, .. } => {
                let (g, b) = (cx.p(*gamma), cx.p(*beta));
                let eps = cx.norm.eps;
                cx.tape.layer_norm(x, 1..2, g, b, eps)
            }
        }
    }

    pub fn gamma(&self) -> ParamId {
        match self {
            Norm::Batch { gamma, .. } | Norm::Layer { gamma, .. } => *gamma,
        }
    }

    pub fn beta(&self) -> ParamId {
        match self {
            Norm::Batch { beta, .. } | Norm::Layer { beta, .. } => *beta,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Norm::Batch { channels, .. } | Norm::Layer { channels, .. } => 2 * channels,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Norm::Batch { name, channels, .. } => format!("{name} batch_norm {channels}"),
            Norm::Layer { name, channels, .. } => format!("{name} layer_norm {channels}"),
        }
    }
}
