//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and enough context to
//! run its backward rule. Nodes are appended in evaluation order, so the tape
//! is already topologically sorted and `backward` is a single reverse sweep.
//!
//! Gradients of leaves accumulate across `backward` calls until
//! [`Tape::zero_grad`] is called.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::linalg::{self, BmmGeom, MatView};
use crate::kernels::norm;
use crate::kernels::pool::{self, PoolGeom};
use crate::kernels::{self as k};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable op the tape knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Mul,
    Scale,
    Reshape,
    Sum,
    Relu,
    Gelu,
    Conv2d,
    Linear,
    BatchNorm2dTrain,
    BatchNorm2dEval,
    LayerNorm,
    Softmax,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    BatchMatmul,
    PosEmbed2d,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Conv2d,
        OpKind::Linear,
        OpKind::BatchNorm2dTrain,
        OpKind::BatchNorm2dEval,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::GlobalAvgPool,
        OpKind::BatchMatmul,
        OpKind::PosEmbed2d,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::BatchNorm2dTrain => "batch_norm2d_train",
            OpKind::BatchNorm2dEval => "batch_norm2d_eval",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BatchMatmul => "batch_matmul",
            OpKind::PosEmbed2d => "pos_embed2d",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        norm: usize,
        inner: usize,
        means: Vec<T>,
        invstds: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    GlobalAvgPool(Var),
    Bmm {
        a: Var,
        b: Var,
        geom: BmmGeom,
    },
    PosEmbed2d {
        rh: Var,
        rw: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::BatchNorm { train: true, .. } => OpKind::BatchNorm2dTrain,
            Op::BatchNorm { train: false, .. } => OpKind::BatchNorm2dEval,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MaxPool { .. } => OpKind::MaxPool2d,
            Op::AvgPool { .. } => OpKind::AvgPool2d,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::Bmm { .. } => OpKind::BatchMatmul,
            Op::PosEmbed2d { .. } => OpKind::PosEmbed2d,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The recording of one forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
            fault: None,
        }
    }

    /// Fail fast with [`Error::NonFinite`] when any op produces NaN or Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Deliberately corrupts the backward rule of one op kind by scaling the
    /// gradients it emits. Used to confirm that gradient checks can fail.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiable iff the tensor was marked with
    /// [`Tensor::with_grad`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push_raw(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t.with_grad(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t.detached(), Op::Leaf, false)
    }

    /// A non-differentiable copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = Tensor::from_parts(shape, data);
        if self.check_finite && !value.all_finite() {
            let name = op.kind().map(OpKind::name).unwrap_or("leaf");
            return Err(Error::NonFinite { op: name.into() });
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::shape(format!(
                "{what} expects rank {rank}, got {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Elementwise

    /// Elementwise sum of two tensors of identical shape. No broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push_raw(value.detached(), Op::Reshape(a), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| k::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a), &[a])
    }

    // ---------------------------------------------------------------------
    // Linear maps

    /// 2D convolution with zero padding. `x`: N×Cin×H×W, `w`: Cout×Cin×kH×kW.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.expect_rank(x, 4, "conv2d input")?;
        self.expect_rank(w, 4, "conv2d weight")?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {xs:?}, weight {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be >= 1"));
        }
        if ws[2] > xs[2] + 2 * padding || ws[3] > xs[3] + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {ws:?} larger than padded input {xs:?} (pad {padding})"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} for {} output channels",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
        };
        let out = conv::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let shape = vec![geom.n, geom.c_out, geom.out_h(), geom.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(shape, out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// `x · wᵀ + b` for `x`: N×Din, `w`: Dout×Din, `b`: Dout.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.expect_rank(x, 2, "linear input")?;
        self.expect_rank(w, 2, "linear weight")?;
        let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
        let (dout, wdin) = (self.shape(w)[0], self.shape(w)[1]);
        if din != wdin {
            return Err(Error::shape(format!(
                "linear: input {:?}, weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!(
                    "linear bias {:?} for {dout} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.data(x),
            din as isize,
            1,
            self.data(w),
            1,
            din as isize,
            T::zero(),
            &mut out,
            dout as isize,
            1,
        );
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(vec![n, dout], out, Op::Linear { x, w, b }, &inputs)
    }

    /// Batched product of rank-3 tensors, `op(a[i]) · op(b[i])`, where `op`
    /// transposes when the flag is set. `b` may have batch size 1, in which
    /// case it is shared by every batch entry of `a`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.expect_rank(a, 3, "bmm lhs")?;
        self.expect_rank(b, 3, "bmm rhs")?;
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = MatView::new(as_[1], as_[2], trans_a);
        let bv = MatView::new(bs[1], bs[2], trans_b);
        let b_shared = bs[0] == 1 && as_[0] != 1;
        if (bs[0] != as_[0] && !b_shared) || av.cols != bv.rows {
            return Err(Error::shape(format!(
                "bmm: {as_:?}{} × {bs:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let geom = BmmGeom {
            batch: as_[0],
            b_shared,
            a: av,
            b: bv,
        };
        let out = linalg::bmm_forward(&geom, self.data(a), self.data(b));
        self.push(
            vec![geom.batch, geom.m(), geom.n()],
            out,
            Op::Bmm { a, b, geom },
            &[a, b],
        )
    }

    /// Factorized 2D position table: row `h·W + w` is `rh[h] + rw[w]`.
    pub fn pos_embed_2d(&mut self, rh: Var, rw: Var) -> Result<Var> {
        self.expect_rank(rh, 2, "pos_embed_2d height table")?;
        self.expect_rank(rw, 2, "pos_embed_2d width table")?;
        let (h, d) = (self.shape(rh)[0], self.shape(rh)[1]);
        let (w, dw) = (self.shape(rw)[0], self.shape(rw)[1]);
        if d != dw {
            return Err(Error::shape(format!(
                "pos_embed_2d: height dim {d} vs width dim {dw}"
            )));
        }
        let (rhd, rwd) = (self.data(rh), self.data(rw));
        let mut out = Vec::with_capacity(h * w * d);
        for i in 0..h {
            for j in 0..w {
                for c in 0..d {
                    out.push(rhd[i * d + c] + rwd[j * d + c]);
                }
            }
        }
        self.push(vec![h * w, d], out, Op::PosEmbed2d { rh, rw }, &[rh, rw])
    }

    // ---------------------------------------------------------------------
    // Normalization

    /// Batch normalization over N,H,W for each channel. In train mode the
    /// batch statistics are used and `stats` is updated with momentum; in
    /// eval mode `stats` is used as-is.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        cfg: NormConfig,
    ) -> Result<Var> {
        self.expect_rank(x, 4, "batch_norm2d input")?;
        let xs = self.shape(x).to_vec();
        let (n, c, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm2d affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batch_norm2d running stats size"));
        }
        let (mean, invstd, train): (Vec<T>, Vec<T>, bool) = match mode {
            Mode::Train => {
                if n * spatial < 2 {
                    return Err(Error::shape(format!(
                        "batch_norm2d in train mode needs at least 2 values per channel, got input {xs:?}"
                    )));
                }
                let st = norm::batch_stats(self.data(x), n, c, spatial);
                let m = cfg.momentum;
                let unbias = st.count as f64 / (st.count - 1) as f64;
                for ch in 0..c {
                    let rm = stats.mean[ch].as_f64();
                    let rv = stats.var[ch].as_f64();
                    stats.mean[ch] = T::from_f64_lossy((1.0 - m) * rm + m * st.mean[ch]);
                    stats.var[ch] = T::from_f64_lossy((1.0 - m) * rv + m * st.var[ch] * unbias);
                }
                let invstd = st
                    .var
                    .iter()
                    .map(|&v| T::from_f64_lossy(1.0 / (v + cfg.eps).sqrt()))
                    .collect();
                let mean = st.mean.into_iter().map(T::from_f64_lossy).collect();
                (mean, invstd, true)
            }
            Mode::Eval => {
                let invstd = stats
                    .var
                    .iter()
                    .map(|&v| T::from_f64_lossy(1.0 / (v.as_f64() + cfg.eps).sqrt()))
                    .collect();
                (stats.mean.clone(), invstd, false)
            }
        };
        let y = norm::channel_affine(
            self.data(x),
            n,
            c,
            spatial,
            &mean,
            &invstd,
            self.data(gamma),
            self.data(beta),
        );
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
            train,
        };
        self.push(xs, y, op, &[x, gamma, beta])
    }

    /// Layer normalization over the contiguous axis range `axes` (for
    /// example `1..2` normalizes the channels of an NCHW map, `1..ndim`
    /// normalizes each sample). `gamma`/`beta` have the shape of those axes.
    pub fn layer_norm(&mut self, x: Var, axes: Range<usize>, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axes.start >= axes.end || axes.end > xs.len() {
            return Err(Error::shape(format!("layer_norm axes {axes:?} for shape {xs:?}")));
        }
        let affine_shape = &xs[axes.clone()];
        if self.shape(gamma) != affine_shape && self.shape(gamma) != [affine_shape.iter().product()]
            || self.shape(beta) != self.shape(gamma)
        {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} for normalized shape {affine_shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let outer: usize = xs[..axes.start].iter().product();
        let normn: usize = affine_shape.iter().product();
        let inner: usize = xs[axes.end..].iter().product();
        let (y, means, invstds) = norm::layer_norm_forward(
            self.data(x),
            outer,
            normn,
            inner,
            self.data(gamma),
            self.data(beta),
            eps,
        );
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            outer,
            norm: normn,
            inner,
            means,
            invstds,
        };
        self.push(xs, y, op, &[x, gamma, beta])
    }

    // ---------------------------------------------------------------------
    // Reductions

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {xs:?}")));
        }
        let outer = xs[..axis].iter().product();
        let len = xs[axis];
        let inner = xs[axis + 1..].iter().product();
        let y = k::softmax(self.data(x), outer, len, inner);
        self.push(xs, y, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Pooling over an N×C×H×W map. `k`, `stride` and `padding` are ignored
    /// for [`PoolKind::GlobalAvg`], which returns N×C×1×1.
    pub fn pool(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var> {
        self.expect_rank(x, 4, "pool input")?;
        let xs = self.shape(x).to_vec();
        if kind == PoolKind::GlobalAvg {
            let spatial = xs[2] * xs[3];
            let inv = T::one() / T::from_usize(spatial).unwrap();
            let out = self
                .data(x)
                .chunks(spatial)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            return self.push(vec![xs[0], xs[1], 1, 1], out, Op::GlobalAvgPool(x), &[x]);
        }
        if stride == 0 || k == 0 || k > xs[2] + 2 * padding || k > xs[3] + 2 * padding {
            return Err(Error::shape(format!(
                "pool window {k} stride {stride} pad {padding} for {xs:?}"
            )));
        }
        if kind == PoolKind::Max && padding > k / 2 {
            // every window must touch at least one real element

            return Err(Error::shape("max pool padding must be at most window/2"));
        }
        let geom = PoolGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad: padding,
        };
        let shape = vec![xs[0], xs[1], geom.out_h(), geom.out_w()];
        match kind {
            PoolKind::Max => {
                let (out, arg) = pool::max_pool_forward(&geom, self.data(x));
                self.push(shape, out, Op::MaxPool { x, arg }, &[x])
            }
            PoolKind::Avg => {
                let out = pool::avg_pool_forward(&geom, self.data(x));
                self.push(shape, out, Op::AvgPool { x, geom }, &[x])
            }
            PoolKind::GlobalAvg => unreachable!(),
        }
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.expect_rank(logits, 2, "cross_entropy logits")?;
        let (n, kk) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= kk) {
            return Err(Error::shape(format!(
                "cross_entropy: label {bad} out of range for {kk} classes"
            )));
        }
        let probs = k::softmax(self.data(logits), n, kk, 1);
        let z = self.data(logits);
        let mut loss = 0.0f64;
        for (row, &l) in labels.iter().enumerate() {
            let r = &z[row * kk..(row + 1) * kk];
            let mx = r.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = mx + r.iter().map(|&v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            loss += lse - r[l].as_f64();
        }
        let loss = T::from_f64_lossy(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(vec![1], vec![loss], op, &[logits])
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Accumulates d`loss`/d`leaf` into every gradient-tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.grads.len() < self.nodes.len() {
                    self.grads.resize_with(self.nodes.len(), || None);
                }
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let mut contribs = self.backward_node(i, &g);
            if let (Some(f), Some(kind)) = (self.fault, self.nodes[i].op.kind()) {
                if f == kind {
                    let bump = T::from_f64_lossy(1.5);
                    for (_, d) in contribs.iter_mut() {
                        d.iter_mut().for_each(|v| *v *= bump);
                    }
                }
            }
            for (v, d) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &x)| *a += x),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of `v`; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bd).map(|(&g, &b)| g * b).collect()),
                    (*b, g.iter().zip(ad).map(|(&g, &a)| g * a).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Relu(a) => vec![(
                *a,
                self.data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )],
            Op::Gelu(a) => vec![(
                *a,
                self.data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| g * k::gelu_grad(x))
                    .collect(),
            )],
            Op::Conv2d { x, w, b, geom } => {
                let cg = conv::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                let mut out = Vec::new();
                if let Some(dx) = cg.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = cg.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                let mut out = Vec::new();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        g,
                        dout as isize,
                        1,
                        self.data(*w),
                        din as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        din as isize,
                        1,
                    );
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        g,
                        1,
                        dout as isize,
                        self.data(*x),
                        din as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        din as isize,
                        1,
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
                let f = if *train {
                    norm::batch_norm_train_backward
                } else {
                    norm::channel_affine_backward
                };
                let ag = f(self.data(*x), g, n, c, spatial, mean, invstd, self.data(*gamma));
                vec![(*x, ag.dx), (*gamma, ag.dgamma), (*beta, ag.dbeta)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                outer,
                norm: nn,
                inner,
                means,
                invstds,
            } => {
                let ag = norm::layer_norm_backward(
                    self.data(*x),
                    g,
                    *outer,
                    *nn,
                    *inner,
                    self.data(*gamma),
                    means,
                    invstds,
                );
                vec![(*x, ag.dx), (*gamma, ag.dgamma), (*beta, ag.dbeta)]
            }
            Op::Softmax { x, outer, len, inner } => {
                vec![(*x, k::softmax_backward(y, g, *outer, *len, *inner))]
            }
            Op::MaxPool { x, arg } => {
                vec![(*x, pool::max_pool_backward(self.value(*x).numel(), arg, g))]
            }
            Op::AvgPool { x, geom } => vec![(*x, pool::avg_pool_backward(geom, g))],
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let spatial = xs[2] * xs[3];
                let inv = T::one() / T::from_usize(spatial).unwrap();
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, spatial));
                }
                vec![(*x, dx)]
            }
            Op::Bmm { a, b, geom } => {
                let (da, db) =
                    linalg::bmm_backward(geom, self.data(*a), self.data(*b), g, self.rg(*a), self.rg(*b));
                da.map(|d| (*a, d))
                    .into_iter()
                    .chain(db.map(|d| (*b, d)))
                    .collect()
            }
            Op::PosEmbed2d { rh, rw } => {
                let (h, d) = (self.shape(*rh)[0], self.shape(*rh)[1]);
                let w = self.shape(*rw)[0];
                let mut drh = vec![T::zero(); h * d];
                let mut drw = vec![T::zero(); w * d];
                for i in 0..h {
                    for j in 0..w {
                        for c in 0..d {
                            let gv = g[(i * w + j) * d + c];
                            drh[i * d + c] += gv;
                            drw[j * d + c] += gv;
                        }
                    }
                }
                vec![(*rh, drh), (*rw, drw)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let kk = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / T::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * kk + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, d)]
            }
        }
    }
}
