//! Residual block families: the ResNet basic block, the modified-kernel
//! ladder, the bottleneck-transformer (BoT) block and BoT with an internal
//! residual connection (IRC) around the attention layer.
//!
//! A block is a main path of [`Step`]s, a skip path (identity or 1×1
//! projection plus norm) and one activation after the residual sum.

use std::fmt;

use crate::attention::{MhsaConfig, MhsaLayer};
use crate::error::{Error, Result};
use crate::nn::{Act, Conv2d, Ctx, Norm, NormKind, ParamStore};
use crate::tape::Var;
use crate::tensor::Element;

/// Independent switches of the modified kernel. [`ModFlags::level`] gives the
/// cumulative ladder where each level adds one switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModFlags {
    pub use_gelu: bool,
    pub fewer_activations: bool,
    pub use_layer_norm: bool,
    pub leading_1x1: bool,
}

impl ModFlags {
    pub const MAX_LEVEL: u8 = 4;

    /// Level 0 is the plain basic block; levels 1–4 switch on GeLU, fewer
    /// activations/norms, layer norm and the leading 1×1 convolution in turn.
    pub fn level(level: u8) -> Result<Self> {
        if level > Self::MAX_LEVEL {
            return Err(Error::config(format!(
                "kernel modification level {level} outside 0..={}",
                Self::MAX_LEVEL
            )));
        }
        Ok(ModFlags {
            use_gelu: level >= 1,
            fewer_activations: level >= 2,
            use_layer_norm: level >= 3,
            leading_1x1: level >= 4,
        })
    }

    pub fn act(&self) -> Act {
        if self.use_gelu {
            Act::Gelu
        } else {
            Act::Relu
        }
    }

    pub fn norm(&self) -> NormKind {
        if self.use_layer_norm {
            NormKind::Layer
        } else {
            NormKind::Batch
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    ModifiedKernel(ModFlags),
    Bot,
    BotIrc,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Basic => f.write_str("basic"),
            BlockKind::ModifiedKernel(m) => write!(
                f,
                "modified(gelu={},fewer={},ln={},lead1x1={})",
                m.use_gelu as u8, m.fewer_activations as u8, m.use_layer_norm as u8, m.leading_1x1 as u8
            ),
            BlockKind::Bot => f.write_str("bot"),
            BlockKind::BotIrc => f.write_str("bot_irc"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockVariant {
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub stride: usize,
}

impl BlockVariant {
    pub fn new(kind: BlockKind, channels_in: usize, channels_out: usize, stride: usize) -> Self {
        BlockVariant {
            kind,
            channels_in,
            channels_out,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!(
                "block stride {} not in {{1,2}}",
                self.stride
            )));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::config("block channels must be positive"));
        }
        if matches!(self.kind, BlockKind::Bot | BlockKind::BotIrc)
            && (self.stride != 1 || self.channels_in != self.channels_out)
        {
            return Err(Error::config(
                "attention blocks require stride 1 and equal input/output channels",
            ));
        }
        if let BlockKind::ModifiedKernel(f) = self.kind {
            if f.leading_1x1 && self.channels_out < 2 {
                return Err(Error::config("leading 1x1 needs at least 2 output channels"));
            }
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.channels_in != self.channels_out
    }

    fn spec(&self) -> LayoutSpec {
        let (cin, cout, s) = (self.channels_in, self.channels_out, self.stride);
        match self.kind {
            BlockKind::Basic => LayoutSpec::classic(cin, cout, s, ModFlags::default()),
            BlockKind::ModifiedKernel(f) => LayoutSpec::classic(cin, cout, s, f),
            BlockKind::Bot | BlockKind::BotIrc => LayoutSpec {
                convs: vec![(3, cin, cout, s), (3, cout, cout, 1)],
                norm_after: vec![true, true],
                act_after: vec![true, false],
                mhsa_after_first: true,
                norm: NormKind::Batch,
                act: Act::Relu,
            },
        }
    }

    /// Parameter count from the layout formulas alone, without building.
    /// `spatial` is the input height×width (used by attention blocks).
    pub fn closed_form_param_count(&self, spatial: (usize, usize), heads: usize) -> usize {
        let spec = self.spec();
        let conv: usize = spec.convs.iter().map(|&(k, ci, co, _)| k * k * ci * co).sum();
        let norms: usize = spec
            .convs
            .iter()
            .zip(&spec.norm_after)
            .filter(|(_, &n)| n)
            .map(|(&(_, _, co, _), _)| 2 * co)
            .sum();
        let mhsa = if spec.mhsa_after_first {
            let c = self.channels_out;
            // conv → norm → act → MHSA → norm → act → conv → norm
            4 * c * c + (spatial.0 + spatial.1) * (c / heads) + 2 * c
        } else {
            0
        };
        let skip = if self.has_projection() {
            self.channels_in * self.channels_out + 2 * self.channels_out
        } else {
            0
        };
        conv + norms + mhsa + skip
    }
}

/// Conv/norm/activation placement for a variant.
struct LayoutSpec {
    /// (kernel, c_in, c_out, stride) per main-path convolution.
    convs: Vec<(usize, usize, usize, usize)>,
    norm_after: Vec<bool>,
    act_after: Vec<bool>,
    mhsa_after_first: bool,
    norm: NormKind,
    act: Act,
}

impl LayoutSpec {
    fn classic(cin: usize, cout: usize, stride: usize, f: ModFlags) -> Self {
        let convs = if f.leading_1x1 {
            let mid = cout / 2;
            vec![(1, cin, mid, 1), (3, mid, mid, stride), (3, mid, cout, 1)]
        } else {
            vec![(3, cin, cout, stride), (3, cout, cout, 1)]
        };
        let last = convs.len() - 1;
        let (norm_after, act_after) = if f.fewer_activations {
            // a single norm, after the first 3×3 convolution
            let first3 = convs.iter().position(|c| c.0 == 3).unwrap();
            (
                (0..convs.len()).map(|i| i == first3).collect(),
                vec![false; convs.len()],
            )
        } else {
            (
                vec![true; convs.len()],
                (0..convs.len()).map(|i| i != last).collect(),
            )
        };
        LayoutSpec {
            convs,
            norm_after,
            act_after,
            mhsa_after_first: false,
            norm: f.norm(),
            act: f.act(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Step {
    Conv(Conv2d),
    Norm(Norm),
    Act {
        name: String,
        act: Act,
    },
    /// Attention stage; with `irc` it computes `u + MHSA(u)`.
    Mhsa {
        layer: MhsaLayer,
        irc: bool,
    },
}

impl Step {
    fn describe(&self) -> Vec<String> {
        match self {
            Step::Conv(c) => vec![c.describe()],
            Step::Norm(n) => vec![n.describe()],
            Step::Act { name, act } => vec![format!("{name} {}", act.name())],
            Step::Mhsa { layer, irc } => {
                let mut v = vec![layer.describe()];
                if *irc {
                    v.push(format!("{}.skip add internal", layer.name));
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub name: String,
    pub variant: BlockVariant,
    pub main: Vec<Step>,
    pub downsample: Option<(Conv2d, Norm)>,
    pub post_act: Act,
}

impl ResidualBlock {
    /// Builds a block. `spatial` is the block's input height×width; it binds
    /// the attention position tables (after the first convolution's stride).
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        variant: BlockVariant,
        spatial: (usize, usize),
        heads: usize,
    ) -> Result<Self> {
        variant.validate()?;
        let spec = variant.spec();
        let mut main = Vec::new();
        let mut hw = spatial;
        for (i, &(k, ci, co, s)) in spec.convs.iter().enumerate() {
            let idx = i + 1;
            main.push(Step::Conv(Conv2d::new(
                store,
                &format!("{name}.conv{idx}"),
                ci,
                co,
                k,
                s,
                k / 2,
                false,
            )));
            hw = ((hw.0 + 2 * (k / 2) - k) / s + 1, (hw.1 + 2 * (k / 2) - k) / s + 1);
            let norm_prefix = match spec.norm {
                NormKind::Batch => "bn",
                NormKind::Layer => "ln",
            };
            if spec.norm_after[i] {
                main.push(Step::Norm(Norm::new(
                    store,
                    &format!("{name}.{norm_prefix}{idx}"),
                    spec.norm,
                    co,
                )));
            }
            if spec.act_after[i] {
                main.push(Step::Act {
                    name: format!("{name}.act{idx}"),
                    act: spec.act,
                });
            }
            if spec.mhsa_after_first && i == 0 {
                let cfg = MhsaConfig {
                    channels: co,
                    heads,
                    height: hw.0,
                    width: hw.1,
                };
                let layer = MhsaLayer::new(store, &format!("{name}.mhsa"), cfg)?;
                main.push(Step::Mhsa {
                    layer,
                    irc: variant.kind == BlockKind::BotIrc,
                });
                main.push(Step::Norm(Norm::new(
                    store,
                    &format!("{name}.bn_mhsa"),
                    NormKind::Batch,
                    co,
                )));
                main.push(Step::Act {
                    name: format!("{name}.act_mhsa"),
                    act: spec.act,
                });
            }
        }
        let downsample = variant.has_projection().then(|| {
            let conv = Conv2d::new(
                store,
                &format!("{name}.downsample.0"),
                variant.channels_in,
                variant.channels_out,
                1,
                variant.stride,
                0,
                false,
            );
            let norm = Norm::new(
                store,
                &format!("{name}.downsample.1"),
                spec.norm,
                variant.channels_out,
            );
            (conv, norm)
        });
        Ok(ResidualBlock {
            name: name.to_string(),
            variant,
            main,
            downsample,
            post_act: spec.act,
        })
    }

    pub fn kind(&self) -> BlockKind {
        self.variant.kind
    }

    pub fn mhsa(&self) -> Option<&MhsaLayer> {
        self.main.iter().find_map(|s| match s {
            Step::Mhsa { layer, .. } => Some(layer),
            _ => None,
        })
    }

    /// Main path only (no skip, no post-sum activation).
    pub fn main_path<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for step in &self.main {
            h = match step {
                Step::Conv(c) => c.forward(cx, h)?,
                Step::Norm(n) => n.forward(cx, h)?,
                Step::Act { act, .. } => act.apply(cx.tape, h)?,
                Step::Mhsa { layer, irc } => {
                    let a = layer.forward(cx, h)?;
                    if *irc {
                        cx.tape.add(h, a)?
                    } else {
                        a
                    }
                }
            };
        }
        Ok(h)
    }

    pub fn skip_path<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.downsample {
            Some((conv, norm)) => {
                let s = conv.forward(cx, x)?;
                norm.forward(cx, s)
            }
            None => Ok(x),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let main = self.main_path(cx, x)?;
        let skip = self.skip_path(cx, x)?;
        if cx.tape.shape(main) != cx.tape.shape(skip) {
            return Err(Error::shape(format!(
                "{}: residual sum of {:?} and {:?}",
                self.name,
                cx.tape.shape(main),
                cx.tape.shape(skip)
            )));
        }
        let sum = cx.tape.add(main, skip)?;
        self.post_act.apply(cx.tape, sum)
    }

    /// Layer-sequence lines, one op per line.
    pub fn describe(&self) -> Vec<String> {
        let mut lines: Vec<String> = self.main.iter().flat_map(Step::describe).collect();
        match &self.downsample {
            Some((c, n)) => {
                lines.push(c.describe());
                lines.push(n.describe());
            }
            None => lines.push(format!("{}.skip identity", self.name)),
        }
        lines.push(format!("{}.add residual", self.name));
        lines.push(format!("{}.act {}", self.name, self.post_act.name()));
        lines
    }

    /// Parameter count by enumerating the block's tensors in `store`.
    pub fn param_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        let prefix = format!("{}.", self.name);
        store
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

fn expect_kind(block: &ResidualBlock, ok: bool, want: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{}: expected a {want} block, found {}",
            block.name, block.variant.kind
        )))
    }
}

pub fn basic_block_forward<T: Element>(cx: &mut Ctx<'_, T>, x: Var, block: &ResidualBlock) -> Result<Var> {
    expect_kind(block, block.kind() == BlockKind::Basic, "basic")?;
    block.forward(cx, x)
}

pub fn modified_block_forward<T: Element>(cx: &mut Ctx<'_, T>, x: Var, block: &ResidualBlock) -> Result<Var> {
    expect_kind(
        block,
        matches!(block.kind(), BlockKind::ModifiedKernel(_)),
        "modified-kernel",
    )?;
    block.forward(cx, x)
}

pub fn bot_block_forward<T: Element>(cx: &mut Ctx<'_, T>, x: Var, block: &ResidualBlock) -> Result<Var> {
    expect_kind(block, block.kind() == BlockKind::Bot, "bottleneck-transformer")?;
    block.forward(cx, x)
}

pub fn bot_irc_block_forward<T: Element>(cx: &mut Ctx<'_, T>, x: Var, block: &ResidualBlock) -> Result<Var> {
    expect_kind(
        block,
        block.kind() == BlockKind::BotIrc,
        "bottleneck-transformer-with-internal-residual",
    )?;
    block.forward(cx, x)
}
