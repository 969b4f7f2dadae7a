//! ResNet-34 assembly with configurable kernel modifications and
//! bottleneck-transformer blocks in the last stage.

use crate::blocks::{BlockKind, BlockVariant, ModFlags, ResidualBlock};
use crate::error::{Error, Result};
use crate::nn::{Act, Conv2d, Ctx, Linear, Norm, NormKind, ParamStore};
use crate::tape::{Mode, PoolKind, Tape, Var};
use crate::tensor::Element;

/// Blocks per stage.
pub const STAGE_DEPTHS: [usize; 4] = [3, 4, 6, 3];
/// Stage widths relative to the base width (64 for the canonical network).
pub const STAGE_MULTIPLIERS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Input (height, width).
    pub input_size: (usize, usize),
    /// Number of trailing stage-4 blocks replaced by attention blocks (0–2).
    pub bot_blocks: usize,
    /// Internal residual connection around attention.
    pub irc: bool,
    /// Modified-kernel ladder level (0–4) for the convolutional blocks.
    pub kernel_mod: u8,
    pub seed: u64,
    /// Stem/stage-1 width; 64 for ResNet-34. Smaller values give reduced
    /// test instantiations with the same depth.
    pub base_width: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 53,
            input_size: (224, 224),
            bot_blocks: 0,
            irc: false,
            kernel_mod: 0,
            seed: 0,
            base_width: 64,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bot_blocks > 2 {
            return Err(Error::config(format!(
                "bot_blocks = {} (allowed 0, 1, 2)",
                self.bot_blocks
            )));
        }
        if self.irc && self.bot_blocks == 0 {
            return Err(Error::config("irc=true requires bot_blocks >= 1"));
        }
        ModFlags::level(self.kernel_mod)?;
        if self.num_classes < 1 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.base_width == 0 || self.heads == 0 {
            return Err(Error::config("base_width and heads must be positive"));
        }
        if self.bot_blocks > 0 && !(8 * self.base_width).is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "stage-4 width {} not divisible by {} heads",
                8 * self.base_width,
                self.heads
            )));
        }
        if self.input_size.0 < 1 || self.input_size.1 < 1 {
            return Err(Error::config("input size must be positive"));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        STAGE_MULTIPLIERS.map(|m| m * self.base_width)
    }

    /// Which block family occupies stage `stage` (0-based), position `index`.
    pub fn block_kind(&self, stage: usize, index: usize) -> Result<BlockKind> {
        let depth = STAGE_DEPTHS[stage];
        if stage == 3 && index >= depth - self.bot_blocks {
            return Ok(if self.irc {
                BlockKind::BotIrc
            } else {
                BlockKind::Bot
            });
        }
        Ok(match self.kernel_mod {
            0 => BlockKind::Basic,
            l => BlockKind::ModifiedKernel(ModFlags::level(l)?),
        })
    }

    /// Spatial size after the stem and after each stage.
    pub fn spatial_plan(&self) -> [(usize, usize); 5] {
        let conv = |x: usize, k: usize, s: usize, p: usize| (x + 2 * p - k) / s + 1;
        let stem = |x: usize| conv(conv(x, 7, 2, 3), 3, 2, 1);
        let mut hw = (stem(self.input_size.0), stem(self.input_size.1));
        let mut plan = [hw; 5];
        for (i, slot) in plan.iter_mut().skip(1).enumerate() {
            if i > 0 {
                hw = (conv(hw.0, 3, 2, 1), conv(hw.1, 3, 2, 1));
            }
            *slot = hw;
        }
        plan
    }

    /// Short identifier used in ablation tables.
    pub fn id(&self) -> String {
        format!(
            "bot{}_irc{}_km{}",
            self.bot_blocks, self.irc as u8, self.kernel_mod
        )
    }
}

pub struct Network<T: Element = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem_conv: Conv2d,
    pub stem_norm: Norm,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub fc: Linear,
}

/// Result of a forward pass: logits plus the tape handles of every parameter,
/// in store order, for reading gradients.
pub struct ForwardOutput {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl<T: Element> Network<T> {
    /// Deterministically builds and initializes a network from `config`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let widths = config.stage_widths();
        let plan = config.spatial_plan();
        if plan[4].0 == 0 || plan[4].1 == 0 {
            return Err(Error::config(format!("input {:?} too small", config.input_size)));
        }
        let stem_conv = Conv2d::new(&mut store, "conv1", 3, config.base_width, 7, 2, 3, false);
        let stem_norm = Norm::new(&mut store, "bn1", NormKind::Batch, config.base_width);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = config.base_width;
        for (s, (&depth, &width)) in STAGE_DEPTHS.iter().zip(&widths).enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for i in 0..depth {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let spatial = if i == 0 { plan[s] } else { plan[s + 1] };
                let variant = BlockVariant::new(config.block_kind(s, i)?, c_in, width, stride);
                blocks.push(ResidualBlock::new(
                    &mut store,
                    &format!("layer{}.{i}", s + 1),
                    variant,
                    spatial,
                    config.heads,
                )?);
                c_in = width;
            }
            stages.push(blocks);
        }
        let fc = Linear::new(&mut store, "fc", c_in, config.num_classes);
        Ok(Network {
            config: config.clone(),
            store,
            stem_conv,
            stem_norm,
            stages,
            fc,
        })
    }

    /// Logits (N×num_classes) for an N×3×H×W batch already on `tape`.
    /// Train mode uses batch statistics and updates running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<ForwardOutput> {
        let params = self.store.bind(tape);
        let logits = self.forward_with(tape, images, &params, mode)?;
        Ok(ForwardOutput { logits, params })
    }

    /// Forward pass using caller-supplied parameter handles (one per store
    /// entry, in store order) instead of the stored values.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        images: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        if params.len() != self.store.params().len() {
            return Err(Error::shape(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.store.params().len()
            )));
        }
        let shape = tape.shape(images).to_vec();
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(Error::shape(format!(
                "network expects N×3×{h}×{w} images, got {shape:?}"
            )));
        }
        let logits = {
            let mut cx = Ctx::new(tape, params, self.store.buffers_mut(), mode);
            let mut x = self.stem_conv.forward(&mut cx, images)?;
            x = self.stem_norm.forward(&mut cx, x)?;
            x = Act::Relu.apply(cx.tape, x)?;
            x = cx.tape.pool(x, PoolKind::Max, 3, 2, 1)?;
            for block in self.stages.iter().flatten() {
                x = block.forward(&mut cx, x)?;
            }
            x = cx.tape.pool(x, PoolKind::GlobalAvg, 0, 0, 0)?;
            let n = cx.tape.shape(x)[0];
            let c = cx.tape.shape(x)[1];
            x = cx.tape.reshape(x, &[n, c])?;
            self.fc.forward(&mut cx, x)?
        };
        Ok(logits)
    }

    /// Total scalar parameters, by enumeration of parameter tensors.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Newline-separated layer-sequence descriptor.
    pub fn descriptor(&self) -> String {
        let mut lines = vec![
            format!(
                "input 3x{}x{}",
                self.config.input_size.0, self.config.input_size.1
            ),
            self.stem_conv.describe(),
            self.stem_norm.describe(),
            "relu relu".to_string(),
            "maxpool maxpool3x3 s2 p1".to_string(),
        ];
        for block in self.stages.iter().flatten() {
            lines.extend(block.describe());
        }
        lines.push("avgpool global_avg".into());
        lines.push("flatten".into());
        lines.push(self.fc.describe());
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// The block families of stage `stage` (1-based, as in `layer1..layer4`).
    pub fn stage_kinds(&self, stage: usize) -> Vec<BlockKind> {
        self.stages[stage - 1].iter().map(|b| b.kind()).collect()
    }
}

/// Total scalar parameters of `net`.
pub fn param_count(net: &Network<impl Element>) -> usize {
    net.param_count()
}
