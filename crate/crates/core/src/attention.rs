//! Multi-head self-attention over 2D feature maps with factorized relative
//! position embeddings (a content-position logit term).
//!
//! For a map of `L = H·W` positions and per-head width `d = C/heads`:
//!
//! ```text
//! logits = (qᵀk + qᵀr) / sqrt(d),  r[h·W + w] = rel_h[h] + rel_w[w]
//! out    = W_o · concat_heads(v · softmax(logits)ᵀ)
//! ```
//!
//! The query/key/value/output projections are bias-free 1×1 convolutions.
//! The output projection starts at zero.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhsaConfig {
    pub channels: usize,
    pub heads: usize,
    /// Spatial size the position tables are bound to.
    pub height: usize,
    pub width: usize,
}

impl MhsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "attention channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("attention spatial size must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// `4·C²` projection weights plus `(H + W)·d` position-table entries.
    pub fn param_count(&self) -> usize {
        4 * self.channels * self.channels + (self.height + self.width) * self.head_dim()
    }
}

#[derive(Debug, Clone)]
pub struct MhsaLayer {
    pub name: String,
    pub config: MhsaConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub rel_h: ParamId,
    pub rel_w: ParamId,
}

impl MhsaLayer {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, config: MhsaConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let d = config.head_dim();
        let proj = Init::FanInUniform { fan_in: c };
        let pos = Init::FanInUniform { fan_in: d };
        Ok(MhsaLayer {
            name: name.to_string(),
            config,
            wq: store.add(&format!("{name}.query.weight"), &[c, c, 1, 1], proj),
            wk: store.add(&format!("{name}.key.weight"), &[c, c, 1, 1], proj),
            wv: store.add(&format!("{name}.value.weight"), &[c, c, 1, 1], proj),
            wo: store.add(&format!("{name}.out.weight"), &[c, c, 1, 1], Init::Zeros),
            rel_h: store.add(&format!("{name}.rel_h"), &[config.height, d], pos),
            rel_w: store.add(&format!("{name}.rel_w"), &[config.width, d], pos),
        })
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.wq, self.wk, self.wv, self.wo, self.rel_h, self.rel_w]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.channels {
            return Err(Error::shape(format!(
                "{}: expected N×{}×{}×{}, got {shape:?}",
                self.name, c.channels, c.height, c.width
            )));
        }
        if shape[2] != c.height || shape[3] != c.width {
            return Err(Error::shape(format!(
                "{}: input spatial {}×{} does not match bound position tables {}×{}",
                self.name, shape[2], shape[3], c.height, c.width
            )));
        }
        Ok(())
    }

    /// Forward pass returning the output (N×C×H×W) and the post-softmax
    /// attention matrix (N×heads×L×L).
    pub fn forward_with_weights<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        self.check_input(cx.tape.shape(x))?;
        let n = cx.tape.shape(x)[0];
        let MhsaConfig {
            channels: c,
            heads,
            height: h,
            width: w,
        } = self.config;
        let d = c / heads;
        let l = h * w;
        let seq = [n * heads, d, l];

        let project = |cx: &mut Ctx<'_, T>, id: ParamId| -> Result<Var> {
            let y = cx.tape.conv2d(x, cx.p(id), None, 1, 0)?;
            cx.tape.reshape(y, &seq)
        };
        let q = project(cx, self.wq)?;
        let k = project(cx, self.wk)?;
        let v = project(cx, self.wv)?;

        let content = cx.tape.bmm(q, k, true, false)?;
        let r = cx.tape.pos_embed_2d(cx.p(self.rel_h), cx.p(self.rel_w))?;
        let r = cx.tape.reshape(r, &[1, l, d])?;
        let position = cx.tape.bmm(q, r, true, true)?;
        let logits = cx.tape.add(content, position)?;
        let logits = cx
            .tape
            .scale(logits, T::one() / T::from_usize(d).unwrap().sqrt())?;
        let attn = cx.tape.softmax(logits, 2)?;

        let mixed = cx.tape.bmm(v, attn, false, true)?;
        let mixed = cx.tape.reshape(mixed, &[n, c, h, w])?;
        let out = cx.tape.conv2d(mixed, cx.p(self.wo), None, 1, 0)?;
        let attn = cx.tape.reshape(attn, &[n, heads, l, l])?;
        Ok((out, attn))
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_with_weights(cx, x).map(|(out, _)| out)
    }

    /// The attention matrix used by [`MhsaLayer::forward`].
    pub fn attention_weights<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_with_weights(cx, x).map(|(_, a)| a)
    }

    pub fn describe(&self) -> String {
        let c = &self.config;
        format!(
            "{} mhsa {} heads={} pos=rel2d {}x{}",
            self.name, c.channels, c.heads, c.height, c.width
        )
    }
}
