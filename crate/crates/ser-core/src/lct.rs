//! The lightweight convolution-transformer block.
//!
//! One block is three stages in sequence, each keeping the `[B,C,H,W]`
//! shape:
//!
//! 1. LLC: 7x7 depthwise convolution with a residual, then a pointwise
//!    convolution (BN + ReLU after each conv). An ablation mode swaps the
//!    whole stage for a plain 3x3 convolution.
//! 2. CA-LMAM: multi-head attention whose queries pass through coordinate
//!    attention, with keys/values downsampled by strided 2x2 depthwise
//!    convolutions and a learnable position bias added to the logits.
//! 3. SE-IBFFN: inverted-bottleneck feed-forward (pointwise expand x4,
//!    7x7 depthwise, pointwise project) gated by squeeze-excitation.
//!
//! Batch norm separates the attention and feed-forward stages from the
//! residual stream (applied at the branch entry, with the skip connection
//! carrying the raw input).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamModule, Parameter};
use crate::tensor::{self, Element, Tensor};

/// SE bottleneck reduction inside the feed-forward stage.
pub const SE_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LlcMode {
    /// Depthwise + pointwise local mixing.
    Llc,
    /// Plain 3x3 convolution (ablation).
    Conv3x3,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LctConfig {
    pub channels: usize,
    pub heads: usize,
    pub ca_reduction: usize,
    pub ffn_expansion: usize,
    pub dw_kernel: usize,
    pub num_blocks: usize,
    pub ca_enabled: bool,
    pub se_enabled: bool,
    pub llc_mode: LlcMode,
}

impl Default for LctConfig {
    fn default() -> Self {
        LctConfig {
            channels: 128,
            heads: 4,
            ca_reduction: 8,
            ffn_expansion: 4,
            dw_kernel: 7,
            num_blocks: 2,
            ca_enabled: true,
            se_enabled: true,
            llc_mode: LlcMode::Llc,
        }
    }
}

impl LctConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.heads == 0 || c % self.heads != 0 {
            return Err(SerError::Config(format!(
                "lct: heads {} must divide channels {c}",
                self.heads
            )));
        }
        if self.ca_reduction == 0 || c % self.ca_reduction != 0 {
            return Err(SerError::Config(format!(
                "lct: ca_reduction {} must divide channels {c}",
                self.ca_reduction
            )));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(SerError::Config(format!(
                "lct: dw_kernel {} must be odd for symmetric padding",
                self.dw_kernel
            )));
        }
        if self.se_enabled && c % SE_REDUCTION != 0 {
            return Err(SerError::Config(format!(
                "lct: SE reduction {SE_REDUCTION} must divide channels {c}"
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(SerError::Config("lct: ffn_expansion must be positive".into()));
        }
        Ok(())
    }
}

fn expect_bchw<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        other => Err(SerError::Dim {
            op,
            detail: format!("expected [B,C,H,W], got {other:?}"),
        }),
    }
}

/// Local mixing stage.
pub enum LlcModule<T: Element> {
    Llc {
        dw: Conv2d<T>,
        bn1: BatchNorm2d<T>,
        pw: Conv2d<T>,
        bn2: BatchNorm2d<T>,
    },
    Conv3x3 {
        conv: Conv2d<T>,
        bn: BatchNorm2d<T>,
    },
}

impl<T: Element> LlcModule<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        prefix: &str,
        channels: usize,
        dw_kernel: usize,
        mode: LlcMode,
    ) -> Result<Self> {
        match mode {
            LlcMode::Llc => {
                let pad = dw_kernel / 2;
                Ok(LlcModule::Llc {
                    // BN follows each conv, so the conv bias is redundant.
                    dw: Conv2d::depthwise(
                        rng,
                        &format!("{prefix}.dw"),
                        channels,
                        (dw_kernel, dw_kernel),
                        (1, 1),
                        (pad, pad),
                        false,
                    )?,
                    bn1: BatchNorm2d::new(&format!("{prefix}.bn1"), channels)?,
                    pw: Conv2d::new(
                        rng,
                        &format!("{prefix}.pw"),
                        channels,
                        channels,
                        (1, 1),
                        (1, 1),
                        (0, 0),
                        1,
                        false,
                    )?,
                    bn2: BatchNorm2d::new(&format!("{prefix}.bn2"), channels)?,
                })
            }
            LlcMode::Conv3x3 => Ok(LlcModule::Conv3x3 {
                conv: Conv2d::new(
                    rng,
                    &format!("{prefix}.conv"),
                    channels,
                    channels,
                    (3, 3),
                    (1, 1),
                    (1, 1),
                    1,
                    false,
                )?,
                bn: BatchNorm2d::new(&format!("{prefix}.bn"), channels)?,
            }),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        match self {
            LlcModule::Llc { dw, bn1, pw, bn2 } => {
                let local = tensor::relu(&bn1.forward(&dw.forward(x)?, training)?);
                let mixed = tensor::add(&local, x)?;
                Ok(tensor::relu(&bn2.forward(&pw.forward(&mixed)?, training)?))
            }
            LlcModule::Conv3x3 { conv, bn } => {
                Ok(tensor::relu(&bn.forward(&conv.forward(x)?, training)?))
            }
        }
    }
}

impl<T: Element> ParamModule<T> for LlcModule<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        match self {
            LlcModule::Llc { dw, bn1, pw, bn2 } => {
                dw.collect_params(out);
                bn1.collect_params(out);
                pw.collect_params(out);
                bn2.collect_params(out);
            }
            LlcModule::Conv3x3 { conv, bn } => {
                conv.collect_params(out);
                bn.collect_params(out);
            }
        }
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a crate::nn::Buffer<T>>) {
        match self {
            LlcModule::Llc { bn1, bn2, .. } => {
                bn1.collect_buffers(out);
                bn2.collect_buffers(out);
            }
            LlcModule::Conv3x3 { bn, .. } => bn.collect_buffers(out),
        }
    }
}

/// Coordinate attention: directional average pooling along time and
/// frequency, a shared squeeze convolution, and two sigmoid gate maps
/// multiplied back onto the input.
pub struct CoordinateAttention<T: Element> {
    conv_squeeze: Conv2d<T>,
    bn: BatchNorm2d<T>,
    conv_t: Conv2d<T>,
    conv_f: Conv2d<T>,
}

impl<T: Element> CoordinateAttention<T> {
    pub fn new<R: Rng>(rng: &mut R, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(SerError::Config(format!(
                "coordinate attention: reduction {reduction} must divide channels {channels}"
            )));
        }
        let mid = channels / reduction;
        Ok(CoordinateAttention {
            conv_squeeze: Conv2d::new(
                rng,
                &format!("{prefix}.squeeze"),
                channels,
                mid,
                (1, 1),
                (1, 1),
                (0, 0),
                1,
                false,
            )?,
            bn: BatchNorm2d::new(&format!("{prefix}.bn"), mid)?,
            conv_t: Conv2d::new(
                rng,
                &format!("{prefix}.t"),
                mid,
                channels,
                (1, 1),
                (1, 1),
                (0, 0),
                1,
                true,
            )?,
            conv_f: Conv2d::new(
                rng,
                &format!("{prefix}.f"),
                mid,
                channels,
                (1, 1),
                (1, 1),
                (0, 0),
                1,
                true,
            )?,
        })
    }

    /// The two gate maps, `[B,C,H,1]` and `[B,C,1,W]`.
    pub fn gates(&self, x: &Tensor<T>, training: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, c, h, w) = expect_bchw("coordinate_attention", x)?;
        // Pool along time (over W) and frequency (over H).
        let pooled_t = tensor::reshape(&tensor::axis_mean(x, 3, false)?, &[b, c, h, 1])?;
        let pooled_f = tensor::reshape(&tensor::axis_mean(x, 2, false)?, &[b, c, w, 1])?;
        let stacked = tensor::concat(&[&pooled_t, &pooled_f], 2)?; // [B,C,H+W,1]
        let squeezed = tensor::hard_swish(
            &self
                .bn
                .forward(&self.conv_squeeze.forward(&stacked)?, training)?,
        );
        let part_t = tensor::slice_axis(&squeezed, 2, 0, h)?;
        let part_f = tensor::slice_axis(&squeezed, 2, h, w)?;
        let gate_t = tensor::sigmoid(&self.conv_t.forward(&part_t)?); // [B,C,H,1]
        let gate_f = tensor::permute(&tensor::sigmoid(&self.conv_f.forward(&part_f)?), &[0, 1, 3, 2])?; // [B,C,1,W]
        Ok((gate_t, gate_f))
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let (gate_t, gate_f) = self.gates(x, training)?;
        tensor::mul(&tensor::mul(x, &gate_t)?, &gate_f)
    }
}

impl<T: Element> ParamModule<T> for CoordinateAttention<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.conv_squeeze.collect_params(out);
        self.bn.collect_params(out);
        self.conv_t.collect_params(out);
        self.conv_f.collect_params(out);
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a crate::nn::Buffer<T>>) {
        self.bn.collect_buffers(out);
    }
}

/// Multi-head attention with coordinate-attention queries, downsampled
/// keys/values, and a learnable position bias.
pub struct Lmam<T: Element> {
    entry_bn: BatchNorm2d<T>,
    ca: Option<CoordinateAttention<T>>,
    k_down: Conv2d<T>,
    v_down: Conv2d<T>,
    k_lin: Linear<T>,
    v_lin: Linear<T>,
    pos_bias: Parameter<T>,
    heads: usize,
    height: usize,
    width: usize,
}

impl<T: Element> Lmam<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        prefix: &str,
        cfg: &LctConfig,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let c = cfg.channels;
        let n = height * width;
        let np = height.div_ceil(2) * width.div_ceil(2);
        let ca = if cfg.ca_enabled {
            Some(CoordinateAttention::new(
                rng,
                &format!("{prefix}.ca"),
                c,
                cfg.ca_reduction,
            )?)
        } else {
            None
        };
        Ok(Lmam {
            entry_bn: BatchNorm2d::new(&format!("{prefix}.entry_bn"), c)?,
            ca,
            k_down: Conv2d::depthwise(rng, &format!("{prefix}.k_down"), c, (2, 2), (2, 2), (0, 0), true)?,
            v_down: Conv2d::depthwise(rng, &format!("{prefix}.v_down"), c, (2, 2), (2, 2), (0, 0), true)?,
            k_lin: Linear::new(rng, &format!("{prefix}.k_lin"), c, c)?,
            v_lin: Linear::new(rng, &format!("{prefix}.v_lin"), c, c)?,
            // Relative-position stand-in: a full learnable logit bias,
            // zero-initialized.
            pos_bias: Parameter::new(
                format!("{prefix}.pos_bias"),
                vec![T::zero(); cfg.heads * n * np],
                &[cfg.heads, n, np],
            )?,
            heads: cfg.heads,
            height,
            width,
        })
    }

    pub fn ca(&self) -> Option<&CoordinateAttention<T>> {
        self.ca.as_ref()
    }

    pub fn v_lin(&self) -> &Linear<T> {
        &self.v_lin
    }

    pub fn k_lin(&self) -> &Linear<T> {
        &self.k_lin
    }

    /// Downsampled key/value token matrices `[B, N', C]`.
    pub fn downsample_kv(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, c, h, w) = expect_bchw("downsample_kv", x)?;
        // Ceil semantics on odd extents via asymmetric zero padding.
        let padded = if h % 2 == 1 || w % 2 == 1 {
            tensor::pad2d(x, 0, h % 2, 0, w % 2)?
        } else {
            x.clone()
        };
        let np = h.div_ceil(2) * w.div_ceil(2);
        let to_tokens = |spatial: &Tensor<T>| -> Result<Tensor<T>> {
            tensor::reshape(&tensor::permute(spatial, &[0, 2, 3, 1])?, &[b, np, c])
        };
        let k = self.k_lin.forward(&to_tokens(&self.k_down.forward(&padded)?)?)?;
        let v = self.v_lin.forward(&to_tokens(&self.v_down.forward(&padded)?)?)?;
        Ok((k, v))
    }

    /// Forward pass returning both the output and the attention
    /// probabilities `[B, heads, N, N']`.
    pub fn forward_with_attention(
        &self,
        x: &Tensor<T>,
        training: bool,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, c, h, w) = expect_bchw("lmam", x)?;
        if h != self.height || w != self.width {
            return Err(SerError::Dim {
                op: "lmam",
                detail: format!(
                    "built for {}x{}, got {h}x{w} (position bias is shape-bound)",
                    self.height, self.width
                ),
            });
        }
        let n = h * w;
        let np = h.div_ceil(2) * w.div_ceil(2);
        let d = c / self.heads;

        let y = self.entry_bn.forward(x, training)?;
        let q_src = match &self.ca {
            Some(ca) => ca.forward(&y, training)?,
            None => y.clone(),
        };
        let q = tensor::reshape(&tensor::permute(&q_src, &[0, 2, 3, 1])?, &[b, n, c])?;
        let (k, v) = self.downsample_kv(&y)?;

        let split = |tokens: &Tensor<T>, count: usize| -> Result<Tensor<T>> {
            tensor::permute(
                &tensor::reshape(tokens, &[b, count, self.heads, d])?,
                &[0, 2, 1, 3],
            )
        };
        let qh = split(&q, n)?; // [B, heads, N, d]
        let kh = tensor::permute(&split(&k, np)?, &[0, 1, 3, 2])?; // [B, heads, d, N']
        let vh = split(&v, np)?; // [B, heads, N', d]

        let scaled = tensor::scale(&tensor::matmul(&qh, &kh)?, 1.0 / (d as f64).sqrt());
        let logits = tensor::add(&scaled, &self.pos_bias.tensor())?;
        let attn = tensor::softmax(&logits, 3)?;
        let ctx = tensor::matmul(&attn, &vh)?; // [B, heads, N, d]
        let merged = tensor::reshape(&tensor::permute(&ctx, &[0, 2, 1, 3])?, &[b, h, w, c])?;
        let spatial = tensor::permute(&merged, &[0, 3, 1, 2])?;
        Ok((tensor::add(&spatial, x)?, attn))
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(x, training)?.0)
    }
}

impl<T: Element> ParamModule<T> for Lmam<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.entry_bn.collect_params(out);
        if let Some(ca) = &self.ca {
            ca.collect_params(out);
        }
        self.k_down.collect_params(out);
        self.v_down.collect_params(out);
        self.k_lin.collect_params(out);
        self.v_lin.collect_params(out);
        out.push(&self.pos_bias);
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a crate::nn::Buffer<T>>) {
        self.entry_bn.collect_buffers(out);
        if let Some(ca) = &self.ca {
            ca.collect_buffers(out);
        }
    }
}

/// Squeeze-excitation channel gate.
pub struct SeModule<T: Element> {
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Element> SeModule<T> {
    pub fn new<R: Rng>(rng: &mut R, prefix: &str, channels: usize) -> Result<Self> {
        if channels % SE_REDUCTION != 0 {
            return Err(SerError::Config(format!(
                "se: reduction {SE_REDUCTION} must divide channels {channels}"
            )));
        }
        Ok(SeModule {
            fc1: Linear::new(rng, &format!("{prefix}.fc1"), channels, channels / SE_REDUCTION)?,
            fc2: Linear::new(rng, &format!("{prefix}.fc2"), channels / SE_REDUCTION, channels)?,
        })
    }

    pub fn fc_params_to_zero(&self) {
        for p in [&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias] {
            p.set_data(vec![T::zero(); p.numel()]);
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, _h, _w) = expect_bchw("se", x)?;
        let squeezed = tensor::global_avg_pool(x)?; // [B, C]
        let gate = tensor::sigmoid(&self.fc2.forward(&tensor::relu(&self.fc1.forward(&squeezed)?))?);
        tensor::mul(&tensor::reshape(&gate, &[b, c, 1, 1])?, x)
    }
}

impl<T: Element> ParamModule<T> for SeModule<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.fc1.collect_params(out);
        self.fc2.collect_params(out);
    }
}

/// Inverted-bottleneck feed-forward with squeeze-excitation and residual.
pub struct SeIbffn<T: Element> {
    entry_bn: BatchNorm2d<T>,
    pw_expand: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    dw: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    pw_project: Conv2d<T>,
    se: Option<SeModule<T>>,
}

impl<T: Element> SeIbffn<T> {
    pub fn new<R: Rng>(rng: &mut R, prefix: &str, cfg: &LctConfig) -> Result<Self> {
        let c = cfg.channels;
        let mid = c * cfg.ffn_expansion;
        let pad = cfg.dw_kernel / 2;
        Ok(SeIbffn {
            entry_bn: BatchNorm2d::new(&format!("{prefix}.entry_bn"), c)?,
            pw_expand: Conv2d::new(
                rng,
                &format!("{prefix}.pw_expand"),
                c,
                mid,
                (1, 1),
                (1, 1),
                (0, 0),
                1,
                false,
            )?,
            bn1: BatchNorm2d::new(&format!("{prefix}.bn1"), mid)?,
            dw: Conv2d::depthwise(
                rng,
                &format!("{prefix}.dw"),
                mid,
                (cfg.dw_kernel, cfg.dw_kernel),
                (1, 1),
                (pad, pad),
                false,
            )?,
            bn2: BatchNorm2d::new(&format!("{prefix}.bn2"), mid)?,
            pw_project: Conv2d::new(
                rng,
                &format!("{prefix}.pw_project"),
                mid,
                c,
                (1, 1),
                (1, 1),
                (0, 0),
                1,
                true,
            )?,
            se: if cfg.se_enabled {
                Some(SeModule::new(rng, &format!("{prefix}.se"), c)?)
            } else {
                None
            },
        })
    }

    pub fn se(&self) -> Option<&SeModule<T>> {
        self.se.as_ref()
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let y = self.entry_bn.forward(x, training)?;
        let expanded = tensor::hard_swish(&self.bn1.forward(&self.pw_expand.forward(&y)?, training)?);
        let local = tensor::hard_swish(&self.bn2.forward(&self.dw.forward(&expanded)?, training)?);
        let projected = self.pw_project.forward(&local)?;
        let gated = match &self.se {
            Some(se) => se.forward(&projected)?,
            None => projected,
        };
        tensor::add(&gated, x)
    }
}

impl<T: Element> ParamModule<T> for SeIbffn<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.entry_bn.collect_params(out);
        self.pw_expand.collect_params(out);
        self.bn1.collect_params(out);
        self.dw.collect_params(out);
        self.bn2.collect_params(out);
        self.pw_project.collect_params(out);
        if let Some(se) = &self.se {
            se.collect_params(out);
        }
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a crate::nn::Buffer<T>>) {
        self.entry_bn.collect_buffers(out);
        self.bn1.collect_buffers(out);
        self.bn2.collect_buffers(out);
    }
}

/// One LCT block: LLC -> CA-LMAM -> SE-IBFFN.
pub struct LctBlock<T: Element> {
    pub llc: LlcModule<T>,
    pub attn: Lmam<T>,
    pub ffn: SeIbffn<T>,
}

impl<T: Element> LctBlock<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        prefix: &str,
        cfg: &LctConfig,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        Ok(LctBlock {
            llc: LlcModule::new(
                rng,
                &format!("{prefix}.llc"),
                cfg.channels,
                cfg.dw_kernel,
                cfg.llc_mode,
            )?,
            attn: Lmam::new(rng, &format!("{prefix}.attn"), cfg, height, width)?,
            ffn: SeIbffn::new(rng, &format!("{prefix}.ffn"), cfg)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let local = self.llc.forward(x, training)?;
        let global = self.attn.forward(&local, training)?;
        self.ffn.forward(&global, training)
    }
}

impl<T: Element> ParamModule<T> for LctBlock<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.llc.collect_params(out);
        self.attn.collect_params(out);
        self.ffn.collect_params(out);
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a crate::nn::Buffer<T>>) {
        self.llc.collect_buffers(out);
        self.attn.collect_buffers(out);
        self.ffn.collect_buffers(out);
    }
}

/// The LCT stack: `num_blocks` blocks applied in sequence (zero blocks is
/// the identity).
pub struct LctStack<T: Element> {
    pub blocks: Vec<LctBlock<T>>,
}

impl<T: Element> LctStack<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        prefix: &str,
        cfg: &LctConfig,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            blocks.push(LctBlock::new(
                rng,
                &format!("{prefix}.block{i}"),
                cfg,
                height,
                width,
            )?);
        }
        Ok(LctStack { blocks })
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.forward(&y, training)?;
        }
        Ok(y)
    }
}

impl<T: Element> ParamModule<T> for LctStack<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        for b in &self.blocks {
            b.collect_params(out);
        }
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a crate::nn::Buffer<T>>) {
        for b in &self.blocks {
            b.collect_buffers(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> LctConfig {
        LctConfig {
            channels: 8,
            heads: 2,
            ca_reduction: 4,
            ffn_expansion: 4,
            dw_kernel: 7,
            num_blocks: 1,
            ca_enabled: true,
            se_enabled: true,
            llc_mode: LlcMode::Llc,
        }
    }

    fn random_input(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed | 1;
        let data: Vec<f64> = (0..b * c * h * w)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(data, &[b, c, h, w]).unwrap()
    }

    fn zero_params(m: &dyn ParamModule<f64>) {
        let mut params = Vec::new();
        m.collect_params(&mut params);
        for p in params {
            p.set_data(vec![0.0; p.numel()]);
        }
    }

    #[test]
    fn llc_zero_dw_identity_pw_gives_relu_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let llc = LlcModule::<f64>::new(&mut rng, "llc", 3, 7, LlcMode::Llc).unwrap();
        if let LlcModule::Llc { dw, bn1, pw, bn2 } = &llc {
            dw.weight.set_data(vec![0.0; dw.weight.numel()]);
            let mut eye = vec![0.0; 9];
            for i in 0..3 {
                eye[i * 3 + i] = 1.0;
            }
            pw.weight.set_data(eye);
            bn1.set_identity_eval();
            bn2.set_identity_eval();
        }
        let x = random_input(1, 3, 4, 5, 9);
        // Eval mode: fresh BN running stats are the identity transform.
        let y = llc.forward(&x, false).unwrap();
        for (yo, xo) in y.data().iter().zip(x.data()) {
            assert!((yo - xo.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn llc_preserves_shape_and_matches_staged_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let llc = LlcModule::<f64>::new(&mut rng, "llc", 4, 3, LlcMode::Llc).unwrap();
        let x = random_input(2, 4, 5, 6, 77);
        let y = llc.forward(&x, false).unwrap();
        assert_eq!(y.shape(), x.shape());

        if let LlcModule::Llc { dw, bn1, pw, bn2 } = &llc {
            let local = tensor::relu(&bn1.forward(&dw.forward(&x).unwrap(), false).unwrap());
            let mixed = tensor::add(&local, &x).unwrap();
            let oracle =
                tensor::relu(&bn2.forward(&pw.forward(&mixed).unwrap(), false).unwrap());
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn downsample_all_ones_pre_linear_is_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_cfg();
        let lmam = Lmam::<f64>::new(&mut rng, "a", &cfg, 4, 6).unwrap();
        // All-ones 2x2 kernels, zero conv bias, identity linear.
        lmam.k_down.weight.set_data(vec![1.0; 8 * 4]);
        lmam.k_down.bias.as_ref().unwrap().set_data(vec![0.0; 8]);
        let mut eye = vec![0.0; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        lmam.k_lin.weight.set_data(eye);
        lmam.k_lin.bias.set_data(vec![0.0; 8]);
        let x = Tensor::from_vec(vec![1.0; 8 * 4 * 6], &[1, 8, 4, 6]).unwrap();
        let (k, _v) = lmam.downsample_kv(&x).unwrap();
        assert_eq!(k.shape(), &[1, 2 * 3, 8]);
        assert!(k.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn downsample_token_count_uses_ceil() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_cfg();
        // 26 x 44 halves to 13 x 22 = 286 tokens.
        let lmam = Lmam::<f64>::new(&mut rng, "a", &cfg, 26, 44).unwrap();
        let x = random_input(1, 8, 26, 44, 3);
        let (k, v) = lmam.downsample_kv(&x).unwrap();
        assert_eq!(k.shape(), &[1, 286, 8]);
        assert_eq!(v.shape(), &[1, 286, 8]);
        // Odd extents pad on the bottom/right before the stride-2 conv.
        let lmam_odd = Lmam::<f64>::new(&mut rng, "b", &cfg, 5, 7).unwrap();
        let x_odd = random_input(1, 8, 5, 7, 4);
        let (k_odd, _) = lmam_odd.downsample_kv(&x_odd).unwrap();
        assert_eq!(k_odd.shape(), &[1, 3 * 4, 8]);
    }

    #[test]
    fn downsample_matches_strided_conv_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_cfg();
        let lmam = Lmam::<f64>::new(&mut rng, "a", &cfg, 4, 6).unwrap();
        let x = random_input(1, 8, 4, 6, 21);
        let (k, _) = lmam.downsample_kv(&x).unwrap();

        let conv_out = lmam.k_down.forward(&x).unwrap(); // [1, 8, 2, 3]
        let mut max_diff = 0.0f64;
        for token in 0..6 {
            for ci in 0..8 {
                // Token grid is row-major over (h', w').
                let spatial = conv_out.data()[ci * 6 + token];
                // Apply the linear map by hand.
                let mut acc = lmam.k_lin.bias.data()[ci];
                for cj in 0..8 {
                    acc += lmam.k_lin.weight.data()[ci * 8 + cj] * conv_out.data()[cj * 6 + token];
                }
                let _ = spatial;
                max_diff = max_diff.max((k.data()[token * 8 + ci] - acc).abs());
            }
        }
        assert!(max_diff < 1e-10, "max diff {max_diff}");
    }

    #[test]
    fn ca_constant_input_zero_convs_gates_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ca = CoordinateAttention::<f64>::new(&mut rng, "ca", 8, 4).unwrap();
        zero_params(&ca);
        // gamma of the BN was zeroed too, so the squeeze path is zero and
        // both gates sit at sigmoid(0) = 0.5.
        let x = Tensor::from_vec(vec![2.0; 8 * 3 * 4], &[1, 8, 3, 4]).unwrap();
        let y = ca.forward(&x, false).unwrap();
        for &v in y.data() {
            assert!((v - 0.25 * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ca_gates_bound_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ca = CoordinateAttention::<f64>::new(&mut rng, "ca", 8, 4).unwrap();
        let x = random_input(2, 8, 3, 4, 5);
        let y = ca.forward(&x, false).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (yo, xo) in y.data().iter().zip(x.data()) {
            assert!(yo.abs() < xo.abs() + 1e-15);
        }
    }

    #[test]
    fn ca_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ca = CoordinateAttention::<f64>::new(&mut rng, "ca", 8, 4).unwrap();
        let x = random_input(1, 8, 3, 4, 6);
        let y = ca.forward(&x, false).unwrap();
        let (gt, gf) = ca.gates(&x, false).unwrap();
        // y = x * gate_t (broadcast over W) * gate_f (broadcast over H)
        for c in 0..8 {
            for h in 0..3 {
                for w in 0..4 {
                    let expect = x.data()[c * 12 + h * 4 + w]
                        * gt.data()[c * 3 + h]
                        * gf.data()[c * 4 + w];
                    let got = y.data()[c * 12 + h * 4 + w];
                    assert!((got - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn lmam_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = tiny_cfg();
        let lmam = Lmam::<f64>::new(&mut rng, "a", &cfg, 4, 4).unwrap();
        let x = random_input(2, 8, 4, 4, 14);
        let (_, attn) = lmam.forward_with_attention(&x, false).unwrap();
        assert_eq!(attn.shape(), &[2, 2, 16, 4]);
        for row in attn.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn lmam_uniform_attention_on_identical_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = tiny_cfg();
        let lmam = Lmam::<f64>::new(&mut rng, "a", &cfg, 2, 2).unwrap();
        // Constant input makes every K' row identical (downsample of a
        // constant map is constant); pos_bias is zero-initialized.
        let x = Tensor::from_vec(vec![0.7; 8 * 4], &[1, 8, 2, 2]).unwrap();
        let (_, attn) = lmam.forward_with_attention(&x, false).unwrap();
        for &v in attn.data() {
            assert!((v - 1.0).abs() < 1e-12, "uniform over a single kv token");
        }

        // 4x4 input constant over space: N' = 4 identical keys -> 0.25 each.
        let lmam2 = Lmam::<f64>::new(&mut rng, "b", &cfg, 4, 4).unwrap();
        let x2 = Tensor::from_vec(vec![-0.3; 8 * 16], &[1, 8, 4, 4]).unwrap();
        let (out, attn2) = lmam2.forward_with_attention(&x2, false).unwrap();
        for &v in attn2.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
        assert_eq!(out.shape(), x2.shape());
    }

    #[test]
    fn lmam_single_head_tiny_case_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = LctConfig {
            channels: 1,
            heads: 1,
            ca_reduction: 1,
            ca_enabled: false,
            se_enabled: false,
            ..tiny_cfg()
        };
        let lmam = Lmam::<f64>::new(&mut rng, "a", &cfg, 2, 2).unwrap();
        lmam.entry_bn.set_identity_eval();
        let x = Tensor::from_vec(vec![0.2, -0.4, 0.6, 0.8], &[1, 1, 2, 2]).unwrap();
        let (out, attn) = lmam.forward_with_attention(&x, false).unwrap();

        // Hand computation (eval BN is identity at init):
        // q = x tokens; single kv token from the 2x2 stride-2 conv + linear.
        let wk = lmam.k_down.weight.data();
        let bk = lmam.k_down.bias.as_ref().unwrap().data()[0];
        let kv_in = 0.2 * wk[0] - 0.4 * wk[1] + 0.6 * wk[2] + 0.8 * wk[3] + bk;
        let k = lmam.k_lin.weight.data()[0] * kv_in + lmam.k_lin.bias.data()[0];
        let wv = lmam.v_down.weight.data();
        let bv = lmam.v_down.bias.as_ref().unwrap().data()[0];
        let vv_in = 0.2 * wv[0] - 0.4 * wv[1] + 0.6 * wv[2] + 0.8 * wv[3] + bv;
        let v = lmam.v_lin.weight.data()[0] * vv_in + lmam.v_lin.bias.data()[0];
        let _ = k; // single key -> softmax row is exactly 1
        for &a in attn.data() {
            assert!((a - 1.0).abs() < 1e-12);
        }
        for (i, &xo) in x.data().iter().enumerate() {
            assert!((out.data()[i] - (xo + v)).abs() < 1e-10);
        }
    }

    #[test]
    fn lmam_zero_value_projection_is_identity_without_ca() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = LctConfig {
            ca_enabled: false,
            ..tiny_cfg()
        };
        let lmam = Lmam::<f64>::new(&mut rng, "a", &cfg, 3, 4).unwrap();
        lmam.v_lin.weight.set_data(vec![0.0; 64]);
        lmam.v_lin.bias.set_data(vec![0.0; 8]);
        let x = random_input(1, 8, 3, 4, 31);
        let y = lmam.forward(&x, false).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn se_zero_fcs_gate_half_and_per_channel_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let se = SeModule::<f64>::new(&mut rng, "se", 8).unwrap();
        se.fc_params_to_zero();
        let x = random_input(1, 8, 3, 3, 8);
        let y = se.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn se_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let se = SeModule::<f64>::new(&mut rng, "se", 8).unwrap();
        let x = random_input(2, 8, 2, 3, 9);
        let y = se.forward(&x).unwrap();

        let w1 = se.fc1.weight.data();
        let b1 = se.fc1.bias.data();
        let w2 = se.fc2.weight.data();
        let b2 = se.fc2.bias.data();
        for bi in 0..2 {
            let mut gap = [0.0; 8];
            for (c, g) in gap.iter_mut().enumerate() {
                let plane = &x.data()[(bi * 8 + c) * 6..(bi * 8 + c + 1) * 6];
                *g = plane.iter().sum::<f64>() / 6.0;
            }
            let mut hid = [0.0; 2];
            for (o, h) in hid.iter_mut().enumerate() {
                let mut acc = b1[o];
                for c in 0..8 {
                    acc += w1[o * 8 + c] * gap[c];
                }
                *h = acc.max(0.0);
            }
            for c in 0..8 {
                let mut acc = b2[c];
                for o in 0..2 {
                    acc += w2[c * 2 + o] * hid[o];
                }
                let gate = 1.0 / (1.0 + (-acc).exp());
                let plane = &x.data()[(bi * 8 + c) * 6..(bi * 8 + c + 1) * 6];
                for (i, &v) in plane.iter().enumerate() {
                    let got = y.data()[(bi * 8 + c) * 6 + i];
                    assert!((got - gate * v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ibffn_zero_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let cfg = tiny_cfg();
        let ffn = SeIbffn::<f64>::new(&mut rng, "ffn", &cfg).unwrap();
        // Zero every conv and SE weight; BN affine stays (gamma, beta) but
        // the branch is zero before the residual.
        for conv in [&ffn.pw_expand, &ffn.dw, &ffn.pw_project] {
            conv.weight.set_data(vec![0.0; conv.weight.numel()]);
            if let Some(b) = &conv.bias {
                b.set_data(vec![0.0; b.numel()]);
            }
        }
        ffn.se.as_ref().unwrap().fc_params_to_zero();
        let x = random_input(1, 8, 3, 4, 41);
        let y = ffn.forward(&x, false).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ibffn_shape_preserved_and_matches_staged_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = tiny_cfg();
        let ffn = SeIbffn::<f64>::new(&mut rng, "ffn", &cfg).unwrap();
        let x = random_input(2, 8, 3, 4, 42);
        let y = ffn.forward(&x, false).unwrap();
        assert_eq!(y.shape(), x.shape());

        let e = ffn.entry_bn.forward(&x, false).unwrap();
        let a = tensor::hard_swish(
            &ffn.bn1
                .forward(&ffn.pw_expand.forward(&e).unwrap(), false)
                .unwrap(),
        );
        let b = tensor::hard_swish(
            &ffn.bn2.forward(&ffn.dw.forward(&a).unwrap(), false).unwrap(),
        );
        let c = ffn.pw_project.forward(&b).unwrap();
        let g = ffn.se.as_ref().unwrap().forward(&c).unwrap();
        let oracle = tensor::add(&g, &x).unwrap();
        for (p, q) in y.data().iter().zip(oracle.data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn stack_zero_blocks_is_identity_and_shape_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut cfg = tiny_cfg();
        cfg.num_blocks = 0;
        let stack = LctStack::<f64>::new(&mut rng, "lct", &cfg, 4, 6).unwrap();
        let x = random_input(1, 8, 4, 6, 50);
        let y = stack.forward(&x, false).unwrap();
        assert_eq!(y.data(), x.data());

        for blocks in [1usize, 2, 3] {
            cfg.num_blocks = blocks;
            let stack = LctStack::<f64>::new(&mut rng, "lct", &cfg, 4, 6).unwrap();
            let y = stack.forward(&x, false).unwrap();
            assert_eq!(y.shape(), x.shape(), "{blocks} blocks");
        }
    }

    #[test]
    fn one_block_matches_three_stage_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = tiny_cfg();
        let stack = LctStack::<f64>::new(&mut rng, "lct", &cfg, 4, 4).unwrap();
        let x = random_input(1, 8, 4, 4, 51);
        let y = stack.forward(&x, false).unwrap();
        let block = &stack.blocks[0];
        let oracle = block
            .ffn
            .forward(
                &block
                    .attn
                    .forward(&block.llc.forward(&x, false).unwrap(), false)
                    .unwrap(),
                false,
            )
            .unwrap();
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
