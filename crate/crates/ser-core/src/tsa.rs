//! T-Sa attention: a BiLSTM-gated timing stage followed by grouped
//! space-channel attention with a channel shuffle.
//!
//! The timing stage collapses channels by averaging, runs a BiLSTM along the
//! frame axis (hidden size H/2 so the output width matches the input
//! height), and gates the input with the sigmoid of the result, one H x W
//! gate map broadcast over all channels.
//!
//! The space-channel stage splits the channels into G groups; each group is
//! halved into a channel branch (global-average-pooled, per-channel gate)
//! and a spatial branch (group-normalized, per-channel scaled, pointwise
//! gate). Halves are concatenated, groups reassembled, and a channel
//! shuffle mixes information across groups.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::nn::{BiLstm, GroupNorm, ParamModule, Parameter};
use crate::tensor::{self, Element, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TsaConfig {
    /// Group count G for the space-channel stage.
    pub groups: usize,
    /// Whole module on/off (off = identity).
    pub enabled: bool,
    /// Timing (BiLSTM) stage on/off.
    pub timing_enabled: bool,
}

impl Default for TsaConfig {
    fn default() -> Self {
        TsaConfig {
            groups: 8,
            enabled: true,
            timing_enabled: true,
        }
    }
}

impl TsaConfig {
    /// Divisibility checks against the trunk shape the module will see.
    pub fn validate(&self, channels: usize, height: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.groups == 0 || channels % self.groups != 0 {
            return Err(SerError::Config(format!(
                "tsa: groups {} must divide channel count {channels}",
                self.groups
            )));
        }
        if (channels / self.groups) % 2 != 0 {
            return Err(SerError::Config(format!(
                "tsa: channels per group {} must be even (two sub-branches)",
                channels / self.groups
            )));
        }
        if self.timing_enabled && height % 2 != 0 {
            return Err(SerError::Config(format!(
                "tsa: feature height {height} must be even (bilstm hidden = H/2)"
            )));
        }
        Ok(())
    }
}

/// Timing attention: sigmoid(BiLSTM(channel-mean(x))) gating x.
pub struct TimingAttention<T: Element> {
    bilstm: BiLstm<T>,
    height: usize,
}

impl<T: Element> TimingAttention<T> {
    pub fn new<R: Rng>(rng: &mut R, prefix: &str, height: usize) -> Result<Self> {
        if height % 2 != 0 {
            return Err(SerError::Config(format!(
                "timing attention: height {height} must be even"
            )));
        }
        Ok(TimingAttention {
            bilstm: BiLstm::new(rng, &format!("{prefix}.bilstm"), height, height / 2)?,
            height,
        })
    }

    pub fn bilstm(&self) -> &BiLstm<T> {
        &self.bilstm
    }

    /// Gate map before multiplication, `[B, H, W]`.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_b, _c, h, _w) = expect_bchw("timing_attention", x)?;
        if h != self.height {
            return Err(SerError::Dim {
                op: "timing_attention",
                detail: format!("height {h} != configured {}", self.height),
            });
        }
        let mean = tensor::axis_mean(x, 1, false)?; // [B, H, W]
        let seq = tensor::permute(&mean, &[0, 2, 1])?; // [B, W, H]
        let enc = self.bilstm.forward(&seq)?; // [B, W, H]
        let back = tensor::permute(&enc, &[0, 2, 1])?; // [B, H, W]
        Ok(tensor::sigmoid(&back))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, _c, h, w) = expect_bchw("timing_attention", x)?;
        let gate = self.gate(x)?;
        let gate4 = tensor::reshape(&gate, &[b, 1, h, w])?;
        tensor::mul(&gate4, x)
    }
}

impl<T: Element> ParamModule<T> for TimingAttention<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.bilstm.collect_params(out);
    }
}

/// Space-channel attention over channel groups, SA-style: per-channel gate
/// parameters shared across groups, channel shuffle last.
pub struct SpaceChannelAttention<T: Element> {
    groups: usize,
    branch_channels: usize, // C / (2G)
    c_weight: Parameter<T>,
    c_bias: Parameter<T>,
    s_weight: Parameter<T>,
    s_bias: Parameter<T>,
    gn: GroupNorm<T>,
}

impl<T: Element> SpaceChannelAttention<T> {
    pub fn new(prefix: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 || (channels / groups) % 2 != 0 {
            return Err(SerError::Config(format!(
                "space-channel attention: C={channels} must split into {groups} groups of even size"
            )));
        }
        let bc = channels / (2 * groups);
        // Gate parameters start at scale 0 / bias 1 (the cited convention).
        Ok(SpaceChannelAttention {
            groups,
            branch_channels: bc,
            c_weight: Parameter::new(format!("{prefix}.c_weight"), vec![T::zero(); bc], &[bc])?,
            c_bias: Parameter::new(format!("{prefix}.c_bias"), vec![T::one(); bc], &[bc])?,
            s_weight: Parameter::new(format!("{prefix}.s_weight"), vec![T::zero(); bc], &[bc])?,
            s_bias: Parameter::new(format!("{prefix}.s_bias"), vec![T::one(); bc], &[bc])?,
            // One group over the branch sub-channels.
            gn: GroupNorm::new(&format!("{prefix}.gn"), 1, bc)?,
        })
    }

    pub fn set_gate_params(&self, c_w: T, c_b: T, s_w: T, s_b: T) {
        let bc = self.branch_channels;
        self.c_weight.set_data(vec![c_w; bc]);
        self.c_bias.set_data(vec![c_b; bc]);
        self.s_weight.set_data(vec![s_w; bc]);
        self.s_bias.set_data(vec![s_b; bc]);
    }

    /// Channel branch: sigmoid(w1 * GAP(xc) + b1) applied per channel.
    pub fn channel_branch(&self, xc: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, _h, _w) = expect_bchw("channel_branch", xc)?;
        let gap = tensor::global_avg_pool(xc)?; // [B, bc]
        let scaled = tensor::mul(&gap, &self.c_weight.tensor())?;
        let gate = tensor::sigmoid(&tensor::add(&scaled, &self.c_bias.tensor())?);
        let gate4 = tensor::reshape(&gate, &[b, c, 1, 1])?;
        tensor::mul(&gate4, xc)
    }

    /// Spatial branch: sigmoid(w2 * GN(xs) + b2) pointwise.
    pub fn spatial_branch(&self, xs: &Tensor<T>) -> Result<Tensor<T>> {
        let (_b, c, _h, _w) = expect_bchw("spatial_branch", xs)?;
        let gn = self.gn.forward(xs)?;
        let w = tensor::reshape(&self.s_weight.tensor(), &[c, 1, 1])?;
        let bias = tensor::reshape(&self.s_bias.tensor(), &[c, 1, 1])?;
        let gate = tensor::sigmoid(&tensor::add(&tensor::mul(&gn, &w)?, &bias)?);
        tensor::mul(&gate, xs)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_b, c, _h, _w) = expect_bchw("space_channel_attention", x)?;
        if c != self.groups * 2 * self.branch_channels {
            return Err(SerError::Config(format!(
                "space-channel attention built for {} channels, got {c}",
                self.groups * 2 * self.branch_channels
            )));
        }
        let bc = self.branch_channels;
        let mut group_outputs = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let xc = tensor::slice_axis(x, 1, g * 2 * bc, bc)?;
            let xs = tensor::slice_axis(x, 1, g * 2 * bc + bc, bc)?;
            let yc = self.channel_branch(&xc)?;
            let ys = self.spatial_branch(&xs)?;
            group_outputs.push(tensor::concat(&[&yc, &ys], 1)?);
        }
        let refs: Vec<&Tensor<T>> = group_outputs.iter().collect();
        let assembled = tensor::concat(&refs, 1)?;
        tensor::channel_shuffle(&assembled, self.groups)
    }
}

impl<T: Element> ParamModule<T> for SpaceChannelAttention<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.push(&self.c_weight);
        out.push(&self.c_bias);
        out.push(&self.s_weight);
        out.push(&self.s_bias);
        self.gn.collect_params(out);
    }
}

/// The full T-Sa module; either stage can be absent per the config.
pub struct TsaModule<T: Element> {
    cfg: TsaConfig,
    timing: Option<TimingAttention<T>>,
    sca: Option<SpaceChannelAttention<T>>,
}

impl<T: Element> TsaModule<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        prefix: &str,
        cfg: &TsaConfig,
        channels: usize,
        height: usize,
    ) -> Result<Self> {
        cfg.validate(channels, height)?;
        let timing = if cfg.enabled && cfg.timing_enabled {
            Some(TimingAttention::new(rng, &format!("{prefix}.timing"), height)?)
        } else {
            None
        };
        let sca = if cfg.enabled {
            Some(SpaceChannelAttention::new(
                &format!("{prefix}.sca"),
                channels,
                cfg.groups,
            )?)
        } else {
            None
        };
        Ok(TsaModule {
            cfg: cfg.clone(),
            timing,
            sca,
        })
    }

    pub fn config(&self) -> &TsaConfig {
        &self.cfg
    }

    pub fn timing(&self) -> Option<&TimingAttention<T>> {
        self.timing.as_ref()
    }

    pub fn sca(&self) -> Option<&SpaceChannelAttention<T>> {
        self.sca.as_ref()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        if let Some(t) = &self.timing {
            y = t.forward(&y)?;
        }
        if let Some(s) = &self.sca {
            y = s.forward(&y)?;
        }
        Ok(y)
    }
}

impl<T: Element> ParamModule<T> for TsaModule<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        if let Some(t) = &self.timing {
            t.collect_params(out);
        }
        if let Some(s) = &self.sca {
            s.collect_params(out);
        }
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
