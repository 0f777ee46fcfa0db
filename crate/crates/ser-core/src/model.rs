//! The assembled classifier: CNN stem -> T-Sa -> LCT stack -> global
//! average pool -> linear head.
//!
//! The stem opens with parallel 3x1 and 1x3 convolutions (frequency- and
//! time-oriented receptive fields) whose outputs are concatenated, followed
//! by 3x3 stages with BN + ReLU; the first two stages are trailed by 2x2
//! max pools (floor semantics), halving the map twice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::lct::{LctConfig, LctStack};
use crate::nn::{BatchNorm2d, Buffer, Conv2d, Linear, ParamModule, Parameter};
use crate::tensor::{self, Element, Tensor};
use crate::tsa::{TsaConfig, TsaModule};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StemStageConfig {
    pub kernel: usize,
    pub out_channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    /// Channels of each irregular stem branch (3x1 and 1x3).
    pub stem_branch_channels: usize,
    pub cnn_stem: Vec<StemStageConfig>,
    pub trunk_channels: usize,
    pub tsa: TsaConfig,
    pub lct: LctConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            n_mels: 26,
            n_frames: 178,
            stem_branch_channels: 16,
            cnn_stem: vec![
                StemStageConfig { kernel: 3, out_channels: 64, pool: true },
                StemStageConfig { kernel: 3, out_channels: 128, pool: true },
                StemStageConfig { kernel: 3, out_channels: 144, pool: false },
                StemStageConfig { kernel: 3, out_channels: 128, pool: false },
            ],
            trunk_channels: 128,
            tsa: TsaConfig::default(),
            lct: LctConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Spatial size of the feature map after the stem.
    pub fn trunk_hw(&self) -> Result<(usize, usize)> {
        let mut h = self.n_mels;
        let mut w = self.n_frames;
        for (i, stage) in self.cnn_stem.iter().enumerate() {
            if stage.pool {
                h /= 2;
                w /= 2;
            }
            if h == 0 || w == 0 {
                return Err(SerError::Config(format!(
                    "input {}x{} collapses to zero after stem stage {i}",
                    self.n_mels, self.n_frames
                )));
            }
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.num_classes, 4 | 7) {
            return Err(SerError::Config(format!(
                "num_classes must be 4 or 7, got {}",
                self.num_classes
            )));
        }
        if self.cnn_stem.is_empty() {
            return Err(SerError::Config("stem must have at least one stage".into()));
        }
        let last = self.cnn_stem.last().unwrap().out_channels;
        if last != self.trunk_channels {
            return Err(SerError::Config(format!(
                "last stem stage emits {last} channels but trunk_channels is {}",
                self.trunk_channels
            )));
        }
        if self.lct.channels != self.trunk_channels {
            return Err(SerError::Config(format!(
                "lct.channels {} must equal trunk_channels {}",
                self.lct.channels, self.trunk_channels
            )));
        }
        for stage in &self.cnn_stem {
            if stage.kernel % 2 == 0 {
                return Err(SerError::Config(
                    "stem kernels must be odd (same padding)".into(),
                ));
            }
        }
        let (h, _w) = self.trunk_hw()?;
        self.tsa.validate(self.trunk_channels, h)?;
        self.lct.validate()?;
        Ok(())
    }
}

struct StemStage<T: Element> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    pool: bool,
}

/// Irregular-conv front end plus stacked 3x3 stages.
pub struct Stem<T: Element> {
    branch_freq: Conv2d<T>, // 3x1: frequency-domain receptive field
    bn_freq: BatchNorm2d<T>,
    branch_time: Conv2d<T>, // 1x3: time-domain receptive field
    bn_time: BatchNorm2d<T>,
    stages: Vec<StemStage<T>>,
}

impl<T: Element> Stem<T> {
    fn new<R: Rng>(rng: &mut R, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let bc = cfg.stem_branch_channels;
        let branch_freq = Conv2d::new(
            rng,
            &format!("{prefix}.branch_freq"),
            1,
            bc,
            (3, 1),
            (1, 1),
            (1, 0),
            1,
            false,
        )?;
        let bn_freq = BatchNorm2d::new(&format!("{prefix}.bn_freq"), bc)?;
        let branch_time = Conv2d::new(
            rng,
            &format!("{prefix}.branch_time"),
            1,
            bc,
            (1, 3),
            (1, 1),
            (0, 1),
            1,
            false,
        )?;
        let bn_time = BatchNorm2d::new(&format!("{prefix}.bn_time"), bc)?;
        let mut stages = Vec::new();
        let mut c_in = 2 * bc;
        for (i, stage) in cfg.cnn_stem.iter().enumerate() {
            let pad = stage.kernel / 2;
            stages.push(StemStage {
                conv: Conv2d::new(
                    rng,
                    &format!("{prefix}.stage{i}.conv"),
                    c_in,
                    stage.out_channels,
                    (stage.kernel, stage.kernel),
                    (1, 1),
                    (pad, pad),
                    1,
                    false,
                )?,
                bn: BatchNorm2d::new(&format!("{prefix}.stage{i}.bn"), stage.out_channels)?,
                pool: stage.pool,
            });
            c_in = stage.out_channels;
        }
        Ok(Stem {
            branch_freq,
            bn_freq,
            branch_time,
            bn_time,
            stages,
        })
    }

    /// Output of the 3x1 branch alone (pre-concat), for receptive-field
    /// probing.
    pub fn freq_branch_raw(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.branch_freq.forward(x)
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let f = tensor::relu(&self.bn_freq.forward(&self.branch_freq.forward(x)?, training)?);
        let t = tensor::relu(&self.bn_time.forward(&self.branch_time.forward(x)?, training)?);
        let mut y = tensor::concat(&[&f, &t], 1)?;
        for stage in &self.stages {
            y = tensor::relu(&stage.bn.forward(&stage.conv.forward(&y)?, training)?);
            if stage.pool {
                y = tensor::max_pool2d(&y, 2)?;
            }
        }
        Ok(y)
    }
}

impl<T: Element> ParamModule<T> for Stem<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.branch_freq.collect_params(out);
        self.bn_freq.collect_params(out);
        self.branch_time.collect_params(out);
        self.bn_time.collect_params(out);
        for s in &self.stages {
            s.conv.collect_params(out);
            s.bn.collect_params(out);
        }
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<T>>) {
        self.bn_freq.collect_buffers(out);
        self.bn_time.collect_buffers(out);
        for s in &self.stages {
            s.bn.collect_buffers(out);
        }
    }
}

/// The full classifier.
pub struct SerModel<T: Element> {
    cfg: ModelConfig,
    pub stem: Stem<T>,
    pub tsa: TsaModule<T>,
    pub lct: LctStack<T>,
    pub head: Linear<T>,
    trunk_h: usize,
    trunk_w: usize,
}

impl<T: Element> SerModel<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.trunk_hw()?;
        let stem = Stem::new(rng, "stem", cfg)?;
        let tsa = TsaModule::new(rng, "tsa", &cfg.tsa, cfg.trunk_channels, h)?;
        let lct = LctStack::new(rng, "lct", &cfg.lct, h, w)?;
        let head = Linear::new(rng, "head", cfg.trunk_channels, cfg.num_classes)?;
        Ok(SerModel {
            cfg: cfg.clone(),
            stem,
            tsa,
            lct,
            head,
            trunk_h: h,
            trunk_w: w,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn trunk_hw(&self) -> (usize, usize) {
        (self.trunk_h, self.trunk_w)
    }

    /// Logits for a `[B, 1, n_mels, n_frames]` batch.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        match x.shape() {
            [_, 1, h, w] if *h == self.cfg.n_mels && *w == self.cfg.n_frames => {}
            other => {
                return Err(SerError::Dim {
                    op: "model_forward",
                    detail: format!(
                        "expected [B, 1, {}, {}], got {other:?}",
                        self.cfg.n_mels, self.cfg.n_frames
                    ),
                });
            }
        }
        let trunk = self.stem.forward(x, training)?;
        let attended = self.tsa.forward(&trunk)?;
        let mixed = self.lct.forward(&attended, training)?;
        let pooled = tensor::global_avg_pool(&mixed)?;
        self.head.forward(&pooled)
    }

    /// Ordered parameter registry (names unique by construction).
    pub fn parameters(&self) -> Result<Vec<&Parameter<T>>> {
        crate::nn::registry(self)
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = Vec::new();
        self.collect_buffers(&mut out);
        out
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut params = Vec::new();
        self.collect_params(&mut params);
        params.iter().map(|p| p.numel()).sum()
    }

    /// Parameter totals grouped by module path (stem, tsa, lct.blockN,
    /// head), in first-appearance order.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut params = Vec::new();
        self.collect_params(&mut params);
        let mut order: Vec<String> = Vec::new();
        let mut totals: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
        for p in params {
            let mut parts = p.name().split('.');
            let first = parts.next().unwrap_or("");
            let group = if first == "lct" {
                format!("{first}.{}", parts.next().unwrap_or(""))
            } else {
                first.to_string()
            };
            if !totals.contains_key(&group) {
                order.push(group.clone());
            }
            *totals.entry(group).or_insert(0) += p.numel();
        }
        order
            .into_iter()
            .map(|g| {
                let n = totals[&g];
                (g, n)
            })
            .collect()
    }
}

impl<T: Element> ParamModule<T> for SerModel<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.stem.collect_params(out);
        self.tsa.collect_params(out);
        self.lct.collect_params(out);
        self.head.collect_params(out);
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<T>>) {
        self.stem.collect_buffers(out);
        self.lct.collect_buffers(out);
    }
}

/// A scaled-down config with the full architecture, suitable for CPU tests
/// and the bundled synthetic-data demo.
pub fn tiny_config(num_classes: usize, n_mels: usize, n_frames: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        n_mels,
        n_frames,
        stem_branch_channels: 4,
        cnn_stem: vec![
            StemStageConfig { kernel: 3, out_channels: 16, pool: true },
            StemStageConfig { kernel: 3, out_channels: 16, pool: true },
        ],
        trunk_channels: 16,
        tsa: TsaConfig {
            groups: 2,
            enabled: true,
            timing_enabled: true,
        },
        lct: LctConfig {
            channels: 16,
            heads: 2,
            ca_reduction: 4,
            ffn_expansion: 2,
            dw_kernel: 3,
            num_blocks: 1,
            ca_enabled: true,
            se_enabled: true,
            llc_mode: crate::lct::LlcMode::Llc,
        },
    }
}
