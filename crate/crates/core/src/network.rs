//! Encoder–decoder assembly: residual encoder, MGFI bottleneck,
//! skip-connected decoder, segmentation head and edge head.
//!
//! Each MGFI module with an upper section halves the bottleneck, so the
//! decoder runs one upsampling level per downsampling step. Levels whose
//! resolution matches an encoder stage concatenate that stage's output;
//! the final full-resolution level has no encoder skip to pair with.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ae::{ae_forward, AeParams};
use crate::error::{Error, Result};
use crate::mgfi::{mgfi_forward, MgfiConfig, MgfiParams};
use crate::ops::{self, BatchNormState, ConvParams, Mode};
use crate::params::{child, ConvSpec, Module, Visitor};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
    pub input_channels: usize,
    pub mgfi: MgfiConfig,
    pub mgfi_count: usize,
    /// Boundary-loss weight.
    pub lambda: f64,
    pub seed: u64,
    pub mgfi_upper: bool,
    pub mgfi_lower: bool,
    pub ae: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            classes: 2,
            input_channels: 3,
            mgfi: MgfiConfig::default(),
            mgfi_count: 1,
            lambda: 1.0,
            seed: 42,
            mgfi_upper: true,
            mgfi_lower: true,
            ae: true,
        }
    }
}

impl ModelConfig {
    /// Small widths used for desk-scale training and gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            mgfi: MgfiConfig { mid_channels: 16, ..MgfiConfig::default() },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::invalid("at least 2 encoder stages are required"));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::invalid("stage widths and blocks per stage must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("class count must be at least 2"));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::invalid("input channels must be 1 or 3"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be a finite non-negative number"));
        }
        self.mgfi_config().validate()
    }

    /// MGFI settings with the input width filled in from the deepest stage.
    pub fn mgfi_config(&self) -> MgfiConfig {
        let mut m = self.mgfi.clone();
        if m.in_channels == 0 {
            m.in_channels = *self.stage_channels.last().unwrap_or(&0);
        }
        m
    }

    /// Number of active MGFI modules (0 when both sections are ablated).
    pub fn mgfi_modules(&self) -> usize {
        if self.mgfi_upper || self.mgfi_lower {
            self.mgfi_count
        } else {
            0
        }
    }

    /// Total number of resolution halvings between input and bottleneck.
    pub fn downsamplings(&self) -> usize {
        self.stage_channels.len() + if self.mgfi_upper { self.mgfi_modules() } else { 0 }
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.downsamplings()
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.input_channels {
            return Err(Error::shape(format!("input has {} channels, model expects {}", s.c, self.input_channels)));
        }
        let d = self.divisor();
        if !s.h.is_multiple_of(d) || !s.w.is_multiple_of(d) {
            return Err(Error::shape(format!("input {}×{} must be divisible by {d} in both dimensions", s.h, s.w)));
        }
        Ok(())
    }
}

/// Conv (no bias) + BatchNorm pair.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Real = f32> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormState<T>,
}

impl<T: Real> ConvBn<T> {
    fn init(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let bn = BatchNormState::new(spec.cout);
        ConvBn { conv: spec.init(rng), bn }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ops::batchnorm(&ops::conv2d(x, &self.conv)?, &mut self.bn, mode)
    }
}

impl<T: Real> Module<T> for ConvBn<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.conv.visit(&child(prefix, "conv"), f);
        self.bn.visit(&child(prefix, "bn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Real = f32> {
    pub first: ConvBn<T>,
    pub second: ConvBn<T>,
    /// 1×1 projection when the block changes stride or width.
    pub shortcut: Option<ConvBn<T>>,
}

impl<T: Real> ResidualBlock<T> {
    fn init(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let first = ConvBn::init(ConvSpec::same(cin, cout, 3).stride(stride), rng);
        let second = ConvBn::init(ConvSpec::same(cout, cout, 3), rng);
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::init(ConvSpec::same(cin, cout, 1).stride(stride), rng));
        ResidualBlock { first, second, shortcut }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = ops::relu(&self.first.forward(x, mode)?);
        let h = self.second.forward(&h, mode)?;
        let skip = match self.shortcut.as_mut() {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&h, &skip)?))
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.first.visit(&child(prefix, "first"), f);
        self.second.visit(&child(prefix, "second"), f);
        if let Some(s) = self.shortcut.as_mut() {
            s.visit(&child(prefix, "shortcut"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkParams<T: Real = f32> {
    pub config: ModelConfig,
    pub stem: ConvBn<T>,
    pub stages: Vec<Vec<ResidualBlock<T>>>,
    pub mgfi: Vec<MgfiParams<T>>,
    /// Deepest level first.
    pub decoder: Vec<ConvBn<T>>,
    pub head: ConvParams<T>,
    pub ae: Option<AeParams<T>>,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T: Real = f32> {
    /// `(n, C, H, W)` class scores before softmax.
    pub logits: Tensor<T>,
    /// `(n, 1, H, W)` edge probabilities; absent when the edge head is ablated.
    pub edge: Option<Tensor<T>>,
}

impl<T: Real> NetworkParams<T> {
    /// Seeded initialization; identical configs give bit-identical params.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ch = &config.stage_channels;
        let stem = ConvBn::init(ConvSpec::same(config.input_channels, ch[0], 3), &mut rng);
        let mut stages = Vec::with_capacity(ch.len());
        let mut cin = ch[0];
        for &cout in ch {
            let blocks = (0..config.blocks_per_stage)
                .map(|b| if b == 0 { ResidualBlock::init(cin, cout, 2, &mut rng) } else { ResidualBlock::init(cout, cout, 1, &mut rng) })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        let mcfg = config.mgfi_config();
        if mcfg.in_channels != cin {
            return Err(Error::invalid(format!("MGFI width {} does not match the deepest stage ({cin})", mcfg.in_channels)));
        }
        let mgfi = (0..config.mgfi_modules())
            .map(|_| MgfiParams::init(&mcfg, config.mgfi_upper, config.mgfi_lower, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = Vec::new();
        for level in (0..config.downsamplings()).rev() {
            let skip = if (1..=ch.len()).contains(&level) { ch[level - 1] } else { 0 };
            let cout = ch[level.saturating_sub(1).min(ch.len() - 1)];
            decoder.push(ConvBn::init(ConvSpec::same(cin + skip, cout, 3), &mut rng));
            cin = cout;
        }
        let head = ConvSpec::same(cin, config.classes, 1).with_bias().init(&mut rng);
        let ae = config.ae.then(|| AeParams::init(cin, &mut rng));
        Ok(NetworkParams { config: config.clone(), stem, stages, mgfi, decoder, head, ae })
    }

    /// Skip features `s_1 … s_S`; `s_i` is at `1/2^i` resolution.
    pub fn encode(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        self.config.check_input(x.shape())?;
        let mut h = ops::relu(&self.stem.forward(x, mode)?);
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            for block in stage {
                h = block.forward(&h, mode)?;
            }
            skips.push(h.clone());
        }
        Ok(skips)
    }

    /// Final decoder features at full resolution.
    pub fn features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let skips = self.encode(x, mode)?;
        let mut h = skips.last().expect("at least two stages").clone();
        for m in &mut self.mgfi {
            h = mgfi_forward(&h, m, mode)?;
        }
        let levels = self.decoder.len();
        for (i, dec) in self.decoder.iter_mut().enumerate() {
            let level = levels - 1 - i;
            let up = ops::upsample_bilinear(&h, 2)?;
            let joined = match level.checked_sub(1).and_then(|j| skips.get(j)) {
                Some(s) => ops::concat_channels(&[&up, s])?,
                None => up,
            };
            h = ops::relu(&dec.forward(&joined, mode)?);
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Prediction<T>> {
        let h = self.features(x, mode)?;
        let logits = ops::pointwise_conv(&h, &self.head.weight, self.head.bias.as_ref())?;
        let edge = match &self.ae {
            Some(ae) => Some(ae_forward(&h, ae)?),
            None => None,
        };
        Ok(Prediction { logits, edge })
    }
}

impl<T: Real> Module<T> for NetworkParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.stem.visit(&child(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit(&child(prefix, &format!("stage{s}.block{b}")), f);
            }
        }
        for (i, m) in self.mgfi.iter_mut().enumerate() {
            m.visit(&child(prefix, &format!("mgfi{i}")), f);
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.visit(&child(prefix, &format!("decoder{i}")), f);
        }
        self.head.visit(&child(prefix, "head"), f);
        if let Some(ae) = self.ae.as_mut() {
            ae.visit(&child(prefix, "ae"), f);
        }
    }
}
