//! The point proposal network: a residual base that reduces a patch to the
//! origin grid, and a three-layer proposal head emitting per-origin confidence
//! logits and grid-unit offsets.
//!
//! Base layout: a stride-2 stem convolution followed by stages of residual
//! blocks. The first block of every stage downsamples with stride 2 (with a
//! 1x1 projection shortcut), so `input_size / grid_m == 2^(stages + 1)`.
//! Every base convolution is followed by batch norm and ReLU; the residual sum
//! passes through a final ReLU. Counting the stem and the two convolutions of
//! each block gives the base depth (`1 + 2 * sum(stage_blocks)`).
//!
//! Head: two 3x3 convolutions without activation, then a 1x1 convolution to
//! one confidence channel and a parallel 1x1 convolution to two regression
//! channels. Only the confidence passes through a sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    dropout_backward, dropout_train, relu_backward, relu_inplace, BatchNorm2d, BnCache, Conv2d, Param,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::image::Image;

/// Smallest and largest confidence reported, keeping outputs inside `(0, 1)`.
pub const CONF_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Number of convolutional layers in the base.
    pub base_depth: usize,
    pub input_size: usize,
    pub grid: GridSpec,
    /// Stem width followed by one width per stage.
    pub feature_channels: Vec<usize>,
    /// Residual blocks per stage.
    pub stage_blocks: Vec<usize>,
    /// Width of the two shared head convolutions.
    pub head_channels: usize,
    /// Prior for the confidence bias initialisation.
    pub pi: f64,
    pub dropout_rate: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::resnet(31).expect("preset")
    }
}

impl NetConfig {
    /// Reference layouts for 224 px patches on a 7x7 grid. More blocks sit in
    /// the early, high-resolution stages.
    pub fn resnet(depth: usize) -> Result<Self> {
        let stage_blocks = match depth {
            9 => vec![1, 1, 1, 1],
            17 => vec![3, 2, 2, 1],
            31 => vec![5, 4, 3, 3],
            other => {
                return Err(Error::config(
                    "base_depth",
                    format!("no preset for depth {other}; expected 9, 17 or 31"),
                ))
            }
        };
        Ok(Self {
            base_depth: depth,
            input_size: 224,
            grid: GridSpec::default(),
            feature_channels: vec![16, 32, 64, 128, 256],
            stage_blocks,
            head_channels: 128,
            pi: 0.01,
            dropout_rate: 0.2,
        })
    }

    /// Same layout with every width multiplied by `factor`, rounded, at least 1.
    pub fn scaled_widths(mut self, factor: f64) -> Self {
        let scale = |c: usize| ((c as f64 * factor).round() as usize).max(1);
        self.feature_channels = self.feature_channels.iter().map(|&c| scale(c)).collect();
        self.head_channels = scale(self.head_channels);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.input_size != self.grid.patch_size {
            return Err(Error::config(
                "input_size",
                format!("{} differs from grid patch size {}", self.input_size, self.grid.patch_size),
            ));
        }
        if self.stage_blocks.is_empty() || self.stage_blocks.contains(&0) {
            return Err(Error::config("stage_blocks", "every stage needs at least one block"));
        }
        if self.feature_channels.len() != self.stage_blocks.len() + 1 {
            return Err(Error::config(
                "feature_channels",
                format!(
                    "expected {} widths (stem + {} stages), got {}",
                    self.stage_blocks.len() + 1,
                    self.stage_blocks.len(),
                    self.feature_channels.len()
                ),
            ));
        }
        if self.feature_channels.contains(&0) || self.head_channels == 0 {
            return Err(Error::config("feature_channels", "widths must be positive"));
        }
        let depth = 1 + 2 * self.stage_blocks.iter().sum::<usize>();
        if depth != self.base_depth {
            return Err(Error::config(
                "base_depth",
                format!("{} does not match stage layout ({depth} layers)", self.base_depth),
            ));
        }
        let downsamplings = self.stage_blocks.len() as u32 + 1;
        if self.input_size != self.grid.grid_m << downsamplings {
            return Err(Error::config(
                "grid",
                format!(
                    "{} stride-2 downsamplings map {} px to {} origins, not {}",
                    downsamplings,
                    self.input_size,
                    self.input_size >> downsamplings,
                    self.grid.grid_m
                ),
            ));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::config("pi", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Initial confidence-branch bias, `-ln((1 - pi) / pi)`.
    pub fn confidence_bias(&self) -> f64 {
        -((1.0 - self.pi) / self.pi).ln()
    }
}

/// Per-patch network output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub grid_m: usize,
    pub grid_n: usize,
    /// `grid_m x grid_n`, row-major, values in `(0, 1)`.
    pub confidence: Vec<f32>,
    /// `grid_m x grid_n x 2`: `(dx, dy)` in grid units.
    pub regression: Vec<f32>,
}

impl NetOutput {
    pub fn zeros(grid_m: usize, grid_n: usize) -> Self {
        Self {
            grid_m,
            grid_n,
            confidence: vec![0.5; grid_m * grid_n],
            regression: vec![0.0; grid_m * grid_n * 2],
        }
    }

    pub fn confidence_at(&self, i: usize, j: usize) -> f32 {
        self.confidence[i * self.grid_n + j]
    }

    pub fn offset_at(&self, i: usize, j: usize) -> (f32, f32) {
        let k = (i * self.grid_n + j) * 2;
        (self.regression[k], self.regression[k + 1])
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBn<S> {
    conv: Conv2d<S>,
    bn: BatchNorm2d<S>,
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock<S> {
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    shortcut: Option<ConvBn<S>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Head<S> {
    conv1: Conv2d<S>,
    conv2: Conv2d<S>,
    confidence: Conv2d<S>,
    regression: Conv2d<S>,
}

/// The point proposal network, generic over its floating-point type.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: NetConfig,
    stem: ConvBn<S>,
    blocks: Vec<ResBlock<S>>,
    head: Head<S>,
}

/// Raw batch outputs: confidence logits `[n, 1, m, n]` and offsets `[n, 2, m, n]`.
#[derive(Debug, Clone)]
pub struct RawOutput<S> {
    pub logits: Tensor<S>,
    pub offsets: Tensor<S>,
}

struct StemCache<S> {
    bn: BnCache<S>,
    out: Tensor<S>,
    mask: Option<Vec<S>>,
}

struct BlockCache<S> {
    input: Tensor<S>,
    bn1: BnCache<S>,
    a1: Tensor<S>,
    bn2: BnCache<S>,
    short_bn: Option<BnCache<S>>,
    sum: Tensor<S>,
    mask: Option<Vec<S>>,
}

struct HeadCache<S> {
    features: Tensor<S>,
    h1: Tensor<S>,
    mask1: Option<Vec<S>>,
    h2: Tensor<S>,
    mask2: Option<Vec<S>>,
}

/// Activations recorded by a training-mode forward pass.
pub struct Tape<S> {
    input: Tensor<S>,
    stem: StemCache<S>,
    blocks: Vec<BlockCache<S>>,
    head: HeadCache<S>,
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialised model. Weights are fan-in scaled normals
    /// drawn from a generator seeded by `seed`.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let widths = &config.feature_channels;
        let stem_conv = Conv2d::new(1, widths[0], 3, 2, false, he(9), &mut rng);
        let stem = ConvBn {
            conv: stem_conv,
            bn: BatchNorm2d::new(widths[0]),
        };
        let mut blocks = Vec::new();
        let mut in_c = widths[0];
        for (stage, &count) in config.stage_blocks.iter().enumerate() {
            let out_c = widths[stage + 1];
            for b in 0..count {
                let stride = if b == 0 { 2 } else { 1 };
                let conv1 = Conv2d::new(in_c, out_c, 3, stride, false, he(in_c * 9), &mut rng);
                let conv2 = Conv2d::new(out_c, out_c, 3, 1, false, he(out_c * 9), &mut rng);
                let shortcut = (stride != 1 || in_c != out_c).then(|| ConvBn {
                    conv: Conv2d::new(in_c, out_c, 1, stride, false, he(in_c), &mut rng),
                    bn: BatchNorm2d::new(out_c),
                });
                blocks.push(ResBlock {
                    conv1,
                    bn1: BatchNorm2d::new(out_c),
                    conv2,
                    bn2: BatchNorm2d::new(out_c),
                    shortcut,
                });
                in_c = out_c;
            }
        }
        let hc = config.head_channels;
        let lecun = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let mut confidence = Conv2d::new(hc, 1, 1, 1, true, 0.01, &mut rng);
        confidence.bias.as_mut().unwrap().value[0] = S::of(config.confidence_bias());
        let head = Head {
            conv1: Conv2d::new(in_c, hc, 3, 1, true, lecun(in_c * 9), &mut rng),
            conv2: Conv2d::new(hc, hc, 3, 1, true, lecun(hc * 9), &mut rng),
            confidence,
            regression: Conv2d::new(hc, 2, 1, 1, true, 0.01, &mut rng),
        };
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn grid(&self) -> GridSpec {
        self.config.grid
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let s = self.config.input_size;
        if x.c != 1 || x.h != s || x.w != s {
            return Err(Error::Shape {
                expected: format!("[*, 1, {s}, {s}]"),
                got: format!("[{}, {}, {}, {}]", x.n, x.c, x.h, x.w),
            });
        }
        Ok(())
    }

    /// Evaluation-mode forward pass: running batch-norm statistics, no dropout.
    pub fn forward_raw(&self, x: &Tensor<S>) -> Result<RawOutput<S>> {
        self.check_input(x)?;
        let mut h = self.stem.bn.forward_eval(self.stem.conv.forward(x));
        relu_inplace(&mut h);
        for block in &self.blocks {
            let main = block.bn1.forward_eval(block.conv1.forward(&h));
            let mut main = main;
            relu_inplace(&mut main);
            let mut main = block.bn2.forward_eval(block.conv2.forward(&main));
            match &block.shortcut {
                Some(sc) => main.add_assign(&sc.bn.forward_eval(sc.conv.forward(&h))),
                None => main.add_assign(&h),
            }
            relu_inplace(&mut main);
            h = main;
        }
        let h1 = self.head.conv1.forward(&h);
        let h2 = self.head.conv2.forward(&h1);
        Ok(RawOutput {
            logits: self.head.confidence.forward(&h2),
            offsets: self.head.regression.forward(&h2),
        })
    }

    /// Training-mode forward pass: batch statistics, dropout, recorded tape.
    pub fn forward_train<R: Rng>(&mut self, x: &Tensor<S>, rng: &mut R) -> Result<(RawOutput<S>, Tape<S>)> {
        self.check_input(x)?;
        let rate = self.config.dropout_rate;

        let (mut h, bn) = self.stem.bn.forward_train(self.stem.conv.forward(x));
        relu_inplace(&mut h);
        let out = h.clone();
        let mask = dropout_train(&mut h, rate, rng);
        let stem = StemCache { bn, out, mask };

        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let input = h;
            let (mut a1, bn1) = block.bn1.forward_train(block.conv1.forward(&input));
            relu_inplace(&mut a1);
            let (mut sum, bn2) = block.bn2.forward_train(block.conv2.forward(&a1));
            let short_bn = match &mut block.shortcut {
                Some(sc) => {
                    let (s, cache) = sc.bn.forward_train(sc.conv.forward(&input));
                    sum.add_assign(&s);
                    Some(cache)
                }
                None => {
                    sum.add_assign(&input);
                    None
                }
            };
            relu_inplace(&mut sum);
            let mut out = sum.clone();
            let mask = dropout_train(&mut out, rate, rng);
            caches.push(BlockCache {
                input,
                bn1,
                a1,
                bn2,
                short_bn,
                sum,
                mask,
            });
            h = out;
        }

        let mut h1 = self.head.conv1.forward(&h);
        let mask1 = dropout_train(&mut h1, rate, rng);
        let mut h2 = self.head.conv2.forward(&h1);
        let mask2 = dropout_train(&mut h2, rate, rng);
        let raw = RawOutput {
            logits: self.head.confidence.forward(&h2),
            offsets: self.head.regression.forward(&h2),
        };
        let tape = Tape {
            input: x.clone(),
            stem,
            blocks: caches,
            head: HeadCache {
                features: h,
                h1,
                mask1,
                h2,
                mask2,
            },
        };
        Ok((raw, tape))
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to the confidence logits and the offsets.
    pub fn backward(&mut self, tape: Tape<S>, d_logits: &Tensor<S>, d_offsets: &Tensor<S>) {
        let Tape {
            input,
            stem,
            blocks,
            head,
        } = tape;

        let mut dh2 = self.head.confidence.backward(&head.h2, d_logits, true).unwrap();
        dh2.add_assign(&self.head.regression.backward(&head.h2, d_offsets, true).unwrap());
        dropout_backward(&head.mask2, &mut dh2);
        let mut dh1 = self.head.conv2.backward(&head.h1, &dh2, true).unwrap();
        dropout_backward(&head.mask1, &mut dh1);
        let mut d = self.head.conv1.backward(&head.features, &dh1, true).unwrap();

        for (block, cache) in self.blocks.iter_mut().zip(blocks).rev() {
            dropout_backward(&cache.mask, &mut d);
            relu_backward(&cache.sum, &mut d);
            let d_short = match (&mut block.shortcut, &cache.short_bn) {
                (Some(sc), Some(bn_cache)) => {
                    let g = sc.bn.backward(bn_cache, &d);
                    sc.conv.backward(&cache.input, &g, true).unwrap()
                }
                _ => d.clone(),
            };
            let g = block.bn2.backward(&cache.bn2, &d);
            let mut g = block.conv2.backward(&cache.a1, &g, true).unwrap();
            relu_backward(&cache.a1, &mut g);
            let g = block.bn1.backward(&cache.bn1, &g);
            let mut dx = block.conv1.backward(&cache.input, &g, true).unwrap();
            dx.add_assign(&d_short);
            d = dx;
        }

        dropout_backward(&stem.mask, &mut d);
        relu_backward(&stem.out, &mut d);
        let g = self.stem.bn.backward(&stem.bn, &d);
        self.stem.conv.backward(&input, &g, false);
    }

    /// Visits every trainable parameter with a stable dotted name.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        fn conv<S: Scalar>(prefix: &str, c: &mut Conv2d<S>, f: &mut dyn FnMut(&str, &mut Param<S>)) {
            f(&format!("{prefix}.weight"), &mut c.weight);
            if let Some(b) = &mut c.bias {
                f(&format!("{prefix}.bias"), b);
            }
        }
        fn bn<S: Scalar>(prefix: &str, b: &mut BatchNorm2d<S>, f: &mut dyn FnMut(&str, &mut Param<S>)) {
            f(&format!("{prefix}.gamma"), &mut b.gamma);
            f(&format!("{prefix}.beta"), &mut b.beta);
        }
        conv("stem.conv", &mut self.stem.conv, f);
        bn("stem.bn", &mut self.stem.bn, f);
        for (k, block) in self.blocks.iter_mut().enumerate() {
            conv(&format!("block{k}.conv1"), &mut block.conv1, f);
            bn(&format!("block{k}.bn1"), &mut block.bn1, f);
            conv(&format!("block{k}.conv2"), &mut block.conv2, f);
            bn(&format!("block{k}.bn2"), &mut block.bn2, f);
            if let Some(sc) = &mut block.shortcut {
                conv(&format!("block{k}.shortcut.conv"), &mut sc.conv, f);
                bn(&format!("block{k}.shortcut.bn"), &mut sc.bn, f);
            }
        }
        conv("head.conv1", &mut self.head.conv1, f);
        conv("head.conv2", &mut self.head.conv2, f);
        conv("head.confidence", &mut self.head.confidence, f);
        conv("head.regression", &mut self.head.regression, f);
    }

    /// Visits the batch-norm running statistics.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        fn bn<S: Scalar>(prefix: &str, b: &mut BatchNorm2d<S>, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
            f(&format!("{prefix}.running_mean"), &mut b.running_mean);
            f(&format!("{prefix}.running_var"), &mut b.running_var);
        }
        bn("stem.bn", &mut self.stem.bn, f);
        for (k, block) in self.blocks.iter_mut().enumerate() {
            bn(&format!("block{k}.bn1"), &mut block.bn1, f);
            bn(&format!("block{k}.bn2"), &mut block.bn2, f);
            if let Some(sc) = &mut block.shortcut {
                bn(&format!("block{k}.shortcut.bn"), &mut sc.bn, f);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    /// Number of convolutional layers in the base, counted from the built model.
    pub fn base_conv_layers(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    pub fn confidence_bias(&self) -> S {
        self.head.confidence.bias.as_ref().unwrap().value[0]
    }

    /// Stacks patches into an input batch.
    pub fn batch_input(&self, patches: &[&Image]) -> Result<Tensor<S>> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(patches.len() * s * s);
        for p in patches {
            if p.width() != s || p.height() != s {
                return Err(Error::Shape {
                    expected: format!("{s}x{s} patch"),
                    got: format!("{}x{}", p.width(), p.height()),
                });
            }
            data.extend(p.values().iter().map(|&v| S::of(v as f64)));
        }
        Ok(Tensor::from_vec(patches.len(), 1, s, s, data))
    }

    /// Evaluation-mode forward pass over a batch of patches.
    pub fn predict(&self, patches: &[&Image]) -> Result<Vec<NetOutput>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch_input(patches)?;
        let raw = self.forward_raw(&x)?;
        Ok(outputs_from_raw(&raw))
    }

    pub fn forward(&self, patch: &Image) -> Result<NetOutput> {
        Ok(self.predict(&[patch])?.remove(0))
    }
}

/// Converts raw tensors into per-patch outputs, squashing the confidence.
pub fn outputs_from_raw<S: Scalar>(raw: &RawOutput<S>) -> Vec<NetOutput> {
    let (m, n) = (raw.logits.h, raw.logits.w);
    let plane = m * n;
    (0..raw.logits.n)
        .map(|b| {
            let logits = raw.logits.sample(b);
            let offsets = raw.offsets.sample(b);
            let confidence = logits
                .iter()
                .map(|z| sigmoid(z.as_f64()).clamp(CONF_EPS, 1.0 - CONF_EPS) as f32)
                .collect();
            let mut regression = Vec::with_capacity(plane * 2);
            for k in 0..plane {
                regression.push(offsets[k].as_f64() as f32);
                regression.push(offsets[plane + k].as_f64() as f32);
            }
            NetOutput {
                grid_m: m,
                grid_n: n,
                confidence,
                regression,
            }
        })
        .collect()
}
