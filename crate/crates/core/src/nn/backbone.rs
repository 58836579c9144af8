use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, Conv2d, MaxPool2d, Module, Param};
use crate::error::{config_err, Result};
use crate::image::CHANNELS;
use crate::real::Real;
use crate::tensor::Tensor;

/// One stage of the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockConfig {
    /// Convolution followed by ReLU.
    Conv { channels: usize, kernel: usize, stride: usize },
    MaxPool { kernel: usize, stride: usize },
    /// Two 3x3 convolutions with an identity or projection shortcut.
    Basic { channels: usize, stride: usize },
    /// 1x1 -> 3x3 -> 1x1 with output `4 * width`.
    Bottleneck { width: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks: Vec<BlockConfig>,
}

impl Default for BackboneConfig {
    /// Four stride-2 conv stages ending at 128 channels.
    fn default() -> Self {
        Self::plain(&[16, 32, 64, 128])
    }
}

impl BackboneConfig {
    /// 3x3 stride-2 conv stages with the given widths.
    pub fn plain(widths: &[usize]) -> Self {
        Self { blocks: widths.iter().map(|&channels| BlockConfig::Conv { channels, kernel: 3, stride: 2 }).collect() }
    }

    /// ResNet-50 layout (stem, max-pool, bottleneck stages 3-4-6-3). Residual
    /// branches end in a zero-initialized convolution instead of batch norm.
    pub fn resnet50() -> Self {
        let mut blocks = vec![BlockConfig::Conv { channels: 64, kernel: 7, stride: 2 }, BlockConfig::MaxPool { kernel: 3, stride: 2 }];
        for (width, count, stride) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)] {
            for i in 0..count {
                blocks.push(BlockConfig::Bottleneck { width, stride: if i == 0 { stride } else { 1 } });
            }
        }
        Self { blocks }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(config_err!("backbone has no blocks"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let ok = match *b {
                BlockConfig::Conv { channels, kernel, stride } => channels > 0 && kernel > 0 && stride > 0,
                BlockConfig::MaxPool { kernel, stride } => kernel > 0 && stride > 0,
                BlockConfig::Basic { channels, stride } => channels > 0 && stride > 0,
                BlockConfig::Bottleneck { width, stride } => width > 0 && stride > 0,
            };
            if !ok {
                return Err(config_err!("backbone block {i} has a zero size"));
            }
        }
        if matches!(self.blocks[0], BlockConfig::MaxPool { .. }) {
            return Err(config_err!("backbone cannot start with pooling"));
        }
        Ok(())
    }

    /// Channels of the final feature map (the embedding dimension).
    pub fn out_channels(&self) -> usize {
        self.blocks.iter().fold(CHANNELS, |c, b| match *b {
            BlockConfig::Conv { channels, .. } | BlockConfig::Basic { channels, .. } => channels,
            BlockConfig::MaxPool { .. } => c,
            BlockConfig::Bottleneck { width, .. } => 4 * width,
        })
    }

    /// Spatial size of the final feature map for an input of `h x w`.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let shrink = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
        self.blocks.iter().fold((h, w), |(h, w), b| match *b {
            BlockConfig::Conv { kernel, stride, .. } | BlockConfig::MaxPool { kernel, stride } => {
                (shrink(h, kernel, stride), shrink(w, kernel, stride))
            }
            BlockConfig::Basic { stride, .. } | BlockConfig::Bottleneck { stride, .. } => (shrink(h, 3, stride), shrink(w, 3, stride)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Residual<T> {
    branch: Vec<Conv2d<T>>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Real> Residual<T> {
    fn new<R: Rng + ?Sized>(in_c: usize, shape: &[(usize, usize, usize)], out_c: usize, stride: usize, rng: &mut R) -> Self {
        let mut c = in_c;
        let last = shape.len() - 1;
        let branch = shape
            .iter()
            .enumerate()
            .map(|(i, &(out, k, s))| {
                let gain = if i == last { 0.0 } else { 1.0 };
                let conv = Conv2d::new(c, out, k, s, gain, rng);
                c = out;
                conv
            })
            .collect();
        let shortcut = (in_c != out_c || stride != 1).then(|| Conv2d::new(in_c, out_c, 1, stride, 1.0, rng));
        Self { branch, shortcut }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Block<T> {
    Conv(Conv2d<T>),
    MaxPool(MaxPool2d),
    Residual(Residual<T>),
}

/// Per-block state kept by a training forward pass beyond the block outputs.
#[derive(Debug, Clone)]
enum Extra<T> {
    None,
    Pool(Vec<usize>),
    /// Post-ReLU outputs of every branch conv except the last.
    Branch(Vec<Tensor<T>>),
}

/// Everything a backward pass needs: `activations[0]` is the input batch and
/// `activations[i + 1]` the output of block `i`.
#[derive(Debug, Clone)]
pub struct BackboneTrace<T> {
    activations: Vec<Tensor<T>>,
    extras: Vec<Extra<T>>,
    pooled: Tensor<T>,
}

impl<T: Real> BackboneTrace<T> {
    /// Pooled embeddings `[batch, E]`.
    pub fn embeddings(&self) -> &Tensor<T> {
        &self.pooled
    }

    /// Output of the final block, before pooling.
    pub fn feature_map(&self) -> &Tensor<T> {
        self.activations.last().expect("trace has input")
    }
}

/// Convolutional encoder `f`: image batch to embedding `h` by global average
/// pooling over the last block.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    blocks: Vec<Block<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut c = CHANNELS;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for b in &config.blocks {
            let block = match *b {
                BlockConfig::Conv { channels, kernel, stride } => {
                    let conv = Conv2d::new(c, channels, kernel, stride, 1.0, rng);
                    c = channels;
                    Block::Conv(conv)
                }
                BlockConfig::MaxPool { kernel, stride } => Block::MaxPool(MaxPool2d { kernel, stride }),
                BlockConfig::Basic { channels, stride } => {
                    let r = Residual::new(c, &[(channels, 3, stride), (channels, 3, 1)], channels, stride, rng);
                    c = channels;
                    Block::Residual(r)
                }
                BlockConfig::Bottleneck { width, stride } => {
                    let out = 4 * width;
                    let r = Residual::new(c, &[(width, 1, 1), (width, 3, stride), (out, 1, 1)], out, stride, rng);
                    c = out;
                    Block::Residual(r)
                }
            };
            blocks.push(block);
        }
        Ok(Self { config: config.clone(), blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    fn block_forward(block: &Block<T>, x: &Tensor<T>) -> (Tensor<T>, Extra<T>) {
        match block {
            Block::Conv(conv) => {
                let mut y = conv.forward(x);
                relu_inplace(&mut y);
                (y, Extra::None)
            }
            Block::MaxPool(pool) => {
                let (y, arg) = pool.forward(x);
                (y, Extra::Pool(arg))
            }
            Block::Residual(r) => {
                let last = r.branch.len() - 1;
                let mut inner = Vec::with_capacity(last);
                let mut z = r.branch[0].forward(x);
                for conv in &r.branch[1..] {
                    relu_inplace(&mut z);
                    let next = conv.forward(&z);
                    inner.push(z);
                    z = next;
                }
                match &r.shortcut {
                    Some(sc) => z.add_assign(&sc.forward(x)),
                    None => z.add_assign(x),
                }
                relu_inplace(&mut z);
                (z, Extra::Branch(inner))
            }
        }
    }

    /// Forward pass keeping every activation for [`Backbone::backward`].
    pub fn forward_trace(&self, x: Tensor<T>) -> BackboneTrace<T> {
        let mut activations = Vec::with_capacity(self.blocks.len() + 1);
        let mut extras = Vec::with_capacity(self.blocks.len());
        activations.push(x);
        for block in &self.blocks {
            let (y, extra) = Self::block_forward(block, activations.last().expect("input"));
            activations.push(y);
            extras.push(extra);
        }
        let pooled = global_avg_pool(activations.last().expect("output"));
        BackboneTrace { activations, extras, pooled }
    }

    /// Final-block feature map without retaining intermediates.
    pub fn feature_map(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = Self::block_forward(&self.blocks[0], x).0;
        for block in &self.blocks[1..] {
            cur = Self::block_forward(block, &cur).0;
        }
        cur
    }

    /// Embeddings `[batch, E]` without retaining intermediates.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        global_avg_pool(&self.feature_map(x))
    }

    /// Accumulates parameter gradients given `d loss / d h` for the traced batch.
    pub fn backward(&mut self, trace: &BackboneTrace<T>, grad_h: &Tensor<T>) {
        let out = trace.activations.last().expect("output");
        let mut grad = global_avg_pool_backward(out.shape(), grad_h);
        for i in (0..self.blocks.len()).rev() {
            let input = &trace.activations[i];
            let output = &trace.activations[i + 1];
            let need_input = i > 0;
            grad = match (&mut self.blocks[i], &trace.extras[i]) {
                (Block::Conv(conv), _) => {
                    relu_backward_inplace(&mut grad, output);
                    match conv.backward(input, &grad, need_input) {
                        Some(g) => g,
                        None => break,
                    }
                }
                (Block::MaxPool(pool), Extra::Pool(arg)) => pool.backward(input.shape(), arg, &grad),
                (Block::Residual(r), Extra::Branch(inner)) => {
                    relu_backward_inplace(&mut grad, output);
                    let mut g_branch = grad.clone();
                    for j in (0..r.branch.len()).rev() {
                        let conv_in = if j == 0 { input } else { &inner[j - 1] };
                        let need = j > 0 || need_input;
                        match r.branch[j].backward(conv_in, &g_branch, need) {
                            Some(mut g) => {
                                if j > 0 {
                                    relu_backward_inplace(&mut g, &inner[j - 1]);
                                }
                                g_branch = g;
                            }
                            None => break,
                        }
                    }
                    let g_short = match &mut r.shortcut {
                        Some(sc) => sc.backward(input, &grad, need_input),
                        None => Some(grad),
                    };
                    if !need_input {
                        break;
                    }
                    let mut g = g_branch;
                    g.add_assign(&g_short.expect("input gradient requested"));
                    g
                }
                _ => unreachable!("trace does not match backbone"),
            };
        }
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let p = super::join(prefix, &format!("{i}"));
            match block {
                Block::Conv(c) => c.visit(&p, f),
                Block::MaxPool(_) => {}
                Block::Residual(r) => {
                    for (j, c) in r.branch.iter().enumerate() {
                        c.visit(&super::join(&p, &format!("branch.{j}")), f);
                    }
                    if let Some(sc) = &r.shortcut {
                        sc.visit(&super::join(&p, "shortcut"), f);
                    }
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = super::join(prefix, &format!("{i}"));
            match block {
                Block::Conv(c) => c.visit_mut(&p, f),
                Block::MaxPool(_) => {}
                Block::Residual(r) => {
                    for (j, c) in r.branch.iter_mut().enumerate() {
                        c.visit_mut(&super::join(&p, &format!("branch.{j}")), f);
                    }
                    if let Some(sc) = &mut r.shortcut {
                        sc.visit_mut(&super::join(&p, "shortcut"), f);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn randomize(b: &mut Backbone<f64>, seed: u64) {
        let mut r = stream(seed);
        b.visit_mut("", &mut |_, p| p.value.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5)));
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = stream(seed);
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| r.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn default_backbone_shapes() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.out_channels(), 128);
        assert_eq!(cfg.out_size(64, 64), (4, 4));
        let b = Backbone::<f32>::new(&cfg, &mut stream(0)).unwrap();
        let x = Tensor::zeros(&[3, 3, 64, 64]);
        assert_eq!(b.forward(&x).shape(), &[3, 128]);
        assert_eq!(b.feature_map(&x).shape(), &[3, 128, 4, 4]);
    }

    #[test]
    fn resnet50_layout() {
        let cfg = BackboneConfig::resnet50();
        assert_eq!(cfg.out_channels(), 2048);
        assert_eq!(cfg.out_size(224, 224), (7, 7));
        let convs = cfg.blocks.iter().filter(|b| matches!(b, BlockConfig::Bottleneck { .. })).count() * 3 + 1;
        assert_eq!(convs + 1, 50, "49 convolutions plus the head");
    }

    #[test]
    fn residual_backward_matches_finite_differences() {
        let cfg = BackboneConfig {
            blocks: vec![
                BlockConfig::Conv { channels: 4, kernel: 3, stride: 1 },
                BlockConfig::MaxPool { kernel: 3, stride: 2 },
                BlockConfig::Basic { channels: 4, stride: 1 },
                BlockConfig::Bottleneck { width: 2, stride: 2 },
            ],
        };
        let mut b = Backbone::<f64>::new(&cfg, &mut stream(1)).unwrap();
        randomize(&mut b, 2);
        let x = input(&[2, 3, 7, 7], 3);
        let w: Vec<f64> = (0..2 * 8).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let wt = Tensor::from_vec(&[2, 8], w.clone());
        let loss = |b: &Backbone<f64>| -> f64 { b.forward(&x).data().iter().zip(&w).map(|(a, c)| a * c).sum() };
        b.zero_grad();
        let trace = b.forward_trace(x.clone());
        b.backward(&trace, &wt);
        let mut analytic = Vec::new();
        b.visit("", &mut |_, p| analytic.extend_from_slice(&p.grad));
        let eps = 1e-6;
        let mut numeric = Vec::new();
        let n = b.param_count();
        for idx in 0..n {
            let bump = |b: &mut Backbone<f64>, d: f64| {
                let mut k = 0;
                b.visit_mut("", &mut |_, p| {
                    for v in p.value.iter_mut() {
                        if k == idx {
                            *v += d;
                        }
                        k += 1;
                    }
                });
            };
            bump(&mut b, eps);
            let lp = loss(&b);
            bump(&mut b, -2.0 * eps);
            let lm = loss(&b);
            bump(&mut b, eps);
            numeric.push((lp - lm) / (2.0 * eps));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }
}
