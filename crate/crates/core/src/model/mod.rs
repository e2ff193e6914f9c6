//! Shared convolutional backbone with one tap point per block, a main
//! regression head on the last block, and per-task, per-tap classification
//! heads mixed by softmax task descriptors.
//!
//! The `M` input frames are stacked as channels. Every block is a 3x3,
//! stride-2 convolution followed by the activation; its output is globally
//! average-pooled to give that tap's feature vector. The main head reads the
//! last tap only, so the parameters shared with a branch at tap `i` are
//! exactly blocks `0..=i`.
//!
//! All network parameters live in one flat vector: backbone blocks, then the
//! main head (together, the shared parameters), then the branch heads (the
//! task-specific parameters). Descriptor logits are held separately.

pub mod conv;
pub mod descriptor;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use conv::Activation;
use conv::ConvShape;
pub use descriptor::{descriptor_weights, finalize_branches, TaskDescriptor};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frames per input window (`M`).
    pub seq_len: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Output channels of each block; one tap point per block.
    pub channels: Vec<usize>,
    pub activation: Activation,
    /// Width of the main head's hidden layer; 0 for a single affine map.
    pub main_hidden: usize,
    /// Class count of each auxiliary task; empty for a main-task-only model.
    pub aux_classes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 8,
            frame_height: 64,
            frame_width: 64,
            channels: vec![12, 16, 24, 32],
            activation: Activation::Silu,
            main_hidden: 32,
            aux_classes: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn n_taps(&self) -> usize {
        self.channels.len()
    }

    pub fn n_outputs(&self) -> usize {
        6 * (self.seq_len - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::InvalidParameter(format!(
                "sequence length must be >= 2, got {}",
                self.seq_len
            )));
        }
        if self.frame_height == 0 || self.frame_width == 0 {
            return Err(Error::InvalidParameter("empty frame size".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "need at least one block with positive width, got {:?}",
                self.channels
            )));
        }
        if self.aux_classes.iter().any(|&n| n < 2) {
            return Err(Error::InvalidParameter(format!(
                "auxiliary tasks need >= 2 classes, got {:?}",
                self.aux_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: Range<usize>,
    b: Range<usize>,
    n_in: usize,
}

impl Dense {
    fn at(offset: &mut usize, n_in: usize, n_out: usize) -> Dense {
        let w = *offset..*offset + n_in * n_out;
        let b = w.end..w.end + n_out;
        *offset = b.end;
        Dense { w, b, n_in }
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.w.clone()];
        params[self.b.clone()]
            .iter()
            .enumerate()
            .map(|(o, b)| b + w[o * self.n_in..(o + 1) * self.n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, params: &[f64], x: &[f64], g: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = &params[self.w.clone()];
        let mut gx = vec![0.0; self.n_in];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad[self.b.start + o] += go;
            let gw = &mut grad[self.w.start + o * self.n_in..self.w.start + (o + 1) * self.n_in];
            let wrow = &w[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                gw[i] += go * x[i];
                gx[i] += go * wrow[i];
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
struct Block {
    shape: ConvShape,
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<Block>,
    main: Vec<Dense>,
    /// `[task][tap]`
    heads: Vec<Vec<Dense>>,
    aux_start: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Layout {
        let mut off = 0;
        let (mut h, mut w, mut c_in) = (c.frame_height, c.frame_width, c.seq_len);
        let blocks = c
            .channels
            .iter()
            .map(|&c_out| {
                let shape = ConvShape { c_in, c_out, h_in: h, w_in: w };
                let wr = off..off + shape.weight_len();
                let br = wr.end..wr.end + c_out;
                off = br.end;
                h = shape.h_out();
                w = shape.w_out();
                c_in = c_out;
                Block { shape, w: wr, b: br }
            })
            .collect();
        let last = *c.channels.last().unwrap();
        let main = if c.main_hidden > 0 {
            vec![
                Dense::at(&mut off, last, c.main_hidden),
                Dense::at(&mut off, c.main_hidden, c.n_outputs()),
            ]
        } else {
            vec![Dense::at(&mut off, last, c.n_outputs())]
        };
        let aux_start = off;
        let heads = c
            .aux_classes
            .iter()
            .map(|&n| c.channels.iter().map(|&ch| Dense::at(&mut off, ch, n)).collect())
            .collect();
        Layout { blocks, main, heads, aux_start, total: off }
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `6 (M - 1)` transform parameters, pair-major.
    pub main: Vec<f64>,
    /// `[task][tap][class]` per-branch class probabilities.
    pub branch_probs: Vec<Vec<Vec<f64>>>,
    /// `[task][tap]` location weights used for mixing.
    pub z: Vec<Vec<f64>>,
    /// `[task][class]` mixed class probabilities.
    pub mixed: Vec<Vec<f64>>,
}

impl ModelOutput {
    pub fn relative_poses(&self) -> Result<Vec<RigidTransform>> {
        self.main.chunks(6).map(RigidTransform::from_params).collect()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub output: ModelOutput,
}

/// Gradients for the flat parameter vector and the descriptor logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Gradients {
            params: vec![0.0; model.params.len()],
            alpha: model.descriptors.iter().map(|d| vec![0.0; d.alpha.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.params.iter_mut().for_each(|g| *g *= s);
        self.alpha.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub descriptors: Vec<TaskDescriptor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: Range<usize>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[range] {
                *p = normal.sample(&mut rng);
            }
        };
        for b in &layout.blocks {
            fill(b.w.clone(), (2.0 / (b.shape.c_in * 9) as f64).sqrt());
        }
        let n_main = layout.main.len();
        for (k, d) in layout.main.iter().enumerate() {
            let gain = if k + 1 == n_main { 0.1 } else { 1.0 };
            fill(d.w.clone(), gain * (1.0 / d.n_in as f64).sqrt());
        }
        for d in layout.heads.iter().flatten() {
            fill(d.w.clone(), (1.0 / d.n_in as f64).sqrt());
        }
        let descriptors = config
            .aux_classes
            .iter()
            .map(|_| TaskDescriptor::uniform(config.n_taps()))
            .collect();
        Ok(Model { config, params, descriptors })
    }

    pub fn n_taps(&self) -> usize {
        self.config.n_taps()
    }

    pub fn n_tasks(&self) -> usize {
        self.config.aux_classes.len()
    }

    /// Index where task-specific (branch head) parameters begin.
    pub fn aux_param_start(&self) -> usize {
        Layout::new(&self.config).aux_start
    }

    /// Parameter ranges of every block, in order; used to probe the
    /// shared-prefix structure.
    pub fn block_param_ranges(&self) -> Vec<Range<usize>> {
        Layout::new(&self.config)
            .blocks
            .iter()
            .map(|b| b.w.start..b.b.end)
            .collect()
    }

    pub fn main_head_param_range(&self) -> Range<usize> {
        let l = Layout::new(&self.config);
        l.main.first().unwrap().w.start..l.main.last().unwrap().b.end
    }

    pub fn branch_param_range(&self, task: usize, tap: usize) -> Range<usize> {
        let d = &Layout::new(&self.config).heads[task][tap];
        d.w.start..d.b.end
    }

    pub fn z(&self) -> Vec<Vec<f64>> {
        self.descriptors.iter().map(TaskDescriptor::weights).collect()
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.descriptors.iter().map(|d| d.alpha.clone()).collect()
    }

    /// Freezes every descriptor to its argmax branch.
    pub fn finalize_branches(&mut self) -> Vec<usize> {
        self.descriptors.iter_mut().map(TaskDescriptor::finalize).collect()
    }

    fn pack_input(&self, frames: &[Vec<f32>]) -> Result<Vec<f64>> {
        let c = &self.config;
        if frames.len() != c.seq_len {
            return Err(Error::InvalidInput(format!(
                "model takes {} frames, got {}",
                c.seq_len,
                frames.len()
            )));
        }
        let px = c.frame_height * c.frame_width;
        let mut x = Vec::with_capacity(c.seq_len * px);
        for f in frames {
            if f.len() != px {
                return Err(Error::InvalidInput(format!(
                    "frame has {} pixels, model expects {}x{}",
                    f.len(),
                    c.frame_height,
                    c.frame_width
                )));
            }
            x.extend(f.iter().map(|&v| v as f64));
        }
        Ok(x)
    }

    pub fn forward(&self, frames: &[Vec<f32>]) -> Result<ModelOutput> {
        Ok(self.forward_cached(frames, true)?.output)
    }

    pub fn forward_cached(&self, frames: &[Vec<f32>], with_heads: bool) -> Result<ForwardCache> {
        let input = self.pack_input(frames)?;
        let layout = Layout::new(&self.config);
        let act = self.config.activation;
        let p = &self.params;

        let mut pre = Vec::with_capacity(layout.blocks.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layout.blocks.len());
        let mut pooled = Vec::with_capacity(layout.blocks.len());
        for (k, b) in layout.blocks.iter().enumerate() {
            let x = if k == 0 { &input } else { &post[k - 1] };
            let mut out = vec![0.0; b.shape.out_len()];
            conv::forward(&b.shape, x, &p[b.w.clone()], &p[b.b.clone()], &mut out);
            let y: Vec<f64> = out.iter().map(|&v| act.apply(v)).collect();
            let plane = b.shape.h_out() * b.shape.w_out();
            pooled.push(y.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect::<Vec<_>>());
            pre.push(out);
            post.push(y);
        }

        let last = pooled.last().unwrap();
        let (hidden_pre, hidden, main) = if layout.main.len() == 2 {
            let hp = layout.main[0].forward(p, last);
            let h: Vec<f64> = hp.iter().map(|&v| act.apply(v)).collect();
            let y = layout.main[1].forward(p, &h);
            (hp, h, y)
        } else {
            (Vec::new(), Vec::new(), layout.main[0].forward(p, last))
        };

        let (mut branch_probs, mut zs, mut mixed) = (Vec::new(), Vec::new(), Vec::new());
        if with_heads {
            for (heads, desc) in layout.heads.iter().zip(&self.descriptors) {
                let probs: Vec<Vec<f64>> = heads
                    .iter()
                    .zip(&pooled)
                    .map(|(d, f)| descriptor::softmax(&d.forward(p, f)))
                    .collect();
                let z = desc.weights();
                mixed.push(descriptor::mix(&probs, &z));
                branch_probs.push(probs);
                zs.push(z);
            }
        }

        Ok(ForwardCache {
            input,
            pre,
            post,
            pooled,
            hidden_pre,
            hidden,
            output: ModelOutput { main, branch_probs, z: zs, mixed },
        })
    }

    /// Backpropagates loss gradients with respect to the main output and the
    /// mixed auxiliary predictions, accumulating into `grad`. Descriptor
    /// gradients are left at zero for tasks frozen to a single branch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_main: &[f64],
        grad_mixed: &[Vec<f64>],
        grad: &mut Gradients,
    ) {
        let layout = Layout::new(&self.config);
        let act = self.config.activation;
        let p = &self.params;
        let n_blocks = layout.blocks.len();
        let mut grad_pooled: Vec<Vec<f64>> = cache.pooled.iter().map(|f| vec![0.0; f.len()]).collect();

        let g_last = if layout.main.len() == 2 {
            let gh = layout.main[1].backward(p, &cache.hidden, grad_main, &mut grad.params);
            let ghp: Vec<f64> = gh
                .iter()
                .zip(&cache.hidden_pre)
                .map(|(g, &x)| g * act.derivative(x))
                .collect();
            layout.main[0].backward(p, &cache.pooled[n_blocks - 1], &ghp, &mut grad.params)
        } else {
            layout.main[0].backward(p, &cache.pooled[n_blocks - 1], grad_main, &mut grad.params)
        };
        add_into(&mut grad_pooled[n_blocks - 1], &g_last);

        let out = &cache.output;
        for (task, g_mix) in grad_mixed.iter().enumerate() {
            if out.branch_probs.is_empty() {
                break;
            }
            let probs = &out.branch_probs[task];
            let z = &out.z[task];
            if self.descriptors[task].fixed.is_none() {
                let ga = descriptor::alpha_gradient(z, probs, g_mix);
                add_into(&mut grad.alpha[task], &ga);
            }
            for (tap, head) in layout.heads[task].iter().enumerate() {
                if z[tap] == 0.0 {
                    continue;
                }
                let gp: Vec<f64> = g_mix.iter().map(|g| g * z[tap]).collect();
                let gl = descriptor::softmax_backward(&probs[tap], &gp);
                let gf = head.backward(p, &cache.pooled[tap], &gl, &mut grad.params);
                add_into(&mut grad_pooled[tap], &gf);
            }
        }

        let mut grad_post: Option<Vec<f64>> = None;
        for k in (0..n_blocks).rev() {
            let b = &layout.blocks[k];
            let plane = b.shape.h_out() * b.shape.w_out();
            let mut g = grad_post.take().unwrap_or_else(|| vec![0.0; b.shape.out_len()]);
            for (c, gp) in grad_pooled[k].iter().enumerate() {
                let share = gp / plane as f64;
                if share != 0.0 {
                    g[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += share);
                }
            }
            for (gv, &x) in g.iter_mut().zip(&cache.pre[k]) {
                *gv *= act.derivative(x);
            }
            let x = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            let (gw, rest) = grad.params[b.w.start..b.b.end].split_at_mut(b.w.len());
            if k > 0 {
                let mut gin = vec![0.0; cache.post[k - 1].len()];
                conv::backward(&b.shape, x, &p[b.w.clone()], &g, gw, rest, Some(&mut gin));
                grad_post = Some(gin);
            } else {
                conv::backward(&b.shape, x, &p[b.w.clone()], &g, gw, rest, None);
            }
        }
    }

    /// Relative transforms for one window, main head only.
    pub fn predict_relative_poses(&self, frames: &[Vec<f32>]) -> Result<Vec<RigidTransform>> {
        self.forward_cached(frames, false)?.output.relative_poses()
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
