//! Frame-level network: convolutional backbone, a penultimate feature layer and two
//! linear heads (7 expression logits, 2×B valence/arousal bin logits).

use serde::{Deserialize, Serialize};

use super::nn::{self, Allocator, Conv, Linear, Shape};
use super::{ModelParams, Role};
use crate::datakit::Image;
use crate::error::{ensure, Result};
use crate::losses::{FrameModelOutput, OutputGrad, NUM_EXPR_CLASSES, VA_DIMS};
use crate::par;
use crate::seed::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Four conv+pool blocks with `base × [1, 2, 4, 4]` channels, flattened.
    ToyConv,
    /// Bottleneck residual stages `[3, 4, 6, 3]` without normalisation layers.
    Resnet50Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameModelSpec {
    pub backbone: Backbone,
    pub feature_dim: usize,
    pub num_bins: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub base_channels: usize,
}

impl Default for FrameModelSpec {
    fn default() -> Self {
        FrameModelSpec {
            backbone: Backbone::ToyConv,
            feature_dim: 32,
            num_bins: 20,
            image_height: 32,
            image_width: 32,
            base_channels: 4,
        }
    }
}

impl FrameModelSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.feature_dim >= 1, "feature_dim must be positive");
        ensure!(self.num_bins >= 2, "num_bins must be at least 2, got {}", self.num_bins);
        ensure!(self.base_channels >= 1, "base_channels must be positive");
        let (h, w) = (self.image_height, self.image_width);
        ensure!(
            h >= 16 && w >= 16 && h % 16 == 0 && w % 16 == 0,
            "{:?} backbone needs image sides that are positive multiples of 16, got {h}x{w}",
            self.backbone
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv,
    spatial: Conv,
    expand: Conv,
    project: Option<Conv>,
}

#[derive(Clone, Debug)]
enum Block {
    ConvRelu(Conv),
    Pool,
    Bottleneck(Bottleneck),
}

enum Cache {
    ConvRelu { x: Vec<f32>, y: Vec<f32> },
    Pool { arg: Vec<u32>, len: usize },
    Bottleneck { x: Vec<f32>, h1: Vec<f32>, h2: Vec<f32>, out: Vec<f32> },
}

/// Activations kept from a training forward pass.
pub struct FrameTape {
    caches: Vec<Cache>,
    neck: Vec<f32>,
    features: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct FrameModel {
    pub spec: FrameModelSpec,
    pub params: ModelParams,
    blocks: Vec<Block>,
    /// Input shape of every block, plus the final backbone shape.
    shapes: Vec<Shape>,
    global_pool: bool,
    fc: Linear,
    expr_head: Linear,
    va_head: Linear,
}

pub fn build_frame_model(spec: &FrameModelSpec, seed: u64) -> Result<FrameModel> {
    FrameModel::new(spec, seed, Role::Teacher)
}

pub fn frame_forward(model: &FrameModel, images: &[Image]) -> Result<(Vec<FrameModelOutput>, Vec<Vec<f32>>)> {
    let refs: Vec<&Image> = images.iter().collect();
    model.forward(&refs)
}

impl FrameModel {
    pub fn new(spec: &FrameModelSpec, seed: u64, role: Role) -> Result<Self> {
        spec.validate()?;
        let mut alloc = Allocator::default();
        let mut blocks = Vec::new();
        let mut shape = Shape { c: 1, h: spec.image_height, w: spec.image_width };
        let mut shapes = vec![shape];
        let mut push = |b: Block, shape: &mut Shape, shapes: &mut Vec<Shape>| {
            match &b {
                Block::ConvRelu(c) => shape.c = c.cout,
                Block::Pool => {
                    shape.h /= 2;
                    shape.w /= 2;
                }
                Block::Bottleneck(b) => shape.c = b.expand.cout,
            }
            blocks.push(b);
            shapes.push(*shape);
        };
        let b = spec.base_channels;
        let global_pool = match spec.backbone {
            Backbone::ToyConv => {
                for mult in [1, 2, 4, 4] {
                    let conv = Conv::new(&mut alloc, shape.c, b * mult, 3);
                    push(Block::ConvRelu(conv), &mut shape, &mut shapes);
                    push(Block::Pool, &mut shape, &mut shapes);
                }
                false
            }
            Backbone::Resnet50Style => {
                let stem = Conv::new(&mut alloc, 1, 4 * b, 3);
                push(Block::ConvRelu(stem), &mut shape, &mut shapes);
                push(Block::Pool, &mut shape, &mut shapes);
                for (stage, depth) in [3usize, 4, 6, 3].into_iter().enumerate() {
                    let mid = b << stage;
                    for _ in 0..depth {
                        let cin = shape.c;
                        let bn = Bottleneck {
                            reduce: Conv::new(&mut alloc, cin, mid, 1),
                            spatial: Conv::new(&mut alloc, mid, mid, 3),
                            expand: Conv::new(&mut alloc, mid, 4 * mid, 1),
                            project: (cin != 4 * mid).then(|| Conv::new(&mut alloc, cin, 4 * mid, 1)),
                        };
                        push(Block::Bottleneck(bn), &mut shape, &mut shapes);
                    }
                    if stage < 3 {
                        push(Block::Pool, &mut shape, &mut shapes);
                    }
                }
                true
            }
        };
        let neck_dim = if global_pool { shape.c } else { shape.numel() };
        let fc = Linear::new(&mut alloc, neck_dim, spec.feature_dim);
        let expr_head = Linear::new(&mut alloc, spec.feature_dim, NUM_EXPR_CLASSES);
        let va_head = Linear::new(&mut alloc, spec.feature_dim, VA_DIMS * spec.num_bins);

        let mut values = vec![0.0f32; alloc.len];
        let mut rng = SeedStream::new(seed).child("frame-init").rng();
        for block in &blocks {
            match block {
                Block::ConvRelu(c) => c.init(&mut values, 1.0, &mut rng),
                Block::Pool => {}
                Block::Bottleneck(bn) => {
                    bn.reduce.init(&mut values, 1.0, &mut rng);
                    bn.spatial.init(&mut values, 1.0, &mut rng);
                    // Small residual branches keep the unnormalised stack stable.
                    bn.expand.init(&mut values, 0.1, &mut rng);
                    if let Some(p) = &bn.project {
                        p.init(&mut values, 1.0, &mut rng);
                    }
                }
            }
        }
        fc.init(&mut values, (2.0 / neck_dim as f64).sqrt(), &mut rng);
        let head_std = (1.0 / spec.feature_dim as f64).sqrt();
        expr_head.init(&mut values, head_std, &mut rng);
        va_head.init(&mut values, head_std, &mut rng);

        Ok(FrameModel {
            spec: spec.clone(),
            params: ModelParams { role, values },
            blocks,
            shapes,
            global_pool,
            fc,
            expr_head,
            va_head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.values.len()
    }

    pub fn expr_head_range(&self) -> std::ops::Range<usize> {
        self.expr_head.param_range()
    }

    pub fn va_head_range(&self) -> std::ops::Range<usize> {
        self.va_head.param_range()
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        ensure!(
            img.height == self.spec.image_height && img.width == self.spec.image_width && img.pixels.len() == img.height * img.width,
            "image is {}x{}, model expects {}x{}",
            img.height,
            img.width,
            self.spec.image_height,
            self.spec.image_width
        );
        Ok(())
    }

    fn forward_one(&self, img: &Image, keep: bool) -> (FrameModelOutput, Vec<f32>, Option<FrameTape>) {
        let p = &self.params.values;
        let mut x: Vec<f32> = img.pixels.iter().map(|v| v - 0.5).collect();
        let mut caches = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for (block, s) in self.blocks.iter().zip(&self.shapes) {
            match block {
                Block::ConvRelu(c) => {
                    let y = nn::relu(&c.forward(p, &x, s.h, s.w));
                    if keep {
                        caches.push(Cache::ConvRelu { x: std::mem::take(&mut x), y: y.clone() });
                    }
                    x = y;
                }
                Block::Pool => {
                    let (y, arg) = nn::maxpool2(&x, *s);
                    if keep {
                        caches.push(Cache::Pool { arg, len: x.len() });
                    }
                    x = y;
                }
                Block::Bottleneck(bn) => {
                    let h1 = nn::relu(&bn.reduce.forward(p, &x, s.h, s.w));
                    let h2 = nn::relu(&bn.spatial.forward(p, &h1, s.h, s.w));
                    let mut sum = bn.expand.forward(p, &h2, s.h, s.w);
                    match &bn.project {
                        Some(pr) => sum.iter_mut().zip(pr.forward(p, &x, s.h, s.w)).for_each(|(a, b)| *a += b),
                        None => sum.iter_mut().zip(&x).for_each(|(a, b)| *a += b),
                    }
                    let out = nn::relu(&sum);
                    if keep {
                        caches.push(Cache::Bottleneck { x: std::mem::take(&mut x), h1, h2, out: out.clone() });
                    }
                    x = out;
                }
            }
        }
        let last = *self.shapes.last().expect("at least one shape");
        let neck = if self.global_pool { nn::global_avg_pool(&x, last) } else { x };
        let features = nn::relu(&self.fc.forward(p, &neck));
        let expr = self.expr_head.forward(p, &features);
        let va = self.va_head.forward(p, &features);
        let out = FrameModelOutput {
            expr_logits: expr.iter().map(|v| *v as f64).collect(),
            va_logits: va.iter().map(|v| *v as f64).collect(),
        };
        let tape = keep.then(|| FrameTape { caches, neck, features: features.clone() });
        (out, features, tape)
    }

    /// Evaluation-mode forward pass: outputs and penultimate features, input order kept.
    pub fn forward(&self, images: &[&Image]) -> Result<(Vec<FrameModelOutput>, Vec<Vec<f32>>)> {
        images.iter().try_for_each(|i| self.check_image(i))?;
        let res = par::map(images, |img| {
            let (o, f, _) = self.forward_one(img, false);
            (o, f)
        });
        Ok(res.into_iter().unzip())
    }

    pub fn forward_train(&self, images: &[&Image]) -> Result<(Vec<FrameModelOutput>, Vec<FrameTape>)> {
        images.iter().try_for_each(|i| self.check_image(i))?;
        let res = par::map(images, |img| {
            let (o, _, t) = self.forward_one(img, true);
            (o, t.expect("tape requested"))
        });
        Ok(res.into_iter().unzip())
    }

    fn backward_one(&self, tape: &FrameTape, grad: &OutputGrad) -> Vec<f32> {
        let p = &self.params.values;
        let mut g = vec![0.0f32; p.len()];
        let ge: Vec<f32> = grad.expr_logits.iter().map(|v| *v as f32).collect();
        let gv: Vec<f32> = grad.va_logits.iter().map(|v| *v as f32).collect();
        let mut dfeat = self.expr_head.backward(p, &tape.features, &ge, &mut g);
        let dva = self.va_head.backward(p, &tape.features, &gv, &mut g);
        dfeat.iter_mut().zip(dva).for_each(|(a, b)| *a += b);
        let dfc = nn::relu_backward(&tape.features, &dfeat);
        let dneck = self.fc.backward(p, &tape.neck, &dfc, &mut g);
        let last = *self.shapes.last().expect("at least one shape");
        let mut dx = if self.global_pool { nn::global_avg_pool_backward(&dneck, last) } else { dneck };
        for ((block, cache), s) in self.blocks.iter().zip(&tape.caches).zip(&self.shapes).rev() {
            dx = match (block, cache) {
                (Block::ConvRelu(c), Cache::ConvRelu { x, y }) => {
                    let dpre = nn::relu_backward(y, &dx);
                    c.backward(p, x, &dpre, s.h, s.w, &mut g)
                }
                (Block::Pool, Cache::Pool { arg, len }) => nn::maxpool2_backward(arg, &dx, *len),
                (Block::Bottleneck(bn), Cache::Bottleneck { x, h1, h2, out }) => {
                    let dsum = nn::relu_backward(out, &dx);
                    let dh2 = nn::relu_backward(h2, &bn.expand.backward(p, h2, &dsum, s.h, s.w, &mut g));
                    let dh1 = nn::relu_backward(h1, &bn.spatial.backward(p, h1, &dh2, s.h, s.w, &mut g));
                    let mut dxin = bn.reduce.backward(p, x, &dh1, s.h, s.w, &mut g);
                    match &bn.project {
                        Some(pr) => {
                            let ds = pr.backward(p, x, &dsum, s.h, s.w, &mut g);
                            dxin.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
                        }
                        None => dxin.iter_mut().zip(&dsum).for_each(|(a, b)| *a += b),
                    }
                    dxin
                }
                _ => unreachable!("cache layout follows block layout"),
            };
        }
        g
    }

    /// Parameter gradient of a loss whose gradients w.r.t. each output are `grads`.
    pub fn backward(&self, tapes: &[FrameTape], grads: &[OutputGrad]) -> Result<Vec<f32>> {
        ensure!(tapes.len() == grads.len(), "{} tapes but {} gradients", tapes.len(), grads.len());
        let pairs: Vec<(&FrameTape, &OutputGrad)> = tapes.iter().zip(grads).collect();
        let parts = par::map(&pairs, |(t, g)| self.backward_one(t, g));
        Ok(par::sum_ordered(&parts, self.num_params()))
    }
}
