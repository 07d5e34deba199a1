//! Appearance-conditioned pose rendering.
//!
//! The generator encodes the source image and the stacked source/target
//! heatmaps in two parallel branches. At every resolution the image
//! features are gated by the sigmoid of the pose features and passed to the
//! decoder. A patch discriminator judges `(source, candidate)` image pairs.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tips_tensor::nn::{instance_norm, BatchNorm, Conv2d, ConvTranspose2d, InitScheme, ParamId, ParamStore, ResBlock};
use tips_tensor::optim::{Adam, AdamConfig};
use tips_tensor::{backward, no_grad, Tensor, BELOW_ONE};

use crate::checkpoint::{Checkpoint, STAGE_RENDER};
use crate::error::{Error, Result};
use crate::image_io::{stack_images, Image};
use crate::pose::{render_heatmaps, HeatmapSpec, KeypointSet, NUM_JOINTS};
use crate::seed::rng_for;

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GSConfig {
    pub image_size: usize,
    pub levels: usize,
    pub base_filters: usize,
    pub residual_tail: usize,
}

impl Default for GSConfig {
    fn default() -> Self {
        GSConfig { image_size: 256, levels: 4, base_filters: 64, residual_tail: 4 }
    }
}

impl GSConfig {
    /// 64-pixel images with 16 stem filters, small enough for CPU training.
    pub fn desk() -> Self {
        GSConfig { image_size: 64, levels: 4, base_filters: 16, residual_tail: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DSConfig {
    pub stage_filters: Vec<usize>,
}

impl Default for DSConfig {
    fn default() -> Self {
        DSConfig { stage_filters: vec![64, 128, 256, 512] }
    }
}

impl DSConfig {
    /// Two strided stages, giving 15 x 15 patch scores on 64-pixel images.
    pub fn desk() -> Self {
        DSConfig { stage_filters: vec![32, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderTrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub perceptual_taps: Vec<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RenderTrainConfig {
    fn default() -> Self {
        RenderTrainConfig {
            lambda1: 5.0,
            lambda2: 1.0,
            lambda3: 5.0,
            lr: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            perceptual_taps: vec![4, 9],
            batch_size: 4,
            iterations: 500,
            seed: 0,
        }
    }
}

impl RenderTrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// `img_feat ⊙ σ(pose_feat)`.
pub fn attention_gate(img_feat: &Tensor, pose_feat: &Tensor) -> Result<Tensor> {
    if img_feat.shape() != pose_feat.shape() {
        return Err(Error::shape(format!("gate inputs {:?} and {:?}", img_feat.shape(), pose_feat.shape())));
    }
    Ok(img_feat.mul(&pose_feat.sigmoid()))
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm,
}

impl Stem {
    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        self.bn.forward(ps, &self.conv.forward(ps, x)).relu()
    }
}

#[derive(Debug, Clone)]
struct Down {
    conv: Conv2d,
    bn: BatchNorm,
    res: ResBlock,
}

impl Down {
    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        self.res.forward(ps, &self.bn.forward(ps, &self.conv.forward(ps, x)).relu())
    }
}

#[derive(Debug, Clone)]
struct Up {
    conv: ConvTranspose2d,
    bn: BatchNorm,
    res: ResBlock,
}

impl Up {
    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        self.res.forward(ps, &self.bn.forward(ps, &self.conv.forward(ps, x)).relu())
    }
}

/// Generated images plus the attention maps `σ(H_ℓ)` for `ℓ = 1..levels`,
/// finest first.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Tensor,
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct RenderGenerator {
    pub cfg: GSConfig,
    pub params: ParamStore,
    image_stem: Stem,
    pose_stem: Stem,
    image_down: Vec<Down>,
    pose_down: Vec<Down>,
    merge: Conv2d,
    ups: Vec<Up>,
    tail: Vec<ResBlock>,
    head: Conv2d,
}

impl RenderGenerator {
    pub fn new<R: Rng + ?Sized>(cfg: GSConfig, rng: &mut R) -> Result<Self> {
        let (s, l, f) = (cfg.image_size, cfg.levels, cfg.base_filters);
        if l == 0 || f == 0 || s % (1 << l) != 0 {
            return Err(Error::Config(format!("image size {s} must be divisible by 2^{l}")));
        }
        let init = InitScheme::gan();
        let mut ps = ParamStore::new();
        let stem = |ps: &mut ParamStore, rng: &mut R, name: &str, c_in: usize| Stem {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), c_in, f, 3, 1, 1, false, init),
            bn: BatchNorm::new(ps, rng, &format!("{name}.bn"), f, init),
        };
        let image_stem = stem(&mut ps, rng, "image_stem", 3);
        let pose_stem = stem(&mut ps, rng, "pose_stem", 2 * NUM_JOINTS);
        let mut branches = Vec::new();
        for branch in ["image", "pose"] {
            let mut downs = Vec::new();
            for lvl in 1..=l {
                let (c_in, c_out) = (f << (lvl - 1), f << lvl);
                let name = format!("{branch}_down{lvl}");
                downs.push(Down {
                    conv: Conv2d::new(&mut ps, rng, &format!("{name}.conv"), c_in, c_out, 4, 2, 1, false, init),
                    bn: BatchNorm::new(&mut ps, rng, &format!("{name}.bn"), c_out, init),
                    res: ResBlock::new(&mut ps, rng, &format!("{name}.res"), c_out, init),
                });
            }
            branches.push(downs);
        }
        let pose_down = branches.pop().expect("two branches");
        let image_down = branches.pop().expect("two branches");
        let deepest = f << l;
        let merge = Conv2d::new(&mut ps, rng, "merge", 2 * deepest, deepest, 1, 1, 0, false, init);
        let mut ups = Vec::new();
        for lvl in (1..=l).rev() {
            let c = f << lvl;
            let name = format!("up{lvl}");
            ups.push(Up {
                conv: ConvTranspose2d::new(&mut ps, rng, &format!("{name}.conv"), 2 * c, c / 2, 4, 2, 1, false, init),
                bn: BatchNorm::new(&mut ps, rng, &format!("{name}.bn"), c / 2, init),
                res: ResBlock::new(&mut ps, rng, &format!("{name}.res"), c / 2, init),
            });
        }
        let tail = (0..cfg.residual_tail).map(|i| ResBlock::new(&mut ps, rng, &format!("tail{i}"), f, init)).collect();
        let head = Conv2d::new(&mut ps, rng, "head", f, 3, 1, 1, 0, false, init);
        Ok(RenderGenerator { cfg, params: ps, image_stem, pose_stem, image_down, pose_down, merge, ups, tail, head })
    }

    /// `image: N × 3 × S × S` in `[-1, 1]`; heatmaps `N × 18 × S × S` in `[0, 1]`.
    pub fn forward(&self, image: &Tensor, hm_source: &Tensor, hm_target: &Tensor) -> Result<RenderOutput> {
        let s = self.cfg.image_size;
        let (n, c, h, w) = image.dims4();
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!("renderer expects N×3×{s}×{s} images, got {:?}", image.shape())));
        }
        for hm in [hm_source, hm_target] {
            if hm.shape() != [n, NUM_JOINTS, s, s] {
                return Err(Error::shape(format!("renderer expects N×18×{s}×{s} heatmaps, got {:?}", hm.shape())));
            }
        }
        let ps = &self.params;
        let mut xi = self.image_stem.forward(ps, image);
        let mut xh = self.pose_stem.forward(ps, &Tensor::concat(&[hm_source.clone(), hm_target.clone()]));
        let mut gated = Vec::with_capacity(self.cfg.levels);
        let mut attention = Vec::with_capacity(self.cfg.levels);
        for (di, dh) in self.image_down.iter().zip(&self.pose_down) {
            xi = di.forward(ps, &xi);
            xh = dh.forward(ps, &xh);
            let gate = xh.sigmoid();
            gated.push(xi.mul(&gate));
            attention.push(gate);
        }
        let mut x = self.merge.forward(ps, &Tensor::concat(&[xi, xh]));
        for (up, skip) in self.ups.iter().zip(gated.iter().rev()) {
            x = up.forward(ps, &Tensor::concat(&[x, skip.clone()]));
        }
        for rb in &self.tail {
            x = rb.forward(ps, &x);
        }
        Ok(RenderOutput { image: self.head.forward(ps, &x).tanh(), attention })
    }
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub cfg: DSConfig,
    pub params: ParamStore,
    stages: Vec<Conv2d>,
    out: Conv2d,
}

impl PatchDiscriminator {
    pub fn new<R: Rng + ?Sized>(cfg: DSConfig, rng: &mut R) -> Result<Self> {
        if cfg.stage_filters.is_empty() {
            return Err(Error::Config("patch discriminator needs at least one stage".into()));
        }
        let init = InitScheme::gan();
        let mut ps = ParamStore::new();
        let mut stages = Vec::new();
        let mut c_in = 6;
        for (i, &c) in cfg.stage_filters.iter().enumerate() {
            stages.push(Conv2d::new(&mut ps, rng, &format!("stage{i}.conv"), c_in, c, 4, 2, 1, i == 0, init));
            c_in = c;
        }
        let out = Conv2d::new(&mut ps, rng, "out", c_in, 1, 4, 1, 1, true, init);
        Ok(PatchDiscriminator { cfg, params: ps, stages, out })
    }

    /// Weight of the first convolution, `C × 6 × 4 × 4`.
    pub fn first_weight(&self) -> ParamId {
        self.stages[0].weight
    }

    /// Patch probabilities `N × 1 × P × P`, strictly inside `(0, 1)`.
    pub fn forward(&self, source: &Tensor, candidate: &Tensor) -> Result<Tensor> {
        if source.shape() != candidate.shape() || source.shape().len() != 4 || source.shape()[1] != 3 {
            return Err(Error::shape(format!("discriminator inputs {:?} and {:?}", source.shape(), candidate.shape())));
        }
        let ps = &self.params;
        let mut x = Tensor::concat(&[source.clone(), candidate.clone()]);
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(ps, &x);
            if i > 0 {
                x = instance_norm(&x, 1e-5);
            }
            x = x.leaky_relu(0.2);
        }
        Ok(self.out.forward(ps, &x).sigmoid().clamp(f32::MIN_POSITIVE, BELOW_ONE))
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// Mean binary cross-entropy against a constant target, with probabilities
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(probs: &[f64], target: f64) -> f64 {
    mean(probs.iter().map(|&p| {
        let p = clamp_prob(p);
        -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
    }))
}

pub fn adv_loss_g(probs: &[f64]) -> f64 {
    bce(probs, 1.0)
}

pub fn discriminator_objective(real_probs: &[f64], fake_probs: &[f64]) -> f64 {
    0.5 * (bce(real_probs, 1.0) + bce(fake_probs, 0.0))
}

pub fn generator_objective(l1: f64, adv: f64, perc4: f64, perc9: f64, cfg: &RenderTrainConfig) -> f64 {
    cfg.lambda1 * l1 + cfg.lambda2 * adv + cfg.lambda3 * (perc4 + perc9)
}

/// Tensor form of [`bce`].
pub fn bce_tensor(probs: &Tensor, target: f32) -> Tensor {
    let p = probs.clamp(BCE_EPS as f32, 1.0 - BCE_EPS as f32);
    if target == 1.0 {
        p.ln().mean_all().neg()
    } else if target == 0.0 {
        p.neg().add_scalar(1.0).ln().mean_all().neg()
    } else {
        let a = p.ln().scale(target);
        let b = p.neg().add_scalar(1.0).ln().scale(1.0 - target);
        a.add(&b).mean_all().neg()
    }
}

pub fn l1_tensor(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean_all()
}

/// Fixed feature maps for the perceptual loss. Tap `ρ` is the output of
/// layer `ρ` (1-based); gradients flow to the input image only.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn features(&self, image: &Tensor, taps: &[usize]) -> Vec<Tensor>;
}

/// Every tap returns the image itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> String {
        "identity".into()
    }

    fn features(&self, image: &Tensor, taps: &[usize]) -> Vec<Tensor> {
        taps.iter().map(|_| image.clone()).collect()
    }
}

/// Seeded random convolution stack with ReLU after every layer.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    seed: u64,
    layers: Vec<(Tensor, usize)>,
}

impl RandomConvExtractor {
    /// `(out_channels, stride)` per layer.
    pub const LAYOUT: [(usize, usize); 10] = [(8, 1), (8, 1), (16, 2), (16, 1), (32, 2), (32, 1), (32, 1), (64, 2), (64, 1), (64, 1)];

    pub fn new(seed: u64) -> Self {
        Self::with_layout(seed, &Self::LAYOUT)
    }

    pub fn with_layout(seed: u64, layout: &[(usize, usize)]) -> Self {
        let mut rng = rng_for(seed, "render/extractor");
        let mut c_in = 3;
        let layers = layout
            .iter()
            .map(|&(c, stride)| {
                let fan_in = c_in * 9;
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
                let w: Vec<f32> = (0..c * fan_in).map(|_| normal.sample(&mut rng)).collect();
                let t = Tensor::from_vec(w, &[c, c_in, 3, 3]);
                c_in = c;
                (t, stride)
            })
            .collect();
        RandomConvExtractor { seed, layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer weights, each `C_out × C_in × 3 × 3`.
    pub fn weights(&self) -> Vec<&Tensor> {
        self.layers.iter().map(|(w, _)| w).collect()
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> String {
        format!("random-conv(seed={}, depth={})", self.seed, self.layers.len())
    }

    fn features(&self, image: &Tensor, taps: &[usize]) -> Vec<Tensor> {
        let deepest = taps.iter().copied().max().unwrap_or(0).min(self.layers.len());
        let mut outs = Vec::with_capacity(deepest);
        let mut x = image.clone();
        for (w, stride) in &self.layers[..deepest] {
            x = x.conv2d(w, *stride, 1).relu();
            outs.push(x.clone());
        }
        taps.iter().map(|&t| outs[t.clamp(1, deepest) - 1].clone()).collect()
    }
}

/// Per-tap mean absolute feature difference; the perceptual loss is their sum.
pub fn perceptual_terms(gen: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor, taps: &[usize]) -> Vec<Tensor> {
    let fg = extractor.features(gen, taps);
    let ft = no_grad(|| extractor.features(target, taps));
    fg.iter().zip(&ft).map(|(a, b)| l1_tensor(a, &b.detach())).collect()
}

/// Evaluation form of the perceptual loss, reduced in `f64`.
pub fn perceptual_loss(gen: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor, taps: &[usize]) -> f64 {
    let (fg, ft) = no_grad(|| (extractor.features(gen, taps), extractor.features(target, taps)));
    fg.iter()
        .zip(&ft)
        .map(|(a, b)| {
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
            s / a.numel() as f64
        })
        .sum()
}

/// Same person in two poses.
#[derive(Debug, Clone)]
pub struct RenderPair {
    pub source: Image,
    pub source_pose: KeypointSet,
    pub target: Image,
    pub target_pose: KeypointSet,
}

/// Heatmap spec used for stage-3 inputs: image resolution, sigma scaled
/// from its 64-pixel value.
pub fn stage3_heatmap_spec(size: usize) -> Result<HeatmapSpec> {
    HeatmapSpec::scaled(size)
}

pub fn heatmap_batch(poses: &[&KeypointSet], size: usize) -> Result<Tensor> {
    let spec = stage3_heatmap_spec(size)?;
    let mut data = Vec::with_capacity(poses.len() * NUM_JOINTS * size * size);
    for p in poses {
        data.extend_from_slice(render_heatmaps(p, &spec)?.values());
    }
    Ok(Tensor::from_vec(data, &[poses.len(), NUM_JOINTS, size, size]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTraceRow {
    pub iteration: usize,
    pub g_loss: f32,
    pub l1: f32,
    pub adv: Option<f32>,
    pub perceptual: Vec<f32>,
    pub d_loss: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderTrace {
    pub rows: Vec<RenderTraceRow>,
}

impl RenderTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,g_loss,l1,adv,perceptual,d_loss\n");
        for r in &self.rows {
            let adv = r.adv.map(|a| a.to_string()).unwrap_or_default();
            let perc: Vec<String> = r.perceptual.iter().map(|p| p.to_string()).collect();
            s.push_str(&format!("{},{},{},{},{},{}\n", r.iteration, r.g_loss, r.l1, adv, perc.join(";"), r.d_loss));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PoseRenderer {
    pub generator: RenderGenerator,
    pub discriminator: PatchDiscriminator,
    pub iteration: u64,
    pub seed: u64,
}

impl PoseRenderer {
    pub fn new(gs: GSConfig, ds: DSConfig, seed: u64) -> Result<Self> {
        let generator = RenderGenerator::new(gs, &mut rng_for(seed, "render/generator/init"))?;
        let discriminator = PatchDiscriminator::new(ds, &mut rng_for(seed, "render/discriminator/init"))?;
        Ok(PoseRenderer { generator, discriminator, iteration: 0, seed })
    }

    pub fn image_size(&self) -> usize {
        self.generator.cfg.image_size
    }

    /// Renders one image of the source person in the target pose.
    pub fn render(&self, source: &Image, source_pose: &KeypointSet, target_pose: &KeypointSet) -> Result<(Image, Vec<Tensor>)> {
        let s = self.image_size();
        let out = no_grad(|| -> Result<RenderOutput> {
            let hs = heatmap_batch(&[source_pose], s)?;
            let ht = heatmap_batch(&[target_pose], s)?;
            self.generator.forward(&source.to_tensor(), &hs, &ht)
        })?;
        let image = Image::from_batch(&out.image).remove(0);
        Ok((image, out.attention))
    }

    pub fn to_checkpoint(&self, train: Option<&RenderTrainConfig>, extractor: Option<&str>) -> Checkpoint {
        let config = serde_json::json!({
            "generator": self.generator.cfg,
            "discriminator": self.discriminator.cfg,
            "train": train,
            "extractor": extractor,
        });
        let mut c = Checkpoint::new(STAGE_RENDER, self.iteration, self.seed, config);
        c.push_store("generator", &self.generator.params);
        c.push_store("discriminator", &self.discriminator.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(STAGE_RENDER)?;
        let field = |key: &str| ckpt.config.get(key).cloned().ok_or_else(|| Error::CorruptCheckpoint(format!("missing `{key}` config")));
        let gs: GSConfig = serde_json::from_value(field("generator")?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let ds: DSConfig = serde_json::from_value(field("discriminator")?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut m = PoseRenderer::new(gs, ds, 0)?;
        ckpt.load_store("generator", &mut m.generator.params)?;
        ckpt.load_store("discriminator", &mut m.discriminator.params)?;
        m.iteration = ckpt.iteration;
        m.seed = ckpt.seed;
        Ok(m)
    }
}

/// Precomputed network inputs for one batch.
struct Batch {
    source: Tensor,
    target: Tensor,
    hm_source: Tensor,
    hm_target: Tensor,
}

fn make_batch(pairs: &[&RenderPair], size: usize) -> Result<Batch> {
    let sources: Vec<&Image> = pairs.iter().map(|p| &p.source).collect();
    let targets: Vec<&Image> = pairs.iter().map(|p| &p.target).collect();
    let sp: Vec<&KeypointSet> = pairs.iter().map(|p| &p.source_pose).collect();
    let tp: Vec<&KeypointSet> = pairs.iter().map(|p| &p.target_pose).collect();
    Ok(Batch {
        source: stack_images(&sources)?,
        target: stack_images(&targets)?,
        hm_source: heatmap_batch(&sp, size)?,
        hm_target: heatmap_batch(&tp, size)?,
    })
}

/// Trains a renderer from scratch. Pass `None` as extractor to drop the
/// perceptual term.
pub fn train_render(
    pairs: &[RenderPair],
    gs: GSConfig,
    ds: DSConfig,
    cfg: &RenderTrainConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<(PoseRenderer, RenderTrace)> {
    let model = PoseRenderer::new(gs, ds, cfg.seed)?;
    continue_render(model, pairs, cfg, extractor)
}

pub fn continue_render(
    mut model: PoseRenderer,
    pairs: &[RenderPair],
    cfg: &RenderTrainConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<(PoseRenderer, RenderTrace)> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.batch_size == 0 || [cfg.lambda1, cfg.lambda2, cfg.lambda3].iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Config("render training needs batch_size >= 1 and non-negative lambdas".into()));
    }
    let s = model.image_size();
    for p in pairs {
        if p.source.width != s || p.target.width != s || p.source.height != s || p.target.height != s {
            return Err(Error::shape(format!("render training images must be {s}x{s}")));
        }
    }
    let use_perc = cfg.lambda3 > 0.0 && extractor.is_some() && !cfg.perceptual_taps.is_empty();
    let mut rng = rng_for(cfg.seed, "render/train");
    let mut opt_g = Adam::new(cfg.adam(), &model.generator.params);
    let mut opt_d = Adam::new(cfg.adam(), &model.discriminator.params);
    let bs = cfg.batch_size.min(pairs.len());
    let mut order: Vec<usize> = Vec::new();
    let mut trace = RenderTrace::default();

    for it in 1..=cfg.iterations {
        let mut idx = Vec::with_capacity(bs);
        while idx.len() < bs {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let chosen: Vec<&RenderPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let b = make_batch(&chosen, s)?;

        let fake = no_grad(|| model.generator.forward(&b.source, &b.hm_source, &b.hm_target))?.image;
        let d = &model.discriminator;
        let d_loss = bce_tensor(&d.forward(&b.source, &b.target)?, 1.0).add(&bce_tensor(&d.forward(&b.source, &fake)?, 0.0)).scale(0.5);
        if !d_loss.all_finite() {
            return Err(Error::Training(format!("non-finite discriminator loss at iteration {it}")));
        }
        opt_d.step(&mut model.discriminator.params, &backward(&d_loss));

        let out = model.generator.forward(&b.source, &b.hm_source, &b.hm_target)?;
        let l1 = l1_tensor(&out.image, &b.target);
        let mut g_loss = l1.scale(cfg.lambda1 as f32);
        let mut adv_value = None;
        if cfg.lambda2 > 0.0 {
            let adv = bce_tensor(&model.discriminator.forward(&b.source, &out.image)?, 1.0);
            adv_value = Some(adv.item());
            g_loss = g_loss.add(&adv.scale(cfg.lambda2 as f32));
        }
        let mut perc_values = Vec::new();
        if use_perc {
            let terms = perceptual_terms(&out.image, &b.target, extractor.expect("checked"), &cfg.perceptual_taps);
            for t in &terms {
                perc_values.push(t.item());
                g_loss = g_loss.add(&t.scale(cfg.lambda3 as f32));
            }
        }
        if !g_loss.all_finite() {
            return Err(Error::Training(format!("non-finite generator loss at iteration {it}")));
        }
        opt_g.step(&mut model.generator.params, &backward(&g_loss));

        let row = RenderTraceRow {
            iteration: it,
            g_loss: g_loss.item(),
            l1: l1.item(),
            adv: adv_value,
            perceptual: perc_values,
            d_loss: d_loss.item(),
        };
        if it % 50 == 0 {
            info!("render iteration {it}: G {:.4} (L1 {:.4}) D {:.4}", row.g_loss, row.l1, row.d_loss);
        }
        trace.rows.push(row);
        model.iteration += 1;
    }
    Ok((model, trace))
}

/// Mean absolute error of the generator over `pairs`, evaluated as one batch.
pub fn mean_abs_error(model: &PoseRenderer, pairs: &[RenderPair]) -> Result<f64> {
    let refs: Vec<&RenderPair> = pairs.iter().collect();
    let b = make_batch(&refs, model.image_size())?;
    let out = no_grad(|| model.generator.forward(&b.source, &b.hm_source, &b.hm_target))?;
    let diff: f64 = out.image.data().iter().zip(b.target.data()).map(|(a, t)| (a - t).abs() as f64).sum();
    Ok(diff / out.image.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GSConfig {
        GSConfig { image_size: 16, levels: 4, base_filters: 2, residual_tail: 1 }
    }

    #[test]
    fn gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        let half = attention_gate(&img, &Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        for (a, b) in half.data().iter().zip(img.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        let open = attention_gate(&img, &Tensor::full(&[1, 2, 3, 3], 20.0)).unwrap();
        for (a, b) in open.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-8);
        }
        assert!(attention_gate(&img, &Tensor::zeros(&[1, 2, 3, 4])).is_err());
    }

    #[test]
    fn generator_shapes_and_attention_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = RenderGenerator::new(tiny(), &mut rng).unwrap();
        let img = Tensor::randn(&[2, 3, 16, 16], &mut rng).tanh();
        let hm = Tensor::zeros(&[2, 18, 16, 16]);
        let out = g.forward(&img, &hm, &hm).unwrap();
        assert_eq!(out.image.shape(), &[2, 3, 16, 16]);
        assert!(out.image.data().iter().all(|v| v.abs() < 1.0));
        let sizes: Vec<usize> = out.attention.iter().map(|a| a.shape()[2]).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1]);
        assert!(g.forward(&img, &Tensor::zeros(&[2, 18, 8, 8]), &hm).is_err());
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = RenderGenerator::new(tiny(), &mut rng).unwrap();
        g.params.zero_all();
        let img = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        let hm = Tensor::full(&[1, 18, 16, 16], 0.3);
        assert!(g.forward(&img, &hm, &hm).unwrap().image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = PatchDiscriminator::new(DSConfig { stage_filters: vec![4, 8, 8, 8] }, &mut rng).unwrap();
        d.params.zero_all();
        let a = Tensor::randn(&[2, 3, 32, 32], &mut rng);
        let p = d.forward(&a, &a).unwrap();
        assert_eq!(p.shape(), &[2, 1, 1, 1]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bce_examples() {
        assert!((adv_loss_g(&[0.5; 9]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(adv_loss_g(&[1.0; 4]) < 1e-6);
        assert!((discriminator_objective(&[0.5; 4], &[0.5; 4]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(discriminator_objective(&[1.0; 4], &[0.0; 4]) < 1e-6);
        let t = bce_tensor(&Tensor::from_vec(vec![0.2, 0.7], &[2]), 1.0).item() as f64;
        assert!((t - adv_loss_g(&[0.2, 0.7])).abs() < 1e-6);
    }

    #[test]
    fn generator_objective_example() {
        let cfg = RenderTrainConfig::default();
        assert!((generator_objective(0.1, 0.7, 0.02, 0.03, &cfg) - 1.45).abs() < 1e-12);
        assert_eq!(generator_objective(0.0, 0.0, 0.0, 0.0, &cfg), 0.0);
    }

    #[test]
    fn perceptual_identity_is_pixel_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[1, 3, 8, 8], &mut rng);
        let b = Tensor::randn(&[1, 3, 8, 8], &mut rng);
        let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / 192.0;
        assert!((perceptual_loss(&a, &b, &IdentityExtractor, &[1]) - l1).abs() < 1e-6);
        assert_eq!(perceptual_loss(&a, &a, &RandomConvExtractor::new(0), &[4, 9]), 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PoseRenderer::new(tiny(), DSConfig { stage_filters: vec![4, 4] }, 5).unwrap();
        let back = PoseRenderer::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint(None, None).to_bytes()).unwrap()).unwrap();
        for ((_, _, a), (_, _, b)) in m.generator.params.blocks().zip(back.generator.params.blocks()) {
            assert_eq!(a, b);
        }
    }
}
