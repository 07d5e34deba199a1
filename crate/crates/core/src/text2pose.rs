//! Text-to-keypoint generator, its Wasserstein critic, and their training.
//!
//! The generator maps an embedding and a noise vector to 18 heatmaps in
//! `(-1, 1)`. The critic scores a heatmap stack together with the embedding
//! it should match. Ground-truth heatmaps enter the critic as `2x - 1`.

use log::{debug, info};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tips_tensor::nn::{BatchNorm, Conv2d, ConvTranspose2d, InitScheme, Linear, ParamStore};
use tips_tensor::optim::{Adam, AdamConfig};
use tips_tensor::{backward, grad, no_grad, Tensor};

use crate::checkpoint::{Checkpoint, STAGE_TEXT2POSE};
use crate::error::{Error, Result};
use crate::pose::{HeatmapTensor, NUM_JOINTS};
use crate::seed::rng_for;
use crate::text::TextEmbedding;

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTConfig {
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub noise_dim: usize,
    pub upconv_filters: Vec<usize>,
    pub out_channels: usize,
    pub out_size: usize,
}

impl GTConfig {
    pub fn new(embed_dim: usize) -> Self {
        GTConfig {
            embed_dim,
            latent_dim: 128,
            noise_dim: 128,
            upconv_filters: vec![256, 128, 64, 32],
            out_channels: NUM_JOINTS,
            out_size: 64,
        }
    }

    fn seed_size(&self) -> usize {
        self.out_size >> self.upconv_filters.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DTConfig {
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub conv_filters: Vec<usize>,
    pub tile: usize,
    pub point_conv_filters: usize,
    pub in_channels: usize,
    pub in_size: usize,
}

impl DTConfig {
    pub fn new(embed_dim: usize) -> Self {
        DTConfig {
            embed_dim,
            latent_dim: 128,
            conv_filters: vec![32, 64, 128, 256],
            tile: 4,
            point_conv_filters: 256,
            in_channels: NUM_JOINTS,
            in_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct T2PTrainConfig {
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub gp_lambda: f32,
    pub critic_steps_per_gen: usize,
    pub batch_size: usize,
    /// Number of critic updates.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for T2PTrainConfig {
    fn default() -> Self {
        T2PTrainConfig {
            lr: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            gp_lambda: 10.0,
            critic_steps_per_gen: 5,
            batch_size: 16,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl T2PTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.gp_lambda > 0.0) {
            return Err(Error::Config(format!("gp_lambda must be positive, got {}", self.gp_lambda)));
        }
        if self.critic_steps_per_gen == 0 || self.batch_size == 0 {
            return Err(Error::Config("critic_steps_per_gen and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// Stage-1 generator.
#[derive(Debug, Clone)]
pub struct PoseGenerator {
    pub cfg: GTConfig,
    pub params: ParamStore,
    project: Linear,
    seed: Linear,
    seed_norm: BatchNorm,
    ups: Vec<(ConvTranspose2d, BatchNorm)>,
    head: ConvTranspose2d,
}

impl PoseGenerator {
    pub fn new<R: Rng + ?Sized>(cfg: GTConfig, rng: &mut R) -> Result<Self> {
        let s = cfg.seed_size();
        if cfg.upconv_filters.is_empty() || s == 0 || s << cfg.upconv_filters.len() != cfg.out_size {
            return Err(Error::Config(format!("output size {} is not a seed size times 2^{}", cfg.out_size, cfg.upconv_filters.len())));
        }
        let init = InitScheme::gan();
        let mut ps = ParamStore::new();
        let project = Linear::new(&mut ps, rng, "project", cfg.embed_dim, cfg.latent_dim, true, init);
        let c0 = cfg.upconv_filters[0];
        let seed = Linear::new(&mut ps, rng, "seed", cfg.latent_dim + cfg.noise_dim, c0 * s * s, true, init);
        let seed_norm = BatchNorm::new(&mut ps, rng, "seed_bn", c0, init);
        let mut ups = Vec::new();
        let mut c_in = c0;
        for (i, &c) in cfg.upconv_filters.iter().enumerate() {
            let conv = ConvTranspose2d::new(&mut ps, rng, &format!("up{i}"), c_in, c, 4, 2, 1, false, init);
            let bn = BatchNorm::new(&mut ps, rng, &format!("up{i}_bn"), c, init);
            ups.push((conv, bn));
            c_in = c;
        }
        let head = ConvTranspose2d::new(&mut ps, rng, "head", c_in, cfg.out_channels, 3, 1, 1, true, init);
        Ok(PoseGenerator { cfg, params: ps, project, seed, seed_norm, ups, head })
    }

    /// `v: N × embed`, `noise: N × noise_dim` to `N × 18 × 64 × 64` in `(-1, 1)`.
    pub fn forward(&self, v: &Tensor, noise: &Tensor) -> Tensor {
        let ps = &self.params;
        let n = v.shape()[0];
        let s = self.cfg.seed_size();
        let latent = self.project.forward(ps, v).leaky_relu(LEAKY_SLOPE);
        let z = Tensor::concat(&[latent, noise.clone()]);
        let seed = self.seed.forward(ps, &z).reshape(&[n, self.cfg.upconv_filters[0], s, s]);
        let mut x = self.seed_norm.forward(ps, &seed).relu();
        for (conv, bn) in &self.ups {
            x = bn.forward(ps, &conv.forward(ps, &x)).relu();
        }
        self.head.forward(ps, &x).tanh()
    }
}

/// Stage-1 critic. Scores are unbounded.
#[derive(Debug, Clone)]
pub struct PoseCritic {
    pub cfg: DTConfig,
    pub params: ParamStore,
    convs: Vec<Conv2d>,
    project: Linear,
    point: Conv2d,
    out: Conv2d,
}

impl PoseCritic {
    pub fn new<R: Rng + ?Sized>(cfg: DTConfig, rng: &mut R) -> Result<Self> {
        if cfg.in_size >> cfg.conv_filters.len() != cfg.tile || cfg.conv_filters.is_empty() {
            return Err(Error::Config(format!(
                "{} stride-2 stages reduce {} to {}, not the {}x{} tile",
                cfg.conv_filters.len(),
                cfg.in_size,
                cfg.in_size >> cfg.conv_filters.len(),
                cfg.tile,
                cfg.tile
            )));
        }
        let init = InitScheme::gan();
        let mut ps = ParamStore::new();
        let mut convs = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &c) in cfg.conv_filters.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, rng, &format!("conv{i}"), c_in, c, 4, 2, 1, true, init));
            c_in = c;
        }
        let project = Linear::new(&mut ps, rng, "project", cfg.embed_dim, cfg.latent_dim, true, init);
        let point = Conv2d::new(&mut ps, rng, "point", c_in + cfg.latent_dim, cfg.point_conv_filters, 1, 1, 0, true, init);
        let out = Conv2d::new(&mut ps, rng, "out", cfg.point_conv_filters, 1, cfg.tile, 1, 0, false, init);
        Ok(PoseCritic { cfg, params: ps, convs, project, point, out })
    }

    /// Features entering the final layer: `N × point_filters × tile × tile`.
    pub fn features(&self, hm: &Tensor, v: &Tensor) -> Tensor {
        let ps = &self.params;
        let mut x = hm.clone();
        for conv in &self.convs {
            x = conv.forward(ps, &x).leaky_relu(LEAKY_SLOPE);
        }
        let phi = self.project.forward(ps, v).leaky_relu(LEAKY_SLOPE);
        let tiled = phi.spatial_broadcast(self.cfg.tile, self.cfg.tile);
        self.point.forward(ps, &Tensor::concat(&[x, tiled])).leaky_relu(LEAKY_SLOPE)
    }

    /// `hm: N × 18 × 64 × 64` in `[-1, 1]`, `v: N × embed` to `N` scores.
    pub fn forward(&self, hm: &Tensor, v: &Tensor) -> Tensor {
        let n = hm.shape()[0];
        self.out.forward(&self.params, &self.features(hm, v)).reshape(&[n])
    }

    pub fn final_weight(&self) -> tips_tensor::nn::ParamId {
        self.out.weight
    }
}

fn check_embedding(v: &TextEmbedding, dim: usize) -> Result<()> {
    if v.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: v.dim() });
    }
    Ok(())
}

/// Single-sample generator pass returning raw `(-1, 1)` values.
pub fn gt_forward(v: &TextEmbedding, noise: &[f32], gen: &PoseGenerator) -> Result<Vec<f32>> {
    check_embedding(v, gen.cfg.embed_dim)?;
    if noise.len() != gen.cfg.noise_dim {
        return Err(Error::DimensionMismatch { expected: gen.cfg.noise_dim, found: noise.len() });
    }
    let out = no_grad(|| gen.forward(&Tensor::from_vec(v.to_f32(), &[1, v.dim()]), &Tensor::from_vec(noise.to_vec(), &[1, noise.len()])));
    Ok(out.to_vec())
}

/// Single-sample critic score. `hm` holds signed values, `18 × 64 × 64`.
pub fn dt_forward(hm: &[f32], v: &TextEmbedding, critic: &PoseCritic) -> Result<f32> {
    check_embedding(v, critic.cfg.embed_dim)?;
    let c = &critic.cfg;
    let expected = c.in_channels * c.in_size * c.in_size;
    if hm.len() != expected {
        return Err(Error::DimensionMismatch { expected, found: hm.len() });
    }
    let score = no_grad(|| {
        critic.forward(
            &Tensor::from_vec(hm.to_vec(), &[1, c.in_channels, c.in_size, c.in_size]),
            &Tensor::from_vec(v.to_f32(), &[1, v.dim()]),
        )
    });
    Ok(score.item())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `-mean(real - fake)`.
pub fn critic_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if real_scores.len() != fake_scores.len() {
        return Err(Error::shape(format!("{} real scores vs {} fake", real_scores.len(), fake_scores.len())));
    }
    let diffs: Vec<f64> = real_scores.iter().zip(fake_scores).map(|(r, f)| r - f).collect();
    Ok(-mean(&diffs))
}

/// Tensor form of [`critic_loss`] for training.
pub fn critic_loss_tensor(real_scores: &Tensor, fake_scores: &Tensor) -> Tensor {
    real_scores.sub(fake_scores).mean_all().neg()
}

/// `l_d + gp_lambda * gp`.
pub fn critic_objective(l_d: f64, gp: f64, gp_lambda: f64) -> f64 {
    l_d + gp_lambda * gp
}

/// `-mean(scores at v) - mean(scores at the midpoint embeddings)`.
pub fn generator_loss_from_scores(scores: &[f64], mid_scores: &[f64]) -> Result<f64> {
    if scores.is_empty() || mid_scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(-mean(scores) - mean(mid_scores))
}

/// `x̃ = αx + (1 - α)x_fake`, one α per sample. `α = 1` and `α = 0` return
/// the real and fake sample bit for bit.
pub fn interpolate_samples(real: &Tensor, fake: &Tensor, alpha: &[f32]) -> Tensor {
    assert_eq!(real.shape(), fake.shape());
    let n = real.shape()[0];
    assert_eq!(alpha.len(), n);
    let per = real.numel() / n;
    let (r, f) = (real.data(), fake.data());
    let mut data = Vec::with_capacity(real.numel());
    for (i, &a) in alpha.iter().enumerate() {
        let (rs, fs) = (&r[i * per..(i + 1) * per], &f[i * per..(i + 1) * per]);
        if a == 1.0 {
            data.extend_from_slice(rs);
        } else if a == 0.0 {
            data.extend_from_slice(fs);
        } else {
            data.extend(rs.iter().zip(fs).map(|(&x, &y)| a * x + (1.0 - a) * y));
        }
    }
    Tensor::from_vec(data, real.shape())
}

/// Mean over the batch of `(‖∇_{x̃,v} D(x̃, v)‖₂ - 1)²`.
///
/// `critic` maps `(N × … heatmaps, N × embed)` to `N` scores and must treat
/// samples independently. The result stays differentiable with respect to
/// the critic's parameters.
pub fn gradient_penalty<F>(critic: F, real: &Tensor, fake: &Tensor, v: &Tensor, alpha: &[f32]) -> Result<Tensor>
where
    F: Fn(&Tensor, &Tensor) -> Tensor,
{
    if alpha.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let x = interpolate_samples(&real.detach(), &fake.detach(), alpha).requires_grad_leaf();
    let v = v.detach().requires_grad_leaf();
    let scores = critic(&x, &v);
    let mut grads = grad(&scores.sum_all(), &[&x, &v], true).into_iter();
    let gx = grads.next().flatten().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let gv = grads.next().flatten().unwrap_or_else(|| Tensor::zeros(v.shape()));
    if !gx.all_finite() || !gv.all_finite() {
        return Err(Error::Training("non-finite critic gradient in the gradient penalty".into()));
    }
    let sq = gx.square().sample_sum().add(&gv.square().sample_sum());
    let norm = sq.add_scalar(1e-12).sqrt();
    Ok(norm.add_scalar(-1.0).square().mean_all())
}

/// `-mean D(G(η, v), v) - mean D(G(η, v̄), v̄)` with `v̄ = (v1 + v2) / 2`.
pub fn generator_loss(critic: &PoseCritic, gen: &PoseGenerator, noise: &Tensor, v: &Tensor, v1: &Tensor, v2: &Tensor) -> Tensor {
    let mid = v1.add(v2).scale(0.5);
    let first = critic.forward(&gen.forward(v, noise), v).mean_all();
    let second = critic.forward(&gen.forward(&mid, noise), &mid).mean_all();
    first.neg().sub(&second)
}

/// One `(heatmap, embedding)` training pair.
#[derive(Debug, Clone)]
pub struct T2PSample {
    pub heatmap: HeatmapTensor,
    pub embedding: TextEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct T2PTraceRow {
    pub iteration: usize,
    pub critic_loss: f32,
    pub gp: f32,
    /// Present on iterations that updated the generator.
    pub gen_loss: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct T2PTrace {
    pub rows: Vec<T2PTraceRow>,
}

impl T2PTrace {
    pub fn generator_updates(&self) -> usize {
        self.rows.iter().filter(|r| r.gen_loss.is_some()).count()
    }

    /// `iteration,critic_loss,gp,gen_loss`, one line per critic update.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,critic_loss,gp,gen_loss\n");
        for r in &self.rows {
            let g = r.gen_loss.map(|g| g.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.iteration, r.critic_loss, r.gp, g));
        }
        s
    }
}

/// Generator and critic trained together.
#[derive(Debug, Clone)]
pub struct TextToPose {
    pub generator: PoseGenerator,
    pub critic: PoseCritic,
    pub iteration: u64,
    pub seed: u64,
    /// Id of the attribute schema the embeddings were encoded with.
    pub schema_id: Option<String>,
}

impl TextToPose {
    pub fn new(embed_dim: usize, seed: u64) -> Result<Self> {
        let generator = PoseGenerator::new(GTConfig::new(embed_dim), &mut rng_for(seed, "text2pose/generator/init"))?;
        let critic = PoseCritic::new(DTConfig::new(embed_dim), &mut rng_for(seed, "text2pose/critic/init"))?;
        Ok(TextToPose { generator, critic, iteration: 0, seed, schema_id: None })
    }

    pub fn embed_dim(&self) -> usize {
        self.generator.cfg.embed_dim
    }

    /// Heatmaps for one embedding, mapped into `[0, 1]`.
    pub fn generate(&self, v: &TextEmbedding, noise: &[f32]) -> Result<HeatmapTensor> {
        let raw = gt_forward(v, noise, &self.generator)?;
        let s = self.generator.cfg.out_size;
        HeatmapTensor::from_signed(&raw, s, s)
    }

    pub fn to_checkpoint(&self, train: Option<&T2PTrainConfig>) -> Checkpoint {
        let config = serde_json::json!({
            "generator": self.generator.cfg,
            "critic": self.critic.cfg,
            "train": train,
            "schema_id": self.schema_id,
        });
        let mut c = Checkpoint::new(STAGE_TEXT2POSE, self.iteration, self.seed, config);
        c.push_store("generator", &self.generator.params);
        c.push_store("critic", &self.critic.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(STAGE_TEXT2POSE)?;
        let parse = |key: &str| ckpt.config.get(key).cloned().ok_or_else(|| Error::CorruptCheckpoint(format!("missing `{key}` config")));
        let gcfg: GTConfig = serde_json::from_value(parse("generator")?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let dcfg: DTConfig = serde_json::from_value(parse("critic")?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut rng = rng_for(0, "checkpoint/shell");
        let mut generator = PoseGenerator::new(gcfg, &mut rng)?;
        let mut critic = PoseCritic::new(dcfg, &mut rng)?;
        ckpt.load_store("generator", &mut generator.params)?;
        ckpt.load_store("critic", &mut critic.params)?;
        let schema_id = ckpt.config.get("schema_id").and_then(|v| v.as_str()).map(str::to_string);
        Ok(TextToPose { generator, critic, iteration: ckpt.iteration, seed: ckpt.seed, schema_id })
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn stack<'a>(samples: impl Iterator<Item = &'a T2PSample>) -> (Vec<f32>, Vec<f32>, usize) {
    let (mut hm, mut v, mut n) = (Vec::new(), Vec::new(), 0);
    for s in samples {
        hm.extend(s.heatmap.to_signed());
        v.extend(s.embedding.to_f32());
        n += 1;
    }
    (hm, v, n)
}

/// Trains generator and critic from scratch on `data`.
///
/// Each iteration is one critic update; the generator is updated after
/// every `critic_steps_per_gen`-th critic update.
pub fn train_t2p(data: &[T2PSample], cfg: &T2PTrainConfig) -> Result<(TextToPose, T2PTrace)> {
    let first = data.first().ok_or(Error::EmptyBatch)?;
    let model = TextToPose::new(first.embedding.dim(), cfg.seed)?;
    continue_t2p(model, data, cfg)
}

/// Continues training an existing model.
pub fn continue_t2p(mut model: TextToPose, data: &[T2PSample], cfg: &T2PTrainConfig) -> Result<(TextToPose, T2PTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let e = model.embed_dim();
    let hw = model.generator.cfg.out_size;
    for s in data {
        check_embedding(&s.embedding, e)?;
        if s.heatmap.height() != hw || s.heatmap.width() != hw {
            return Err(Error::shape(format!("training heatmaps must be {hw}x{hw}")));
        }
    }
    let mut rng = rng_for(cfg.seed, "text2pose/train");
    let mut opt_d = Adam::new(cfg.adam(), &model.critic.params);
    let mut opt_g = Adam::new(cfg.adam(), &model.generator.params);
    let (b, nz) = (cfg.batch_size, model.generator.cfg.noise_dim);
    let hm_shape = [b, NUM_JOINTS, hw, hw];
    let mut trace = T2PTrace::default();

    for it in 1..=cfg.iterations {
        let batch: Vec<&T2PSample> = (0..b).map(|_| data.choose(&mut rng).expect("non-empty")).collect();
        let (real, v, _) = stack(batch.iter().copied());
        let real = Tensor::from_vec(real, &hm_shape);
        let v = Tensor::from_vec(v, &[b, e]);
        let noise = Tensor::from_vec(gaussian(&mut rng, b * nz), &[b, nz]);
        let alpha: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();

        let fake = no_grad(|| model.generator.forward(&v, &noise));
        let critic = &model.critic;
        let l_d = critic_loss_tensor(&critic.forward(&real, &v), &critic.forward(&fake, &v));
        let gp = gradient_penalty(|x, c| critic.forward(x, c), &real, &fake, &v, &alpha)?;
        let objective = l_d.add(&gp.scale(cfg.gp_lambda));
        if !objective.all_finite() {
            return Err(Error::Training(format!("non-finite critic objective at iteration {it}")));
        }
        let grads = backward(&objective);
        opt_d.step(&mut model.critic.params, &grads);

        let mut row = T2PTraceRow { iteration: it, critic_loss: l_d.item(), gp: gp.item(), gen_loss: None };
        if it % cfg.critic_steps_per_gen == 0 {
            let pairs: Vec<(&T2PSample, &T2PSample)> =
                (0..b).map(|_| (data.choose(&mut rng).expect("non-empty"), data.choose(&mut rng).expect("non-empty"))).collect();
            let v1 = Tensor::from_vec(pairs.iter().flat_map(|p| p.0.embedding.to_f32()).collect(), &[b, e]);
            let v2 = Tensor::from_vec(pairs.iter().flat_map(|p| p.1.embedding.to_f32()).collect(), &[b, e]);
            let noise = Tensor::from_vec(gaussian(&mut rng, b * nz), &[b, nz]);
            let loss = generator_loss(&model.critic, &model.generator, &noise, &v, &v1, &v2);
            if !loss.all_finite() {
                return Err(Error::Training(format!("non-finite generator loss at iteration {it}")));
            }
            let grads = backward(&loss);
            opt_g.step(&mut model.generator.params, &grads);
            row.gen_loss = Some(loss.item());
        }
        if it % 100 == 0 {
            info!("text2pose iteration {it}: critic {:.4} gp {:.4}", row.critic_loss, row.gp);
        }
        debug!("text2pose {row:?}");
        trace.rows.push(row);
        model.iteration += 1;
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_gen(rng: &mut ChaCha8Rng) -> PoseGenerator {
        let cfg = GTConfig { embed_dim: 5, latent_dim: 8, noise_dim: 4, upconv_filters: vec![8, 4], out_channels: 18, out_size: 16 };
        PoseGenerator::new(cfg, rng).unwrap()
    }

    fn small_critic(rng: &mut ChaCha8Rng) -> PoseCritic {
        let cfg = DTConfig {
            embed_dim: 5,
            latent_dim: 6,
            conv_filters: vec![4, 8],
            tile: 4,
            point_conv_filters: 8,
            in_channels: 18,
            in_size: 16,
        };
        PoseCritic::new(cfg, rng).unwrap()
    }

    #[test]
    fn full_size_shapes() {
        let model = TextToPose::new(36, 0).unwrap();
        let v = TextEmbedding::dense(vec![0.5; 36]);
        let out = gt_forward(&v, &[0.1; 128], &model.generator).unwrap();
        assert_eq!(out.len(), 18 * 64 * 64);
        assert!(out.iter().all(|x| x.abs() < 1.0));
        let score = dt_forward(&out, &v, &model.critic).unwrap();
        assert!(score.is_finite());
        assert!(gt_forward(&TextEmbedding::dense(vec![0.0; 3]), &[0.0; 128], &model.generator).is_err());
    }

    #[test]
    fn zero_networks_output_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = small_gen(&mut rng);
        let mut d = small_critic(&mut rng);
        g.params.zero_all();
        d.params.zero_all();
        let v = TextEmbedding::dense(vec![1.0; 5]);
        assert!(gt_forward(&v, &[0.3; 4], &g).unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(dt_forward(&vec![0.2; 18 * 256], &v, &d).unwrap(), 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = small_gen(&mut rng);
        let v = TextEmbedding::dense(vec![1.0, 0.0, 1.0, 0.0, 1.0]);
        let a = gt_forward(&v, &[0.1, -0.2, 0.3, 0.0], &g).unwrap();
        let b = gt_forward(&v, &[0.1, -0.2, 0.3, 0.0], &g).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn final_layer_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = small_critic(&mut rng);
        let v = TextEmbedding::dense(vec![0.3, 0.1, 0.0, 1.0, 0.5]);
        let hm: Vec<f32> = (0..18 * 256).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let before = dt_forward(&hm, &v, &d).unwrap();
        let w = d.final_weight();
        let doubled = d.params.get(w).data().iter().map(|x| 2.0 * x).collect();
        d.params.set(w, doubled);
        let after = dt_forward(&hm, &v, &d).unwrap();
        assert!((after - 2.0 * before).abs() <= 1e-6 * before.abs().max(1.0), "{after} vs {before}");
    }

    #[test]
    fn loss_examples() {
        assert_eq!(critic_loss(&[2.0], &[1.0]).unwrap(), -1.0);
        assert_eq!(critic_loss(&[0.3, -4.0], &[0.3, -4.0]).unwrap(), 0.0);
        assert!(matches!(critic_loss(&[], &[]), Err(Error::EmptyBatch)));
        assert_eq!(critic_objective(-1.0, 4.0, 10.0), 39.0);
        assert_eq!(critic_objective(-2.5, 0.0, 10.0), -2.5);
        assert_eq!(generator_loss_from_scores(&[1.5, 1.5], &[1.5]).unwrap(), -3.0);
    }

    fn linear_critic(w: f32) -> impl Fn(&Tensor, &Tensor) -> Tensor {
        // Weight vector over (x, v) with norm w, split across both inputs.
        move |x: &Tensor, v: &Tensor| {
            let n = x.shape()[0];
            let dx = x.numel() / n;
            let dv = v.numel() / n;
            let per = w / ((dx + dv) as f32).sqrt();
            x.reshape(&[n, dx]).sample_sum().add(&v.sample_sum()).scale(per)
        }
    }

    #[test]
    fn penalty_of_linear_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real = Tensor::randn(&[3, 2, 4, 4], &mut rng);
        let fake = Tensor::randn(&[3, 2, 4, 4], &mut rng);
        let v = Tensor::randn(&[3, 5], &mut rng);
        for (w, expect) in [(0.5, 0.25), (1.0, 0.0), (3.0, 4.0)] {
            let gp = gradient_penalty(linear_critic(w), &real, &fake, &v, &[0.1, 0.5, 0.9]).unwrap().item();
            assert!((gp - expect).abs() < 1e-6, "w={w}: {gp}");
        }
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let real = Tensor::from_vec(vec![-0.0, 1.5, f32::MIN_POSITIVE, 2.0], &[2, 2]);
        let fake = Tensor::from_vec(vec![3.0, -0.0, 7.0, 1e-30], &[2, 2]);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&interpolate_samples(&real, &fake, &[1.0, 1.0])), bits(&real));
        assert_eq!(bits(&interpolate_samples(&real, &fake, &[0.0, 0.0])), bits(&fake));
    }

    #[test]
    fn generator_loss_of_constant_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = small_gen(&mut rng);
        let mut d = small_critic(&mut rng);
        d.params.zero_all();
        // Zero weights everywhere except a bias path would still give 0; a
        // constant critic c = 0 yields loss -2c = 0.
        let noise = Tensor::randn(&[2, 4], &mut rng);
        let v = Tensor::randn(&[2, 5], &mut rng);
        let loss = generator_loss(&d, &g, &noise, &v, &v, &v);
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn training_is_deterministic_and_counts_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hm = HeatmapTensor::from_values((0..18 * 64 * 64).map(|_| rng.random::<f32>()).collect(), 64, 64).unwrap();
        let data = vec![T2PSample { heatmap: hm, embedding: TextEmbedding::dense(vec![1.0, 0.0, 1.0]) }];
        let cfg = T2PTrainConfig { iterations: 7, batch_size: 1, critic_steps_per_gen: 3, ..Default::default() };
        let (_, a) = train_t2p(&data, &cfg).unwrap();
        let (_, b) = train_t2p(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 7);
        assert_eq!(a.generator_updates(), 7 / 3);
    }
}
