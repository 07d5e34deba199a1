//! Facial keypoint refinement: a small MLP that denoises the five facial
//! joints in the nose-centred, `±1`-normalized frame.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tips_tensor::nn::{InitScheme, Linear, ParamStore};
use tips_tensor::optim::Sgd;
use tips_tensor::{backward, no_grad, Tensor};

use crate::checkpoint::{Checkpoint, STAGE_REFINER};
use crate::error::{Error, Result};
use crate::pose::{denormalize_facial, normalize_facial, Joint, Keypoint, KeypointSet};
use crate::seed::rng_for;

pub const FACE_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub hidden: Vec<usize>,
    pub lr: f32,
    /// Standard deviation of the Gaussian noise added to every normalized coordinate.
    pub perturbation_sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig { hidden: vec![128, 128, 128], lr: 1e-2, perturbation_sigma: 0.05, epochs: 200, batch_size: 1, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FacialRefiner {
    pub hidden: Vec<usize>,
    pub params: ParamStore,
    layers: Vec<Linear>,
    pub iteration: u64,
    pub seed: u64,
}

impl FacialRefiner {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut ps = ParamStore::new();
        let mut dims = vec![FACE_DIM];
        dims.extend_from_slice(hidden);
        dims.push(FACE_DIM);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut ps, rng, &format!("fc{i}"), w[0], w[1], true, InitScheme::fan_in_uniform()))
            .collect();
        FacialRefiner { hidden: hidden.to_vec(), params: ps, layers, iteration: 0, seed: 0 }
    }

    /// `N × 10` to `N × 10` in `(-1, 1)`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x.clone(), |h, (i, l)| {
            let y = l.forward(&self.params, &h);
            if i == last {
                y.tanh()
            } else {
                y.relu()
            }
        })
    }

    pub fn refine(&self, vec10: &[f64; FACE_DIM]) -> Result<[f64; FACE_DIM]> {
        if vec10.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKeypoints("non-finite facial vector".into()));
        }
        let x = Tensor::from_vec(vec10.iter().map(|&v| v as f32).collect(), &[1, FACE_DIM]);
        let y = no_grad(|| self.forward(&x));
        Ok(std::array::from_fn(|i| y.data()[i] as f64))
    }

    pub fn to_checkpoint(&self, train: Option<&RefinerConfig>) -> Checkpoint {
        let config = serde_json::json!({ "hidden": self.hidden, "train": train });
        let mut c = Checkpoint::new(STAGE_REFINER, self.iteration, self.seed, config);
        c.push_store("refiner", &self.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(STAGE_REFINER)?;
        let hidden: Vec<usize> = ckpt
            .config
            .get("hidden")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| Error::CorruptCheckpoint("missing `hidden` config".into()))?;
        let mut r = FacialRefiner::new(&hidden, &mut rng_for(0, "checkpoint/shell"));
        ckpt.load_store("refiner", &mut r.params)?;
        r.iteration = ckpt.iteration;
        r.seed = ckpt.seed;
        Ok(r)
    }
}

/// Mean squared error per coordinate, as recorded during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MseTrace {
    pub steps: Vec<f32>,
}

impl MseTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mse\n");
        for (i, m) in self.steps.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, m));
        }
        s
    }
}

fn perturb<R: Rng + ?Sized>(v: &[f64; FACE_DIM], noise: Option<&Normal<f64>>, rng: &mut R) -> [f64; FACE_DIM] {
    match noise {
        Some(n) => std::array::from_fn(|i| v[i] + n.sample(rng)),
        None => *v,
    }
}

/// Trains a refiner to map perturbed facial vectors back to the clean ones.
pub fn train_refiner(clean: &[[f64; FACE_DIM]], cfg: &RefinerConfig) -> Result<(FacialRefiner, MseTrace)> {
    if clean.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.batch_size == 0 || !(cfg.perturbation_sigma >= 0.0) {
        return Err(Error::Config("refiner needs batch_size >= 1 and a non-negative sigma".into()));
    }
    let mut model = FacialRefiner::new(&cfg.hidden, &mut rng_for(cfg.seed, "refiner/init"));
    model.seed = cfg.seed;
    let mut rng = rng_for(cfg.seed, "refiner/train");
    let noise = (cfg.perturbation_sigma > 0.0).then(|| Normal::new(0.0, cfg.perturbation_sigma).expect("valid sigma"));
    let sgd = Sgd { lr: cfg.lr };
    let mut order: Vec<usize> = (0..clean.len()).collect();
    let mut trace = MseTrace::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len() * FACE_DIM);
            let mut targets = Vec::with_capacity(chunk.len() * FACE_DIM);
            for &i in chunk {
                inputs.extend(perturb(&clean[i], noise.as_ref(), &mut rng).map(|v| v as f32));
                targets.extend(clean[i].map(|v| v as f32));
            }
            let x = Tensor::from_vec(inputs, &[chunk.len(), FACE_DIM]);
            let y = Tensor::from_vec(targets, &[chunk.len(), FACE_DIM]);
            let loss = model.forward(&x).sub(&y).square().mean_all();
            let mse = loss.item();
            if !mse.is_finite() || mse > 1e3 {
                return Err(Error::Training(format!("refiner diverged (MSE {mse}) in epoch {epoch}")));
            }
            sgd.step(&mut model.params, &backward(&loss));
            model.iteration += 1;
            trace.steps.push(mse);
        }
        if (epoch + 1) % 50 == 0 {
            info!("refiner epoch {}: last MSE {:.6}", epoch + 1, trace.steps.last().copied().unwrap_or(0.0));
        }
    }
    Ok((model, trace))
}

/// Per-coordinate MSE of perturbed inputs and of their refinements against
/// the clean vectors, with noise drawn from `seed`.
pub fn denoising_mse(model: &FacialRefiner, clean: &[[f64; FACE_DIM]], sigma: f64, seed: u64) -> Result<(f64, f64)> {
    if clean.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = rng_for(seed, "refiner/eval");
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (mut pre, mut post) = (0.0, 0.0);
    for c in clean {
        let noisy = perturb(c, Some(&noise), &mut rng);
        let out = model.refine(&noisy)?;
        for i in 0..FACE_DIM {
            pre += (noisy[i] - c[i]).powi(2);
            post += (out[i] - c[i]).powi(2);
        }
    }
    let n = (clean.len() * FACE_DIM) as f64;
    Ok((pre / n, post / n))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefineOutcome {
    Applied,
    /// Refinement did not run; the keypoints are returned unchanged.
    Skipped(String),
}

/// Replaces the facial joints with their refined positions, clamped to the
/// frame. Other joints and all visibility flags are untouched.
pub fn apply_refinement(kps: &KeypointSet, model: &FacialRefiner) -> Result<(KeypointSet, RefineOutcome)> {
    let (vec10, params) = match normalize_facial(kps) {
        Ok(v) => v,
        Err(e @ (Error::RefinementInapplicable(_) | Error::DegenerateFace)) => {
            return Ok((kps.clone(), RefineOutcome::Skipped(e.to_string())))
        }
        Err(e) => return Err(e),
    };
    let refined = denormalize_facial(&model.refine(&vec10)?, &params);
    let (w, h) = (kps.width() as f64, kps.height() as f64);
    let mut joints = kps.joints().to_vec();
    for (j, (x, y)) in Joint::FACIAL.iter().zip(refined) {
        joints[j.index()] = Keypoint { x: x.clamp(0.0, w - 1.0), y: y.clamp(0.0, h - 1.0), visible: true };
    }
    Ok((KeypointSet::from_vec(joints, kps.width(), kps.height())?, RefineOutcome::Applied))
}
