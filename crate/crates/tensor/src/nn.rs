//! Parameter storage and the handful of layers the pose networks are built from.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::Tensor;

/// Handle to one parameter block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How to draw the initial values of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal {
        mean: f32,
        std: f32,
    },
    Constant(f32),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform,
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, n: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
        match self {
            Init::Constant(c) => vec![c; n],
            Init::Normal { mean, std } => {
                let dist = Normal::new(mean, std).expect("finite normal parameters");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::FanInUniform => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        }
    }
}

/// Initialisation used for every layer of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScheme {
    pub weight: Init,
    pub bias: Init,
    pub norm_scale: Init,
}

impl InitScheme {
    /// Weights from N(0, 0.02), batch-norm scales from N(1, 0.02), zero biases.
    pub fn gan() -> Self {
        InitScheme {
            weight: Init::Normal { mean: 0.0, std: 0.02 },
            bias: Init::Constant(0.0),
            norm_scale: Init::Normal { mean: 1.0, std: 0.02 },
        }
    }

    pub fn fan_in_uniform() -> Self {
        InitScheme { weight: Init::FanInUniform, bias: Init::FanInUniform, norm_scale: Init::Constant(1.0) }
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Blocks keep their insertion order, which is also the serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, fan_in: usize, rng: &mut R) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let n: usize = shape.iter().product();
        let data = init.sample(n, fan_in, rng);
        self.names.push(name);
        self.values.push(Tensor::param(data, shape));
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Replaces the values of a block; the new tensor is a fresh leaf.
    pub fn set(&mut self, id: ParamId, data: Vec<f32>) {
        let shape = self.values[id.0].shape().to_vec();
        self.values[id.0] = Tensor::param(data, &shape);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// `(name, shape, values)` for every block in insertion order.
    pub fn blocks(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.names.iter().zip(&self.values).map(|(n, t)| (n.as_str(), t.shape(), t.data()))
    }

    /// Overwrites blocks by name. Every block of the store must be supplied
    /// exactly once with a matching shape.
    pub fn load_blocks<'a>(&mut self, blocks: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>) -> Result<(), String> {
        let mut seen = vec![false; self.values.len()];
        for (name, shape, data) in blocks {
            let id = self.find(name).ok_or_else(|| format!("unexpected parameter block `{name}`"))?;
            if self.values[id.0].shape() != shape {
                return Err(format!("parameter `{name}` has shape {:?}, expected {:?}", shape, self.values[id.0].shape()));
            }
            if seen[id.0] {
                return Err(format!("parameter `{name}` supplied twice"));
            }
            seen[id.0] = true;
            self.set(id, data.to_vec());
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("missing parameter block `{}`", self.names[i]));
        }
        Ok(())
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for i in 0..self.values.len() {
            let n = self.values[i].numel();
            self.set(ParamId(i), vec![0.0; n]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: InitScheme,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), &[out_dim, in_dim], init.weight, in_dim, rng);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), &[out_dim], init.bias, in_dim, rng));
        Linear { weight, bias }
    }

    /// `x: N × in` to `N × out`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let y = x.matmul_t(ps.get(self.weight), false, true);
        match self.bias {
            Some(b) => y.add(&ps.get(b).channel_broadcast(y.shape())),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: InitScheme,
    ) -> Self {
        let fan_in = in_c * k * k;
        let weight = ps.add(format!("{name}.weight"), &[out_c, in_c, k, k], init.weight, fan_in, rng);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), &[out_c], init.bias, fan_in, rng));
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let y = x.conv2d(ps.get(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => y.add(&ps.get(b).channel_broadcast(y.shape())),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: InitScheme,
    ) -> Self {
        let fan_in = out_c * k * k;
        let weight = ps.add(format!("{name}.weight"), &[in_c, out_c, k, k], init.weight, fan_in, rng);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), &[out_c], init.bias, fan_in, rng));
        ConvTranspose2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let y = x.conv_transpose2d(ps.get(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => y.add(&ps.get(b).channel_broadcast(y.shape())),
            None => y,
        }
    }
}

/// Batch normalization using the statistics of the current batch.
///
/// No running averages are kept: training and inference normalize the same
/// way, over samples and spatial positions of each channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, name: &str, channels: usize, init: InitScheme) -> Self {
        let scale = ps.add(format!("{name}.scale"), &[channels], init.norm_scale, channels, rng);
        let shift = ps.add(format!("{name}.shift"), &[channels], Init::Constant(0.0), channels, rng);
        BatchNorm { scale, shift, eps: 1e-5 }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        let per_channel = (x.numel() / shape[1]) as f32;
        let mean = x.channel_sum().scale(1.0 / per_channel);
        let centered = x.sub(&mean.channel_broadcast(&shape));
        let var = centered.square().channel_sum().scale(1.0 / per_channel);
        let inv_std = var.add_scalar(self.eps).sqrt().recip();
        let gain = inv_std.mul(ps.get(self.scale));
        centered.mul(&gain.channel_broadcast(&shape)).add(&ps.get(self.shift).channel_broadcast(&shape))
    }
}

/// Normalizes every channel of every sample over its spatial positions.
/// Has no parameters.
pub fn instance_norm(x: &Tensor, eps: f32) -> Tensor {
    let (_, _, h, w) = x.dims4();
    let inv_hw = 1.0 / (h * w) as f32;
    let mean = x.spatial_sum().scale(inv_hw);
    let centered = x.sub(&mean.spatial_broadcast(h, w));
    let var = centered.square().spatial_sum().scale(inv_hw);
    centered.mul(&var.add_scalar(eps).sqrt().recip().spatial_broadcast(h, w))
}

/// `x + bn(conv(relu(bn(conv(x)))))` with 3×3 bias-free convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, name: &str, channels: usize, init: InitScheme) -> Self {
        ResBlock {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1, false, init),
            bn1: BatchNorm::new(ps, rng, &format!("{name}.bn1"), channels, init),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1, false, init),
            bn2: BatchNorm::new(ps, rng, &format!("{name}.bn2"), channels, init),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let h = self.bn1.forward(ps, &self.conv1.forward(ps, x)).relu();
        let h = self.bn2.forward(ps, &self.conv2.forward(ps, &h));
        x.add(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instance_norm_standardizes_each_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 4, 5], &mut rng).scale(3.0).add_scalar(2.0);
        let y = instance_norm(&x, 0.0);
        for map in y.data().chunks(20) {
            let m: f32 = map.iter().sum::<f32>() / 20.0;
            let v: f32 = map.iter().map(|a| (a - m).powi(2)).sum::<f32>() / 20.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, &mut rng, "bn", 3, InitScheme::fan_in_uniform());
        let x = Tensor::randn(&[4, 3, 5, 5], &mut rng).scale(3.0).add_scalar(2.0);
        let y = bn.forward(&ps, &x);
        let (n, c, h, w) = y.dims4();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| {
                    let base = (i * c + ch) * h * w;
                    y.data()[base..base + h * w].to_vec()
                })
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn load_blocks_requires_every_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        Linear::new(&mut ps, &mut rng, "fc", 2, 3, true, InitScheme::gan());
        let w = vec![0.0; 6];
        let err = ps.load_blocks([("fc.weight", &[3usize, 2][..], &w[..])]).unwrap_err();
        assert!(err.contains("fc.bias"), "{err}");
    }

    #[test]
    fn linear_matches_manual_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let fc = Linear::new(&mut ps, &mut rng, "fc", 3, 2, true, InitScheme::fan_in_uniform());
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0], &[2, 3]);
        let y = fc.forward(&ps, &x);
        let w = ps.get(fc.weight).data();
        let b = ps.get(fc.bias.unwrap()).data();
        for i in 0..2 {
            for o in 0..2 {
                let expect: f32 = (0..3).map(|j| x.data()[i * 3 + j] * w[o * 3 + j]).sum::<f32>() + b[o];
                assert!((y.data()[i * 2 + o] - expect).abs() < 1e-6);
            }
        }
    }
}
