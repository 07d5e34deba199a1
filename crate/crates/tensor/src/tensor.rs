use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::kernels::{self, ConvGeom};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Returns whether operations on the current thread record a graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// The recorded operation that produced a tracked tensor.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor),
    Square(Tensor),
    Sqrt(Tensor),
    Recip(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    /// Backward multiplies the incoming gradient by a constant mask
    /// (leaky ReLU, abs, clamp).
    Masked(Tensor, Arc<[f32]>),
    SumAll(Tensor),
    BroadcastScalar(Tensor),
    Reshape(Tensor),
    MatMul {
        a: Tensor,
        b: Tensor,
        ta: bool,
        tb: bool,
    },
    ChannelSum(Tensor),
    ChannelBroadcast(Tensor),
    SpatialSum(Tensor),
    SpatialBroadcast(Tensor),
    SampleSum(Tensor),
    SampleBroadcast(Tensor),
    Concat(Vec<Tensor>),
    Narrow {
        input: Tensor,
        start: usize,
    },
    PadChannels {
        input: Tensor,
        start: usize,
    },
    Conv2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        x: Tensor,
        g: Tensor,
        stride: usize,
        pad: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            MatMul { a, b, .. } => vec![a, b],
            Scale(a, _)
            | AddScalar(a)
            | Square(a)
            | Sqrt(a)
            | Recip(a)
            | Exp(a)
            | Ln(a)
            | Tanh(a)
            | Sigmoid(a)
            | Masked(a, _)
            | SumAll(a)
            | BroadcastScalar(a)
            | Reshape(a)
            | ChannelSum(a)
            | ChannelBroadcast(a)
            | SpatialSum(a)
            | SpatialBroadcast(a)
            | SampleSum(a)
            | SampleBroadcast(a) => vec![a],
            Narrow { input, .. } | PadChannels { input, .. } => vec![input],
            Concat(parts) => parts.iter().collect(),
            Conv2d { x, w, .. } | ConvTranspose2d { x, w, .. } => vec![x, w],
            ConvWeightGrad { x, g, .. } => vec![x, g],
        }
    }
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    pub(crate) op: Option<Op>,
    pub(crate) requires_grad: bool,
}

/// An immutable, reference-counted `f32` tensor in row-major layout.
///
/// Image-like tensors use `N × C × H × W`; matrices are `rows × cols`.
/// A tensor that requires grad records the operation that produced it so
/// [`crate::grad`] can walk the graph backwards.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

/// Largest `f32` below one.
pub const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.0.shape).field("requires_grad", &self.0.requires_grad).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f32>, op: Option<Op>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), shape, data, op, requires_grad }))
    }

    /// Builds a result tensor, recording `op` only when grad mode is on and
    /// some input is tracked.
    fn result(shape: Vec<usize>, data: Vec<f32>, op: Op) -> Tensor {
        let tracked = is_grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if tracked {
            Tensor::make(shape, data, Some(op), true)
        } else {
            Tensor::make(shape, data, None, false)
        }
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), data.len(), "data length {} does not match shape {:?}", data.len(), shape);
        Tensor::make(shape.to_vec(), data, None, false)
    }

    /// A leaf that gradients are accumulated into.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), data.len());
        Tensor::make(shape.to_vec(), data, None, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::from_vec(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(vec![value], &[1])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor::from_vec(data, shape)
    }

    /// Marks a copy of this tensor as a gradient leaf.
    pub fn requires_grad_leaf(&self) -> Tensor {
        Tensor::make(self.0.shape.clone(), self.0.data.clone(), None, true)
    }

    /// A constant copy cut from the graph.
    pub fn detach(&self) -> Tensor {
        if !self.requires_grad() {
            return self.clone();
        }
        Tensor::make(self.0.shape.clone(), self.0.data.clone(), None, false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.0.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-d tensor, got shape {:?}", self.0.shape),
        }
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    fn assert_same_shape(&self, other: &Tensor, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch {:?} vs {:?}", self.shape(), other.shape());
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Vec<f32> {
        self.0.data.iter().map(|&v| f(v)).collect()
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        self.0.data.iter().zip(other.0.data.iter()).map(|(&a, &b)| f(a, b)).collect()
    }

    // ----- elementwise -----

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let data = self.zip(other, |a, b| a + b);
        Tensor::result(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let data = self.zip(other, |a, b| a - b);
        Tensor::result(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let data = self.zip(other, |a, b| a * b);
        Tensor::result(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.map(|v| v * c);
        Tensor::result(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.map(|v| v + c);
        Tensor::result(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        let data = self.map(|v| v * v);
        Tensor::result(self.shape().to_vec(), data, Op::Square(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.map(f32::sqrt);
        Tensor::result(self.shape().to_vec(), data, Op::Sqrt(self.clone()))
    }

    pub fn recip(&self) -> Tensor {
        let data = self.map(|v| 1.0 / v);
        Tensor::result(self.shape().to_vec(), data, Op::Recip(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.map(f32::exp);
        Tensor::result(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        let data = self.map(f32::ln);
        Tensor::result(self.shape().to_vec(), data, Op::Ln(self.clone()))
    }

    /// Saturates at the nearest representable values inside `(-1, 1)`.
    pub fn tanh(&self) -> Tensor {
        let data = self.map(|v| v.tanh().clamp(-BELOW_ONE, BELOW_ONE));
        Tensor::result(self.shape().to_vec(), data, Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.map(|v| 1.0 / (1.0 + (-v).exp()));
        Tensor::result(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    /// `y = x * mask`, with the mask treated as a constant.
    pub fn mul_mask(&self, mask: Arc<[f32]>) -> Tensor {
        assert_eq!(mask.len(), self.numel());
        let data = self.0.data.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        Tensor::result(self.shape().to_vec(), data, Op::Masked(self.clone(), mask))
    }

    fn masked_unary(&self, f: impl Fn(f32) -> (f32, f32)) -> Tensor {
        let (data, mask): (Vec<f32>, Vec<f32>) = self.0.data.iter().map(|&v| f(v)).unzip();
        Tensor::result(self.shape().to_vec(), data, Op::Masked(self.clone(), mask.into()))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        self.masked_unary(|v| if v > 0.0 { (v, 1.0) } else { (v * slope, slope) })
    }

    pub fn abs(&self) -> Tensor {
        self.masked_unary(|v| {
            if v > 0.0 {
                (v, 1.0)
            } else if v < 0.0 {
                (-v, -1.0)
            } else {
                (0.0, 0.0)
            }
        })
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping applied.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.masked_unary(|v| {
            if v < lo {
                (lo, 0.0)
            } else if v > hi {
                (hi, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }

    // ----- reductions and broadcasts -----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.0.data.iter().map(|&v| v as f64).sum();
        Tensor::result(vec![1], vec![s as f32], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), 1, "broadcast_scalar needs a single element");
        let data = vec![self.0.data[0]; numel(shape)];
        Tensor::result(shape.to_vec(), data, Op::BroadcastScalar(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {:?}", self.shape(), shape);
        Tensor::result(shape.to_vec(), self.0.data.clone(), Op::Reshape(self.clone()))
    }

    /// Splits the shape into (samples, channels, trailing elements).
    fn nc_rest(&self) -> (usize, usize, usize) {
        let s = self.shape();
        assert!(s.len() >= 2, "expected at least 2 dims, got {s:?}");
        (s[0], s[1], s[2..].iter().product())
    }

    /// Sums `N × C × …` down to a length-`C` vector.
    pub fn channel_sum(&self) -> Tensor {
        let (n, c, rest) = self.nc_rest();
        let mut acc = vec![0f64; c];
        for i in 0..n {
            for (ch, a) in acc.iter_mut().enumerate() {
                let base = (i * c + ch) * rest;
                *a += self.0.data[base..base + rest].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        Tensor::result(vec![c], data, Op::ChannelSum(self.clone()))
    }

    /// Expands a length-`C` vector to `shape = N × C × …`.
    pub fn channel_broadcast(&self, shape: &[usize]) -> Tensor {
        assert!(shape.len() >= 2 && self.shape() == [shape[1]]);
        let (n, c) = (shape[0], shape[1]);
        let rest: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * c * rest);
        for _ in 0..n {
            for ch in 0..c {
                data.extend(std::iter::repeat_n(self.0.data[ch], rest));
            }
        }
        Tensor::result(shape.to_vec(), data, Op::ChannelBroadcast(self.clone()))
    }

    /// Sums `N × C × H × W` over the spatial axes to `N × C`.
    pub fn spatial_sum(&self) -> Tensor {
        let (n, c, rest) = self.nc_rest();
        let data = self.0.data.chunks(rest).map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
        Tensor::result(vec![n, c], data, Op::SpatialSum(self.clone()))
    }

    /// Tiles an `N × C` tensor to `N × C × H × W`.
    pub fn spatial_broadcast(&self, h: usize, w: usize) -> Tensor {
        let (n, c) = match self.shape() {
            &[n, c] => (n, c),
            s => panic!("spatial_broadcast expects N×C, got {s:?}"),
        };
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in self.0.data.iter() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        Tensor::result(vec![n, c, h, w], data, Op::SpatialBroadcast(self.clone()))
    }

    /// Sums every sample to one value: `N × …` to `N`.
    pub fn sample_sum(&self) -> Tensor {
        let n = self.shape()[0];
        let per = self.numel() / n.max(1);
        let data = self.0.data.chunks(per.max(1)).map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
        Tensor::result(vec![n], data, Op::SampleSum(self.clone()))
    }

    /// Expands a length-`N` vector so each sample of `shape` holds its value.
    pub fn sample_broadcast(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.shape(), [shape[0]]);
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(shape[0] * per);
        for &v in self.0.data.iter() {
            data.extend(std::iter::repeat_n(v, per));
        }
        Tensor::result(shape.to_vec(), data, Op::SampleBroadcast(self.clone()))
    }

    // ----- structural -----

    /// Concatenates along axis 1 (features of a matrix, channels of an image).
    pub fn concat(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let n = first[0];
        let rest: usize = first[2..].iter().product();
        let mut total_c = 0;
        for p in parts {
            let s = p.shape();
            assert!(s.len() == first.len() && s[0] == n && s[2..] == first[2..], "concat: incompatible shapes {first:?} and {s:?}");
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * rest);
        for i in 0..n {
            for p in parts {
                let block = p.shape()[1] * rest;
                data.extend_from_slice(&p.0.data[i * block..(i + 1) * block]);
            }
        }
        let mut shape = first.to_vec();
        shape[1] = total_c;
        Tensor::result(shape, data, Op::Concat(parts.to_vec()))
    }

    /// Slice `[start, start + len)` of axis 1.
    pub fn narrow(&self, start: usize, len: usize) -> Tensor {
        let (n, c, rest) = self.nc_rest();
        assert!(start + len <= c, "narrow {start}+{len} exceeds {c}");
        let mut data = Vec::with_capacity(n * len * rest);
        for i in 0..n {
            let base = (i * c + start) * rest;
            data.extend_from_slice(&self.0.data[base..base + len * rest]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = len;
        Tensor::result(shape, data, Op::Narrow { input: self.clone(), start })
    }

    /// Embeds this tensor at offset `start` of a zero tensor with `total`
    /// entries along axis 1. Adjoint of [`Tensor::narrow`].
    pub fn pad_channels(&self, start: usize, total: usize) -> Tensor {
        let (n, c, rest) = self.nc_rest();
        assert!(start + c <= total);
        let mut data = vec![0f32; n * total * rest];
        for i in 0..n {
            let dst = (i * total + start) * rest;
            data[dst..dst + c * rest].copy_from_slice(&self.0.data[i * c * rest..(i + 1) * c * rest]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = total;
        Tensor::result(shape, data, Op::PadChannels { input: self.clone(), start })
    }

    // ----- linear algebra -----

    /// `op(a) · op(b)` for 2-d tensors, where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (ar, ac) = match self.shape() {
            &[r, c] => (r, c),
            s => panic!("matmul expects 2-d lhs, got {s:?}"),
        };
        let (br, bc) = match other.shape() {
            &[r, c] => (r, c),
            s => panic!("matmul expects 2-d rhs, got {s:?}"),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(), other.shape());
        let mut out = vec![0f32; m * n];
        kernels::gemm(m, k, n, self.data(), ta, other.data(), tb, &mut out, 0.0);
        Tensor::result(vec![m, n], out, Op::MatMul { a: self.clone(), b: other.clone(), ta, tb })
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    /// Cross-correlation of `N × Cin × H × W` input with a
    /// `Cout × Cin × k × k` kernel.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = self.dims4();
        let (cout, wcin, k, k2) = w.dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, kernel {wcin}");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than padded input");
        let g = ConvGeom::new(cin, h, wd, cout, k, stride, pad);
        let out = kernels::conv2d_forward(&g, n, self.data(), w.data());
        Tensor::result(vec![n, cout, g.out_h, g.out_w], out, Op::Conv2d { x: self.clone(), w: w.clone(), stride, pad })
    }

    /// Transposed convolution of `N × A × h × w` input with an
    /// `A × B × k × k` kernel, producing `N × B × out_h × out_w`.
    ///
    /// This is the adjoint of [`Tensor::conv2d`] with the same kernel, so
    /// `out_h`/`out_w` must be a size that the forward convolution maps
    /// back to `h × w`.
    pub fn conv_transpose2d_sized(&self, w: &Tensor, stride: usize, pad: usize, out_h: usize, out_w: usize) -> Tensor {
        let (n, a, h, wd) = self.dims4();
        let (wa, b, k, _) = w.dims4();
        assert_eq!(a, wa, "conv_transpose2d channel mismatch: input {a}, kernel {wa}");
        let g = ConvGeom::new(b, out_h, out_w, a, k, stride, pad);
        assert!(g.out_h == h && g.out_w == wd, "conv_transpose2d: output {out_h}x{out_w} does not map back to {h}x{wd}");
        let out = kernels::conv2d_backward_input(&g, n, self.data(), w.data());
        Tensor::result(vec![n, b, out_h, out_w], out, Op::ConvTranspose2d { x: self.clone(), w: w.clone(), stride, pad })
    }

    /// Transposed convolution with the natural output size
    /// `(h - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&self, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (_, _, h, wd) = self.dims4();
        let k = w.shape()[2];
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        self.conv_transpose2d_sized(w, stride, pad, oh, ow)
    }

    /// Gradient of `conv2d(x, ·)` with respect to the kernel, contracted
    /// against `g`: returns `Cout × Cin × k × k`.
    pub fn conv_weight_grad(x: &Tensor, g: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (gn, cout, gh, gw) = g.dims4();
        assert_eq!(n, gn);
        let geom = ConvGeom::new(cin, h, wd, cout, k, stride, pad);
        assert!(geom.out_h == gh && geom.out_w == gw, "conv_weight_grad geometry mismatch");
        let out = kernels::conv2d_backward_weight(&geom, n, x.data(), g.data());
        Tensor::result(vec![cout, cin, k, k], out, Op::ConvWeightGrad { x: x.clone(), g: g.clone(), stride, pad })
    }
}
