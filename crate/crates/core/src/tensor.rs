//! Dense float tensors and the layer kernels the segmentation network needs:
//! 3x3 same-padded convolution, batch normalization, ReLU, 2x2 max pooling
//! with memorized indices, index-driven unpooling, per-pixel softmax, the
//! class-weighted cross-entropy loss, MSRA initialization and SGD with
//! momentum. Forward and backward passes are plain functions of their inputs;
//! the only mutable state is what the caller passes in explicitly.
//!
//! Kernels are generic over the element type. Production paths run `f32`;
//! gradient checks can run the identical code at `f64`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Element types the kernels accept.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn scalar<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts to scalar type")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, buffer has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{context}: expected a rank-4 tensor, got shape {shape:?}")]
    NotRank4 {
        context: &'static str,
        shape: Vec<usize>,
    },
    #[error("convolution kernels must be 3x3, got {kh}x{kw}")]
    KernelSize { kh: usize, kw: usize },
    #[error("input has {input} channels but weights expect {weights}")]
    ChannelMismatch { input: usize, weights: usize },
    #[error("{context}: expected {expected} channels, got {actual}")]
    ChannelCount {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("max pooling needs even spatial dims, got {h}x{w}")]
    OddPoolInput { h: usize, w: usize },
    #[error("batch norm training mode needs >= 2 values per channel, got {count}")]
    DegenerateBatch { count: usize },
    #[error("pool index {index} invalid for {h}x{w} plane at pooled cell ({row}, {col})")]
    CorruptPoolIndex {
        index: usize,
        h: usize,
        w: usize,
        row: usize,
        col: usize,
    },
    #[error("label {label} at pixel {index} is not a valid class id")]
    BadLabel { label: u8, index: usize },
    #[error("{context}: buffer length {actual}, expected {expected}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} must satisfy {requirement}, got {value}")]
    BadHyper {
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

/// Dense N-dimensional array, row-major. Activations are [batch, channels,
/// height, width]; convolution weights are [out_ch, in_ch, kh, kw].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self, context: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(TensorError::NotRank4 {
                context,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().expect("finite")).expect("fits"))
                .collect(),
        }
    }
}

/// Argmax positions memorized by a 2x2 max pool: one flat offset into the
/// pre-pool input plane per pooled element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    shape: [usize; 4],
    indices: Vec<usize>,
}

impl PoolIndices {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Per-channel batch normalization parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

pub const BATCHNORM_EPSILON: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNormState<T> {
    /// gamma 1, beta 0, running mean 0, running variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: scalar(BATCHNORM_EPSILON),
            momentum: scalar(BATCHNORM_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        let c = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|&x| U::from_f64(x.to_f64().expect("finite")).expect("fits"))
                .collect()
        };
        BatchNormState {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: U::from_f64(self.epsilon.to_f64().unwrap()).unwrap(),
            momentum: U::from_f64(self.momentum.to_f64().unwrap()).unwrap(),
        }
    }
}

/// Batch statistics captured by a training-mode forward pass; the matching
/// backward pass needs them.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    let (n, cin, h, w) = input.dims4("conv2d input")?;
    let (cout, wcin, kh, kw) = weights.dims4("conv2d weights")?;
    if kh != 3 || kw != 3 {
        return Err(TensorError::KernelSize { kh, kw });
    }
    if cin != wcin {
        return Err(TensorError::ChannelMismatch {
            input: cin,
            weights: wcin,
        });
    }
    if bias.len() != cout {
        return Err(TensorError::LengthMismatch {
            context: "conv2d bias",
            expected: cout,
            actual: bias.len(),
        });
    }
    Ok((n, cin, h, w, cout))
}

/// Valid output-row/col window for kernel tap `k` (0..3) over a dim of size
/// `d` with zero padding 1: positions whose sampled input cell is in bounds.
#[inline]
fn tap_window(k: usize, d: usize) -> (usize, usize) {
    match k {
        0 => (1, d),
        1 => (0, d),
        _ => (0, d.saturating_sub(1)),
    }
}

/// 3x3 convolution, stride 1, zero padding 1; output spatial dims equal input
/// dims. `out[n,co,y,x] = bias[co] + sum in[n,ci,y+ky-1,x+kx-1] * w[co,ci,ky,kx]`
/// with out-of-bounds input reading as zero.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>, TensorError> {
    let (n, cin, h, w, cout) = check_conv_shapes(input, weights, bias)?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let inp = input.data();
    let wts = weights.data();
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let out_plane = &mut od[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let in_plane = &inp[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3 {
                    let (y0, y1) = tap_window(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = tap_window(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wts[wbase + ky * 3 + kx];
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            let orow = &mut out_plane[y * w + x0..y * w + x1];
                            let irow = &in_plane[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact analytic gradients of [`conv2d_forward`] with respect to input,
/// weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, TensorError> {
    let (n, cin, h, w) = input.dims4("conv2d input")?;
    let (cout, wcin, kh, kw) = weights.dims4("conv2d weights")?;
    if kh != 3 || kw != 3 {
        return Err(TensorError::KernelSize { kh, kw });
    }
    if cin != wcin {
        return Err(TensorError::ChannelMismatch {
            input: cin,
            weights: wcin,
        });
    }
    if grad_out.shape() != [n, cout, h, w] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d grad_out",
            expected: vec![n, cout, h, w],
            actual: grad_out.shape().to_vec(),
        });
    }

    let plane = h * w;
    let inp = input.data();
    let wts = weights.data();
    let gout = grad_out.data();

    let mut grad_bias = vec![T::zero(); cout];
    for b in 0..n {
        for co in 0..cout {
            let gplane = &gout[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            let mut acc = T::zero();
            for &g in gplane {
                acc += g;
            }
            grad_bias[co] += acc;
        }
    }

    let mut grad_weights = Tensor::zeros(&[cout, cin, 3, 3]);
    {
        let gw = grad_weights.data_mut();
        for b in 0..n {
            for co in 0..cout {
                let gplane = &gout[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                for ci in 0..cin {
                    let in_plane = &inp[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                    let wbase = (co * cin + ci) * 9;
                    for ky in 0..3 {
                        let (y0, y1) = tap_window(ky, h);
                        for kx in 0..3 {
                            let (x0, x1) = tap_window(kx, w);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let iy = y + ky - 1;
                                let grow = &gplane[y * w + x0..y * w + x1];
                                let irow = &in_plane[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                                for (&g, &i) in grow.iter().zip(irow) {
                                    acc += g * i;
                                }
                            }
                            gw[wbase + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
    }

    let mut grad_input = Tensor::zeros(&[n, cin, h, w]);
    {
        let gi = grad_input.data_mut();
        for b in 0..n {
            for ci in 0..cin {
                let gi_plane = &mut gi[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for co in 0..cout {
                    let gplane = &gout[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                    let wbase = (co * cin + ci) * 9;
                    for ky in 0..3 {
                        let (y0, y1) = tap_window(ky, h);
                        for kx in 0..3 {
                            let (x0, x1) = tap_window(kx, w);
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = wts[wbase + ky * 3 + kx];
                            for y in y0..y1 {
                                let iy = y + ky - 1;
                                let grow = &gplane[y * w + x0..y * w + x1];
                                let irow =
                                    &mut gi_plane[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                                for (i, &g) in irow.iter_mut().zip(grow) {
                                    *i += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// Batch normalization over [N, C, H, W]. Training mode normalizes each
/// channel by its batch mean and population variance, then updates the
/// running statistics with `momentum` weight on the new batch. Inference mode
/// normalizes by the running statistics and leaves the state untouched.
///
/// Returns the output and, in training mode, the batch statistics the
/// backward pass needs.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    training: bool,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>), TensorError> {
    let (n, c, h, w) = input.dims4("batchnorm input")?;
    if c != state.channels() {
        return Err(TensorError::ChannelCount {
            context: "batchnorm",
            expected: state.channels(),
            actual: c,
        });
    }
    let plane = h * w;
    let per_channel = n * plane;
    let inp = input.data();
    let mut out = Tensor::zeros(&[n, c, h, w]);

    let channel_values = |ch: usize| {
        (0..n).flat_map(move |b| {
            let base = (b * c + ch) * plane;
            base..base + plane
        })
    };

    if training {
        if per_channel < 2 {
            return Err(TensorError::DegenerateBatch { count: per_channel });
        }
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            // Two-pass moments, accumulated at f64 for stability.
            let mut sum = 0.0f64;
            for i in channel_values(ch) {
                sum += inp[i].to_f64().unwrap();
            }
            let m = sum / per_channel as f64;
            let mut sq = 0.0f64;
            for i in channel_values(ch) {
                let d = inp[i].to_f64().unwrap() - m;
                sq += d * d;
            }
            mean[ch] = scalar(m);
            var[ch] = scalar(sq / per_channel as f64);
        }
        let od = out.data_mut();
        for ch in 0..c {
            let inv = (var[ch] + state.epsilon).sqrt().recip();
            let g = state.gamma[ch];
            let b = state.beta[ch];
            let m = mean[ch];
            for i in channel_values(ch) {
                od[i] = g * (inp[i] - m) * inv + b;
            }
        }
        let keep = T::one() - state.momentum;
        for ch in 0..c {
            state.running_mean[ch] = keep * state.running_mean[ch] + state.momentum * mean[ch];
            state.running_var[ch] = keep * state.running_var[ch] + state.momentum * var[ch];
        }
        Ok((out, Some(BatchNormCache { mean, var })))
    } else {
        let od = out.data_mut();
        for ch in 0..c {
            let inv = (state.running_var[ch] + state.epsilon).sqrt().recip();
            let g = state.gamma[ch];
            let b = state.beta[ch];
            let m = state.running_mean[ch];
            for i in channel_values(ch) {
                od[i] = g * (inp[i] - m) * inv + b;
            }
        }
        Ok((out, None))
    }
}

/// Exact analytic gradients of training-mode [`batchnorm_forward`], including
/// the dependence of the batch statistics on the input.
pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<BatchNormGrads<T>, TensorError> {
    let (n, c, h, w) = input.dims4("batchnorm input")?;
    if grad_out.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "batchnorm grad_out",
            expected: input.shape().to_vec(),
            actual: grad_out.shape().to_vec(),
        });
    }
    if cache.mean.len() != c || cache.var.len() != c {
        return Err(TensorError::ChannelCount {
            context: "batchnorm cache",
            expected: c,
            actual: cache.mean.len(),
        });
    }
    let plane = h * w;
    let per_channel = n * plane;
    let inp = input.data();
    let gout = grad_out.data();
    let mut grads = BatchNormGrads {
        input: Tensor::zeros(&[n, c, h, w]),
        gamma: vec![T::zero(); c],
        beta: vec![T::zero(); c],
    };
    let gi = grads.input.data_mut();
    for ch in 0..c {
        let m = cache.mean[ch].to_f64().unwrap();
        let inv = 1.0 / (cache.var[ch] + state.epsilon).to_f64().unwrap().sqrt();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let g = gout[i].to_f64().unwrap();
                let xhat = (inp[i].to_f64().unwrap() - m) * inv;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        grads.beta[ch] = scalar(sum_g);
        grads.gamma[ch] = scalar(sum_gx);
        let gamma = state.gamma[ch].to_f64().unwrap();
        let mcount = per_channel as f64;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let g = gout[i].to_f64().unwrap();
                let xhat = (inp[i].to_f64().unwrap() - m) * inv;
                let v = gamma * inv * (g - sum_g / mcount - xhat * sum_gx / mcount);
                gi[i] = scalar(v);
            }
        }
    }
    Ok(grads)
}

/// Element-wise max(0, x).
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Passes gradient where the forward input was > 0; subgradient 0 at 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    out
}

/// 2x2 max pooling over disjoint windows, stride 2. Records the flat offset
/// of each window's argmax into the input plane; ties go to the smallest
/// row-major offset.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices), TensorError> {
    let (n, c, h, w) = input.dims4("maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddPoolInput { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut indices = vec![0usize; n * c * oh * ow];
    let inp = input.data();
    let od = out.data_mut();
    let in_plane = h * w;
    let out_plane = oh * ow;
    for p in 0..n * c {
        let ip = &inp[p * in_plane..(p + 1) * in_plane];
        let op = &mut od[p * out_plane..(p + 1) * out_plane];
        let idx = &mut indices[p * out_plane..(p + 1) * out_plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let first = (2 * oy) * w + 2 * ox;
                let mut best = ip[first];
                let mut best_at = first;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let at = (2 * oy + dy) * w + 2 * ox + dx;
                        if ip[at] > best {
                            best = ip[at];
                            best_at = at;
                        }
                    }
                }
                op[oy * ow + ox] = best;
                idx[oy * ow + ox] = best_at;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            shape: [n, c, oh, ow],
            indices,
        },
    ))
}

/// Scatters pooled values back to their memorized positions in an
/// (out_h, out_w) plane; everything else is zero.
pub fn maxunpool2x2<T: Scalar>(
    input: &Tensor<T>,
    indices: &PoolIndices,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = input.dims4("maxunpool input")?;
    if [n, c, h, w] != indices.shape {
        return Err(TensorError::ShapeMismatch {
            context: "maxunpool indices",
            expected: indices.shape.to_vec(),
            actual: vec![n, c, h, w],
        });
    }
    if out_h != 2 * h || out_w != 2 * w {
        return Err(TensorError::ShapeMismatch {
            context: "maxunpool output dims",
            expected: vec![2 * h, 2 * w],
            actual: vec![out_h, out_w],
        });
    }
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let od = out.data_mut();
    let inp = input.data();
    let in_plane = h * w;
    let out_plane = out_h * out_w;
    for p in 0..n * c {
        let ip = &inp[p * in_plane..(p + 1) * in_plane];
        let idx = &indices.indices[p * in_plane..(p + 1) * in_plane];
        let op = &mut od[p * out_plane..(p + 1) * out_plane];
        for oy in 0..h {
            for ox in 0..w {
                let at = idx[oy * w + ox];
                let (iy, ix) = (at / out_w, at % out_w);
                let in_window = at < out_plane
                    && iy / 2 == oy
                    && ix / 2 == ox;
                if !in_window {
                    return Err(TensorError::CorruptPoolIndex {
                        index: at,
                        h: out_h,
                        w: out_w,
                        row: oy,
                        col: ox,
                    });
                }
                op[at] = ip[oy * w + ox];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`maxunpool2x2`] with respect to its input: gather the
/// incoming gradient at each memorized position.
pub fn maxunpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    indices: &PoolIndices,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, oh, ow) = grad_out.dims4("maxunpool grad_out")?;
    let [pn, pc, h, w] = indices.shape;
    if pn != n || pc != c || oh != 2 * h || ow != 2 * w {
        return Err(TensorError::ShapeMismatch {
            context: "maxunpool backward",
            expected: vec![pn, pc, 2 * h, 2 * w],
            actual: vec![n, c, oh, ow],
        });
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    let g = grad_out.data();
    let in_plane = h * w;
    let out_plane = oh * ow;
    for p in 0..n * c {
        let gp = &g[p * out_plane..(p + 1) * out_plane];
        let idx = &indices.indices[p * in_plane..(p + 1) * in_plane];
        let op = &mut od[p * in_plane..(p + 1) * in_plane];
        for i in 0..in_plane {
            op[i] = gp[idx[i]];
        }
    }
    Ok(out)
}

/// Per-pixel two-class softmax over the channel axis, computed with
/// max-subtraction so large logits cannot overflow.
pub fn softmax_pixelwise<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = logits.dims4("softmax input")?;
    if c != 2 {
        return Err(TensorError::ChannelCount {
            context: "softmax",
            expected: 2,
            actual: c,
        });
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, 2, h, w]);
    let od = out.data_mut();
    let ld = logits.data();
    for b in 0..n {
        let base0 = (b * 2) * plane;
        let base1 = base0 + plane;
        for i in 0..plane {
            let a = ld[base0 + i];
            let bb = ld[base1 + i];
            let m = a.max(bb);
            let ea = (a - m).exp();
            let eb = (bb - m).exp();
            let s = ea + eb;
            od[base0 + i] = ea / s;
            od[base1 + i] = eb / s;
        }
    }
    Ok(out)
}

/// Probability floor inside the loss; keeps log finite on saturated softmax.
pub const LOG_CLAMP: f64 = 1e-12;

/// Class-weighted pixel-wise cross-entropy.
///
/// `probs` must come from [`softmax_pixelwise`]; `labels` holds one class id
/// per pixel in [N, H, W] row-major order. Returns the mean weighted loss
/// over all pixels and the exact gradient with respect to the pre-softmax
/// logits (weighted softmax-minus-onehot).
pub fn weighted_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    class_weights: [T; 2],
) -> Result<(T, Tensor<T>), TensorError> {
    let (n, c, h, w) = probs.dims4("loss probs")?;
    if c != 2 {
        return Err(TensorError::ChannelCount {
            context: "loss",
            expected: 2,
            actual: c,
        });
    }
    let plane = h * w;
    let pixels = n * plane;
    if labels.len() != pixels {
        return Err(TensorError::LengthMismatch {
            context: "loss labels",
            expected: pixels,
            actual: labels.len(),
        });
    }
    if let Some(index) = labels.iter().position(|&l| l > 1) {
        return Err(TensorError::BadLabel {
            label: labels[index],
            index,
        });
    }
    let pd = probs.data();
    let mut grad = Tensor::zeros(probs.shape());
    let gd = grad.data_mut();
    let inv_pixels = 1.0 / pixels as f64;
    let mut loss = 0.0f64;
    for b in 0..n {
        let base0 = (b * 2) * plane;
        let base1 = base0 + plane;
        for i in 0..plane {
            let label = labels[b * plane + i] as usize;
            let wgt = class_weights[label];
            let p_raw = pd[if label == 0 { base0 } else { base1 } + i].to_f64().unwrap();
            // clamp only from below so NaN propagates into the loss
            let p_true = if p_raw < LOG_CLAMP { LOG_CLAMP } else { p_raw };
            loss -= wgt.to_f64().unwrap() * p_true.ln() * inv_pixels;
            let scale = wgt * scalar::<T>(inv_pixels);
            let one0 = if label == 0 { T::one() } else { T::zero() };
            let one1 = T::one() - one0;
            gd[base0 + i] = scale * (pd[base0 + i] - one0);
            gd[base1 + i] = scale * (pd[base1 + i] - one1);
        }
    }
    Ok((scalar(loss), grad))
}

/// MSRA initialization for a conv weight tensor [out_ch, in_ch, kh, kw]:
/// i.i.d. zero-mean Gaussian with variance 2 / (in_ch * kh * kw).
pub fn msra_init<T: Scalar, R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let sigma = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, sigma).expect("valid stddev");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| scalar(normal.sample(rng)))
        .collect();
    Tensor::from_vec(&shape, data).expect("shape matches draw count")
}

/// One SGD-with-momentum update for a single parameter buffer:
/// `g' = grad + l2 * param; v = momentum * v + g'; param -= learn_rate * v`.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    learn_rate: T,
    momentum: T,
    l2: T,
) -> Result<(), TensorError> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(TensorError::LengthMismatch {
            context: "sgd buffers",
            expected: param.len(),
            actual: if grad.len() != param.len() {
                grad.len()
            } else {
                velocity.len()
            },
        });
    }
    for i in 0..param.len() {
        let adjusted = grad[i] + l2 * param[i];
        velocity[i] = momentum * velocity[i] + adjusted;
        param[i] = param[i] - learn_rate * velocity[i];
    }
    Ok(())
}

/// Momentum buffers for a whole parameter set, one velocity array per
/// parameter tensor, plus the optimizer hyperparameters.
#[derive(Clone, Debug)]
pub struct SgdState<T = f32> {
    pub velocities: Vec<Vec<T>>,
    pub learn_rate: T,
    pub momentum: T,
    pub l2: T,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(
        param_lens: &[usize],
        learn_rate: T,
        momentum: T,
        l2: T,
    ) -> Result<Self, TensorError> {
        let lr = learn_rate.to_f64().unwrap();
        if !(lr > 0.0) {
            return Err(TensorError::BadHyper {
                what: "learn_rate",
                requirement: "> 0",
                value: lr,
            });
        }
        let m = momentum.to_f64().unwrap();
        if !(0.0..1.0).contains(&m) {
            return Err(TensorError::BadHyper {
                what: "momentum",
                requirement: "in [0, 1)",
                value: m,
            });
        }
        let l2v = l2.to_f64().unwrap();
        if !(l2v >= 0.0) {
            return Err(TensorError::BadHyper {
                what: "l2",
                requirement: ">= 0",
                value: l2v,
            });
        }
        Ok(Self {
            velocities: param_lens.iter().map(|&l| vec![T::zero(); l]).collect(),
            learn_rate,
            momentum,
            l2,
        })
    }
}
