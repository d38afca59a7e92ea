//! The pixel-wise aircraft/background classifier: a small fully-convolutional
//! encoder/decoder stack. Each encoder layer is conv -> batch norm -> ReLU ->
//! 2x2 max pool (indices memorized); each decoder layer unpools with the
//! matching encoder's indices, then conv -> batch norm -> ReLU, except the
//! final decoder whose batch-normalized output feeds the softmax directly.
//! Encoder i's pool indices are consumed by decoder (L - i + 1): strict stack
//! discipline.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{BinaryMask, GrayImage};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, maxpool2x2,
    maxunpool2x2, maxunpool2x2_backward, msra_init, relu, relu_backward, scalar,
    softmax_pixelwise, BatchNormCache, BatchNormState, PoolIndices, Scalar, Tensor, TensorError,
};

/// Class id of background pixels in labels and masks.
pub const CLASS_BACKGROUND: u8 = 0;
/// Class id of aircraft pixels in labels and masks; also the probability
/// channel the segmentation threshold applies to.
pub const CLASS_AIRCRAFT: u8 = 1;

/// Probability threshold above which a pixel is declared aircraft.
pub const DEFAULT_THRESHOLD: f64 = 0.999;

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input {dim} {value} is not divisible by {divisor} (2^{layers} encoder halvings)")]
    InputShape {
        dim: &'static str,
        value: usize,
        divisor: usize,
        layers: usize,
    },
    #[error("input has {actual} channels, network expects {expected}")]
    InputChannels { expected: usize, actual: usize },
    #[error("backward pass needs a live training-mode forward cache")]
    NoCache,
    #[error("operation requires inference mode")]
    TrainingMode,
}

/// Architecture and thresholding parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder_layers: usize,
    pub filters_per_layer: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub threshold: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 3,
            filters_per_layer: 64,
            input_channels: 1,
            num_classes: 2,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), SegnetError> {
        if self.encoder_layers < 1 {
            return Err(SegnetError::Config("encoder_layers must be >= 1".into()));
        }
        if self.filters_per_layer < 1 {
            return Err(SegnetError::Config("filters_per_layer must be >= 1".into()));
        }
        if self.input_channels < 1 {
            return Err(SegnetError::Config("input_channels must be >= 1".into()));
        }
        if self.num_classes != 2 {
            return Err(SegnetError::Config(format!(
                "num_classes must be 2 (aircraft/background), got {}",
                self.num_classes
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(SegnetError::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by this.
    pub fn required_divisor(&self) -> usize {
        1 << self.encoder_layers
    }
}

/// One conv + batch-norm unit; encoders follow it with ReLU + pool, decoders
/// precede it with unpool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnBlock<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub bn: BatchNormState<T>,
}

impl<T: Scalar> ConvBnBlock<T> {
    fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            weights: msra_init([out_ch, in_ch, 3, 3], rng),
            bias: vec![T::zero(); out_ch],
            bn: BatchNormState::identity(out_ch),
        }
    }

    fn cast<U: Scalar>(&self) -> ConvBnBlock<U> {
        ConvBnBlock {
            weights: self.weights.cast(),
            bias: self
                .bias
                .iter()
                .map(|&v| scalar(v.to_f64().unwrap()))
                .collect(),
            bn: self.bn.cast(),
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len() + self.bn.gamma.len() + self.bn.beta.len()
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    conv_input: Tensor<T>,
    bn_input: Tensor<T>,
    bn_stats: BatchNormCache<T>,
    /// Pre-ReLU activation, kept for the ReLU backward; None on the final
    /// decoder, which has no ReLU.
    bn_output: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct ForwardCache<T> {
    encoders: Vec<BlockCache<T>>,
    decoders: Vec<BlockCache<T>>,
    pool_indices: Vec<PoolIndices>,
    prepool_dims: Vec<(usize, usize)>,
}

/// Gradients for one conv + batch-norm block.
#[derive(Clone, Debug)]
pub struct BlockGrads<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Gradients for every parameter, blocks ordered encoder 1..L then decoder
/// 1..L, matching [`Network::params_mut`].
#[derive(Clone, Debug)]
pub struct NetworkGrads<T = f32> {
    pub blocks: Vec<BlockGrads<T>>,
}

impl<T: Scalar> NetworkGrads<T> {
    /// Flat view in parameter order: per block weights, bias, gamma, beta.
    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut v = Vec::with_capacity(self.blocks.len() * 4);
        for b in &self.blocks {
            v.push(b.weights.data());
            v.push(b.bias.as_slice());
            v.push(b.gamma.as_slice());
            v.push(b.beta.as_slice());
        }
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v.to_f64().unwrap().abs())
            .fold(0.0, f64::max)
    }
}

/// The full encoder/decoder network.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    encoders: Vec<ConvBnBlock<T>>,
    decoders: Vec<ConvBnBlock<T>>,
    training: bool,
    cache: Option<ForwardCache<T>>,
}

/// Builds a network with MSRA-initialized conv weights, zero biases, unit
/// gamma and zero beta. Deterministic for a given rng.
pub fn build_network<T: Scalar, R: Rng>(
    config: &NetworkConfig,
    rng: &mut R,
) -> Result<Network<T>, SegnetError> {
    config.validate()?;
    let f = config.filters_per_layer;
    let l = config.encoder_layers;
    let mut encoders = Vec::with_capacity(l);
    for i in 0..l {
        let in_ch = if i == 0 { config.input_channels } else { f };
        encoders.push(ConvBnBlock::new(in_ch, f, rng));
    }
    let mut decoders = Vec::with_capacity(l);
    for i in 0..l {
        let out_ch = if i + 1 == l { config.num_classes } else { f };
        decoders.push(ConvBnBlock::new(f, out_ch, rng));
    }
    Ok(Network {
        config: config.clone(),
        encoders,
        decoders,
        training: false,
        cache: None,
    })
}

impl<T: Scalar> Network<T> {
    /// Reassembles a network from deserialized blocks, checking that every
    /// block's shape agrees with the config. Starts in inference mode.
    pub fn from_parts(
        config: NetworkConfig,
        encoders: Vec<ConvBnBlock<T>>,
        decoders: Vec<ConvBnBlock<T>>,
    ) -> Result<Self, SegnetError> {
        config.validate()?;
        let l = config.encoder_layers;
        let f = config.filters_per_layer;
        if encoders.len() != l || decoders.len() != l {
            return Err(SegnetError::Config(format!(
                "expected {l} encoder and {l} decoder blocks, got {} and {}",
                encoders.len(),
                decoders.len()
            )));
        }
        for (i, b) in encoders.iter().enumerate() {
            let in_ch = if i == 0 { config.input_channels } else { f };
            if b.weights.shape() != [f, in_ch, 3, 3] {
                return Err(SegnetError::Config(format!(
                    "encoder {} weights have shape {:?}, expected {:?}",
                    i + 1,
                    b.weights.shape(),
                    [f, in_ch, 3, 3]
                )));
            }
            if b.bias.len() != f || b.bn.channels() != f {
                return Err(SegnetError::Config(format!(
                    "encoder {} bias/bn sized for {} channels, expected {f}",
                    i + 1,
                    b.bn.channels()
                )));
            }
        }
        for (i, b) in decoders.iter().enumerate() {
            let out_ch = if i + 1 == l { config.num_classes } else { f };
            if b.weights.shape() != [out_ch, f, 3, 3] {
                return Err(SegnetError::Config(format!(
                    "decoder {} weights have shape {:?}, expected {:?}",
                    i + 1,
                    b.weights.shape(),
                    [out_ch, f, 3, 3]
                )));
            }
            if b.bias.len() != out_ch || b.bn.channels() != out_ch {
                return Err(SegnetError::Config(format!(
                    "decoder {} bias/bn sized for {} channels, expected {out_ch}",
                    i + 1,
                    b.bn.channels()
                )));
            }
        }
        Ok(Network {
            config,
            encoders,
            decoders,
            training: false,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn encoders(&self) -> &[ConvBnBlock<T>] {
        &self.encoders
    }

    pub fn decoders(&self) -> &[ConvBnBlock<T>] {
        &self.decoders
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
        if !training {
            self.cache = None;
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Total learnable parameter count (conv weights and biases, gamma, beta).
    pub fn num_params(&self) -> usize {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .map(|b| b.param_count())
            .sum()
    }

    /// Lengths of the flat parameter buffers, in [`Self::params_mut`] order.
    pub fn param_lens(&self) -> Vec<usize> {
        let mut v = Vec::new();
        for b in self.encoders.iter().chain(&self.decoders) {
            v.push(b.weights.len());
            v.push(b.bias.len());
            v.push(b.bn.gamma.len());
            v.push(b.bn.beta.len());
        }
        v
    }

    /// Mutable flat views of every learnable parameter with its weight-decay
    /// eligibility: conv weights decay, biases / gamma / beta do not.
    pub fn params_mut(&mut self) -> Vec<(&mut [T], bool)> {
        let mut v = Vec::new();
        for b in self.encoders.iter_mut().chain(self.decoders.iter_mut()) {
            let ConvBnBlock { weights, bias, bn } = b;
            v.push((weights.data_mut(), true));
            v.push((bias.as_mut_slice(), false));
            v.push((bn.gamma.as_mut_slice(), false));
            v.push((bn.beta.as_mut_slice(), false));
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            encoders: self.encoders.iter().map(|b| b.cast()).collect(),
            decoders: self.decoders.iter().map(|b| b.cast()).collect(),
            training: self.training,
            cache: None,
        }
    }

    /// Spatial dims after every pooling and unpooling stage for an (h, w)
    /// input: L halvings down to the bottleneck, then L doublings back.
    pub fn shape_schedule(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let l = self.config.encoder_layers;
        let mut dims = Vec::with_capacity(2 * l);
        let (mut ch, mut cw) = (h, w);
        for _ in 0..l {
            ch /= 2;
            cw /= 2;
            dims.push((ch, cw));
        }
        for _ in 0..l {
            ch *= 2;
            cw *= 2;
            dims.push((ch, cw));
        }
        dims
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize, usize), SegnetError> {
        let (n, c, h, w) = input.dims4("network input")?;
        if c != self.config.input_channels {
            return Err(SegnetError::InputChannels {
                expected: self.config.input_channels,
                actual: c,
            });
        }
        let divisor = self.config.required_divisor();
        if h % divisor != 0 {
            return Err(SegnetError::InputShape {
                dim: "height",
                value: h,
                divisor,
                layers: self.config.encoder_layers,
            });
        }
        if w % divisor != 0 {
            return Err(SegnetError::InputShape {
                dim: "width",
                value: w,
                divisor,
                layers: self.config.encoder_layers,
            });
        }
        Ok((n, c, h, w))
    }

    /// Forward pass under the current mode. Training mode caches every
    /// intermediate the backward pass needs and updates batch-norm running
    /// statistics; inference mode is pure. Returns per-pixel class
    /// probabilities at input resolution.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, SegnetError> {
        if self.training {
            self.forward_training(input)
        } else {
            self.infer(input)
        }
    }

    /// Pure inference pass; usable from `&self` (and therefore from several
    /// threads at once on a trained network).
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, SegnetError> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut index_stack: Vec<(PoolIndices, usize, usize)> = Vec::new();
        for block in &self.encoders {
            let c = conv2d_forward(&x, &block.weights, &block.bias)?;
            // inference never mutates running stats; clone keeps &self honest
            let mut bn = block.bn.clone();
            let (b, _) = batchnorm_forward(&c, &mut bn, false)?;
            let r = relu(&b);
            let (_, _, ph, pw) = r.dims4("pre-pool")?;
            let (p, idx) = maxpool2x2(&r)?;
            index_stack.push((idx, ph, pw));
            x = p;
        }
        for (i, block) in self.decoders.iter().enumerate() {
            let (idx, ph, pw) = index_stack.pop().expect("one index set per encoder");
            let u = maxunpool2x2(&x, &idx, ph, pw)?;
            let c = conv2d_forward(&u, &block.weights, &block.bias)?;
            let mut bn = block.bn.clone();
            let (b, _) = batchnorm_forward(&c, &mut bn, false)?;
            x = if i + 1 == self.decoders.len() { b } else { relu(&b) };
        }
        Ok(softmax_pixelwise(&x)?)
    }

    fn forward_training(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, SegnetError> {
        self.check_input(input)?;
        let mut cache = ForwardCache {
            encoders: Vec::with_capacity(self.encoders.len()),
            decoders: Vec::with_capacity(self.decoders.len()),
            pool_indices: Vec::with_capacity(self.encoders.len()),
            prepool_dims: Vec::with_capacity(self.encoders.len()),
        };
        let mut x = input.clone();
        for block in self.encoders.iter_mut() {
            let c = conv2d_forward(&x, &block.weights, &block.bias)?;
            let (b, stats) = batchnorm_forward(&c, &mut block.bn, true)?;
            let stats = stats.expect("training mode returns stats");
            let r = relu(&b);
            let (_, _, ph, pw) = r.dims4("pre-pool")?;
            let (p, idx) = maxpool2x2(&r)?;
            cache.encoders.push(BlockCache {
                conv_input: x,
                bn_input: c,
                bn_stats: stats,
                bn_output: Some(b),
            });
            cache.pool_indices.push(idx);
            cache.prepool_dims.push((ph, pw));
            x = p;
        }
        let last = self.decoders.len() - 1;
        for (i, block) in self.decoders.iter_mut().enumerate() {
            let enc = self.encoders.len() - 1 - i;
            let (ph, pw) = cache.prepool_dims[enc];
            let u = maxunpool2x2(&x, &cache.pool_indices[enc], ph, pw)?;
            let c = conv2d_forward(&u, &block.weights, &block.bias)?;
            let (b, stats) = batchnorm_forward(&c, &mut block.bn, true)?;
            let stats = stats.expect("training mode returns stats");
            let (next, kept) = if i == last {
                (b, None)
            } else {
                (relu(&b), Some(b))
            };
            cache.decoders.push(BlockCache {
                conv_input: u,
                bn_input: c,
                bn_stats: stats,
                bn_output: kept,
            });
            x = next;
        }
        let probs = softmax_pixelwise(&x)?;
        self.cache = Some(cache);
        Ok(probs)
    }

    /// Backward pass from the gradient with respect to the pre-softmax
    /// logits, chaining through the cached training-mode forward. Gradients
    /// come back aligned one-to-one with [`Self::params_mut`].
    pub fn backward(&self, grad_logits: &Tensor<T>) -> Result<NetworkGrads<T>, SegnetError> {
        let cache = self.cache.as_ref().ok_or(SegnetError::NoCache)?;
        let l = self.decoders.len();
        let mut dec_grads: Vec<BlockGrads<T>> = Vec::with_capacity(l);
        let mut g = grad_logits.clone();
        for i in (0..l).rev() {
            let blk = &self.decoders[i];
            let bc = &cache.decoders[i];
            if let Some(pre_relu) = &bc.bn_output {
                g = relu_backward(pre_relu, &g);
            }
            let bn_grads = batchnorm_backward(&bc.bn_input, &blk.bn, &g, &bc.bn_stats)?;
            let conv_grads = conv2d_backward(&bc.conv_input, &blk.weights, &bn_grads.input)?;
            dec_grads.push(BlockGrads {
                weights: conv_grads.weights,
                bias: conv_grads.bias,
                gamma: bn_grads.gamma,
                beta: bn_grads.beta,
            });
            let enc = l - 1 - i;
            g = maxunpool2x2_backward(&conv_grads.input, &cache.pool_indices[enc])?;
        }
        dec_grads.reverse();

        let mut enc_grads: Vec<BlockGrads<T>> = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let blk = &self.encoders[i];
            let bc = &cache.encoders[i];
            let (ph, pw) = cache.prepool_dims[i];
            // pool backward: route pooled gradients to the memorized argmax cells
            g = maxunpool2x2(&g, &cache.pool_indices[i], ph, pw)?;
            g = relu_backward(bc.bn_output.as_ref().expect("encoders keep pre-relu"), &g);
            let bn_grads = batchnorm_backward(&bc.bn_input, &blk.bn, &g, &bc.bn_stats)?;
            let conv_grads = conv2d_backward(&bc.conv_input, &blk.weights, &bn_grads.input)?;
            enc_grads.push(BlockGrads {
                weights: conv_grads.weights,
                bias: conv_grads.bias,
                gamma: bn_grads.gamma,
                beta: bn_grads.beta,
            });
            g = conv_grads.input;
        }
        enc_grads.reverse();

        enc_grads.extend(dec_grads);
        Ok(NetworkGrads { blocks: enc_grads })
    }

    /// Shapes of every pooled / unpooled activation from the latest
    /// training-mode forward; for schedule assertions.
    pub fn cached_stage_dims(&self) -> Option<Vec<(usize, usize)>> {
        let cache = self.cache.as_ref()?;
        let mut dims = Vec::new();
        for (ph, pw) in &cache.prepool_dims {
            dims.push((ph / 2, pw / 2));
        }
        for i in 0..cache.decoders.len() {
            let enc = cache.decoders.len() - 1 - i;
            dims.push(cache.prepool_dims[enc]);
        }
        Some(dims)
    }
}

/// Converts an 8-bit image to a [1, 1, H, W] network input scaled to [0, 1].
pub fn image_to_input<T: Scalar>(image: &GrayImage) -> Tensor<T> {
    let data = image
        .data()
        .iter()
        .map(|&p| scalar(p as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[1, 1, image.height(), image.width()], data).expect("sizes agree")
}

/// Stacks same-sized images into an [N, 1, H, W] batch scaled to [0, 1].
pub fn images_to_batch<T: Scalar>(images: &[&GrayImage]) -> Result<Tensor<T>, SegnetError> {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(SegnetError::Config(format!(
                "batch images differ in size: {}x{} vs {}x{}",
                w,
                h,
                img.width(),
                img.height()
            )));
        }
        data.extend(img.data().iter().map(|&p| scalar::<T>(p as f64 / 255.0)));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h, w], data).expect("sizes agree"))
}

impl<T: Scalar> Network<T> {
    /// Thresholds the aircraft-class probability at `config.threshold`
    /// (inclusive). Inference mode only.
    pub fn segment(&self, image: &GrayImage) -> Result<BinaryMask, SegnetError> {
        if self.training {
            return Err(SegnetError::TrainingMode);
        }
        let probs = self.infer(&image_to_input(image))?;
        Ok(threshold_probs(&probs, self.config.threshold))
    }
}

/// Aircraft mask from a [1, 2, H, W] probability map: pixel is aircraft iff
/// its aircraft-channel probability >= threshold.
pub fn threshold_probs<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> BinaryMask {
    let (_, _, h, w) = probs.dims4("probs").expect("rank 4");
    let plane = h * w;
    let thr: T = scalar(threshold);
    let aircraft = &probs.data()[CLASS_AIRCRAFT as usize * plane..(CLASS_AIRCRAFT as usize + 1) * plane];
    let mut mask = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if aircraft[y * w + x] >= thr {
                mask.set(y, x, 1);
            }
        }
    }
    mask
}
