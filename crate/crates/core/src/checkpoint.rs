//! Self-describing binary model checkpoints.
//!
//! Layout (all integers little-endian u32 unless noted):
//!   magic "SKTKNET1"
//!   config: encoder_layers, filters_per_layer, input_channels, num_classes,
//!           threshold (f64 bits)
//!   2 * encoder_layers blocks, encoders first, each:
//!     weights tensor (ndims, dims..., f32 data), bias, gamma, beta,
//!     running_mean, running_var (each: len, f32 data), epsilon f32,
//!     momentum f32
//!
//! Floats are stored as raw IEEE-754 bits, so a write/read round trip is
//! bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pgm::atomic_write;
use crate::segnet::{ConvBnBlock, Network, NetworkConfig};
use crate::tensor::{BatchNormState, Tensor};

const MAGIC: &[u8; 8] = b"SKTKNET1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {what}")]
    Format {
        path: PathBuf,
        offset: usize,
        what: String,
    },
    #[error("checkpoint config invalid: {0}")]
    Config(String),
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f32_slice(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f32(x);
        }
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &x in t.data() {
            self.f32(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, what: impl Into<String>) -> CheckpointError {
        CheckpointError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            what: what.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated reading {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32_vec(&mut self, what: &str) -> Result<Vec<f32>, CheckpointError> {
        let len = self.u32(what)? as usize;
        if len > 1 << 28 {
            return Err(self.fail(format!("{what} length {len} implausibly large")));
        }
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(self.f32(what)?);
        }
        Ok(v)
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor<f32>, CheckpointError> {
        let ndims = self.u32(what)? as usize;
        if ndims == 0 || ndims > 8 {
            return Err(self.fail(format!("{what}: bad rank {ndims}")));
        }
        let mut shape = Vec::with_capacity(ndims);
        let mut total: usize = 1;
        for _ in 0..ndims {
            let d = self.u32(what)? as usize;
            total = total
                .checked_mul(d)
                .filter(|&t| t <= 1 << 28)
                .ok_or_else(|| self.fail(format!("{what}: dims overflow")))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            data.push(self.f32(what)?);
        }
        Tensor::from_vec(&shape, data).map_err(|e| self.fail(e.to_string()))
    }
}

fn write_block(w: &mut Writer, block: &ConvBnBlock<f32>) {
    w.tensor(&block.weights);
    w.f32_slice(&block.bias);
    w.f32_slice(&block.bn.gamma);
    w.f32_slice(&block.bn.beta);
    w.f32_slice(&block.bn.running_mean);
    w.f32_slice(&block.bn.running_var);
    w.f32(block.bn.epsilon);
    w.f32(block.bn.momentum);
}

fn read_block(r: &mut Reader, what: &str) -> Result<ConvBnBlock<f32>, CheckpointError> {
    let weights = r.tensor(&format!("{what} weights"))?;
    let bias = r.f32_vec(&format!("{what} bias"))?;
    let gamma = r.f32_vec(&format!("{what} gamma"))?;
    let beta = r.f32_vec(&format!("{what} beta"))?;
    let running_mean = r.f32_vec(&format!("{what} running_mean"))?;
    let running_var = r.f32_vec(&format!("{what} running_var"))?;
    let epsilon = r.f32(&format!("{what} epsilon"))?;
    let momentum = r.f32(&format!("{what} momentum"))?;
    let channels = gamma.len();
    if beta.len() != channels || running_mean.len() != channels || running_var.len() != channels {
        return Err(r.fail(format!("{what}: batch-norm buffer lengths disagree")));
    }
    Ok(ConvBnBlock {
        weights,
        bias,
        bn: BatchNormState {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
            momentum,
        },
    })
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(MAGIC);
    let cfg = net.config();
    w.u32(cfg.encoder_layers as u32);
    w.u32(cfg.filters_per_layer as u32);
    w.u32(cfg.input_channels as u32);
    w.u32(cfg.num_classes as u32);
    w.f64(cfg.threshold);
    for block in net.encoders().iter().chain(net.decoders()) {
        write_block(&mut w, block);
    }
    atomic_write(path, &w.bytes).map_err(|e| match e {
        crate::pgm::PgmError::Io { path, source } => CheckpointError::Io { path, source },
        crate::pgm::PgmError::Parse { path, what, .. } => CheckpointError::Format {
            path,
            offset: 0,
            what,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::Format {
            path: path.to_path_buf(),
            offset: 0,
            what: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }
    let config = NetworkConfig {
        encoder_layers: r.u32("encoder_layers")? as usize,
        filters_per_layer: r.u32("filters_per_layer")? as usize,
        input_channels: r.u32("input_channels")? as usize,
        num_classes: r.u32("num_classes")? as usize,
        threshold: r.f64("threshold")?,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let l = config.encoder_layers;
    let mut blocks = Vec::with_capacity(2 * l);
    for i in 0..2 * l {
        let what = if i < l {
            format!("encoder {}", i + 1)
        } else {
            format!("decoder {}", i - l + 1)
        };
        blocks.push(read_block(&mut r, &what)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let decoders = blocks.split_off(l);
    Network::from_parts(config, blocks, decoders)
        .map_err(|e| CheckpointError::Config(e.to_string()))
}
