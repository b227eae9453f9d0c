//! Model parameters and the versioned binary checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! magic   "BFCP"            4 bytes
//! version u32 LE            currently 1
//! config  10 x u32 LE       channels, hidden, layers, heads, head_dim,
//!                           context_frames, target_frames, cond_dim,
//!                           local_cond_channels, max_positions
//! count   u32 LE            number of named blobs
//! blob*   name_len u32 LE, name bytes (utf-8),
//!         rank u32 LE, dims (rank x u32 LE), data (f32 LE)
//! ```
//!
//! Blobs beyond the model parameters (optimizer moments, training step
//! counters) ride along unchanged, which is what makes bitwise training
//! resume possible.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::domain_rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BFCP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Width of the sinusoidal noise-level feature vector.
pub const NOISE_FEATURES: usize = 16;

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub mod_w: Tensor,
    pub mod_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub mlp_in_w: Tensor,
    pub mlp_in_b: Tensor,
    pub mlp_out_w: Tensor,
    pub mlp_out_b: Tensor,
}

/// All learned tensors of the transformer.
///
/// `input_w` is stored `[2C + local, H]` with noisy-latent rows first, the
/// clean/concat rows second and local-condition rows last; the routed and
/// concatenated channels of the input must line up with that order.
#[derive(Debug, Clone)]
pub struct Params {
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub noise_w: Tensor,
    pub noise_b: Tensor,
    pub cond_w: Tensor,
    pub cond_b: Tensor,
    pub null_ctx: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols)
        .map(|_| crate::rng::normal_f32(rng) * std)
        .collect();
    Tensor::param(vec![rows, cols], data).expect("sized data")
}

fn small(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| crate::rng::normal_f32(rng) * std)
        .collect();
    Tensor::param(vec![rows, cols], data).expect("sized data")
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).expect("sized data")
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Params {
        let h = cfg.hidden;
        let in_dim = cfg.input_dim();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let mut rng = domain_rng(seed, "params.block", &[layer as u64]);
            blocks.push(BlockParams {
                // Zero-init modulation: layers start as plain pre-LN blocks.
                mod_w: zeros_param(vec![h, 4 * h]),
                mod_b: zeros_param(vec![4 * h]),
                qkv_w: xavier(&mut rng, h, 3 * h),
                qkv_b: zeros_param(vec![3 * h]),
                out_w: xavier(&mut rng, h, h),
                out_b: zeros_param(vec![h]),
                mlp_in_w: xavier(&mut rng, h, 4 * h),
                mlp_in_b: zeros_param(vec![4 * h]),
                mlp_out_w: xavier(&mut rng, 4 * h, h),
                mlp_out_b: zeros_param(vec![h]),
            });
        }
        let mut rng = domain_rng(seed, "params.top", &[]);
        Params {
            input_w: xavier(&mut rng, in_dim, h),
            input_b: zeros_param(vec![h]),
            noise_w: xavier(&mut rng, NOISE_FEATURES, h),
            noise_b: zeros_param(vec![h]),
            cond_w: xavier(&mut rng, cfg.cond_dim, h),
            cond_b: zeros_param(vec![h]),
            null_ctx: small(&mut rng, 1, h, 0.02),
            blocks,
            head_w: small(&mut rng, h, cfg.channels, 0.02),
            head_b: zeros_param(vec![cfg.channels]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("input.w".into(), &self.input_w),
            ("input.b".into(), &self.input_b),
            ("noise.w".into(), &self.noise_w),
            ("noise.b".into(), &self.noise_b),
            ("cond.w".into(), &self.cond_w),
            ("cond.b".into(), &self.cond_b),
            ("null_ctx".into(), &self.null_ctx),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.mod_w"), &b.mod_w));
            out.push((format!("block{i}.mod_b"), &b.mod_b));
            out.push((format!("block{i}.qkv_w"), &b.qkv_w));
            out.push((format!("block{i}.qkv_b"), &b.qkv_b));
            out.push((format!("block{i}.out_w"), &b.out_w));
            out.push((format!("block{i}.out_b"), &b.out_b));
            out.push((format!("block{i}.mlp_in_w"), &b.mlp_in_w));
            out.push((format!("block{i}.mlp_in_b"), &b.mlp_in_b));
            out.push((format!("block{i}.mlp_out_w"), &b.mlp_out_w));
            out.push((format!("block{i}.mlp_out_b"), &b.mlp_out_b));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input.w".into(), &mut self.input_w),
            ("input.b".into(), &mut self.input_b),
            ("noise.w".into(), &mut self.noise_w),
            ("noise.b".into(), &mut self.noise_b),
            ("cond.w".into(), &mut self.cond_w),
            ("cond.b".into(), &mut self.cond_b),
            ("null_ctx".into(), &mut self.null_ctx),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.mod_w"), &mut b.mod_w));
            out.push((format!("block{i}.mod_b"), &mut b.mod_b));
            out.push((format!("block{i}.qkv_w"), &mut b.qkv_w));
            out.push((format!("block{i}.qkv_b"), &mut b.qkv_b));
            out.push((format!("block{i}.out_w"), &mut b.out_w));
            out.push((format!("block{i}.out_b"), &mut b.out_b));
            out.push((format!("block{i}.mlp_in_w"), &mut b.mlp_in_w));
            out.push((format!("block{i}.mlp_in_b"), &mut b.mlp_in_b));
            out.push((format!("block{i}.mlp_out_w"), &mut b.mlp_out_w));
            out.push((format!("block{i}.mlp_out_b"), &mut b.mlp_out_b));
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    /// Same tensors with gradients disabled; shares storage. Used to run a
    /// frozen network inside another network's training step.
    pub fn frozen(&self) -> Params {
        let mut copy = self.clone();
        for (_, t) in copy.named_mut() {
            *t = t.detach();
        }
        copy
    }
}

/// A parsed checkpoint: config header plus named blobs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub blobs: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.blobs.iter().find(|(n, _, _)| n == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for field in self.config.header_fields() {
            w.write_all(&(field as u32).to_le_bytes())?;
        }
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.blobs {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, &mut offset)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:02x?}"),
            });
        }
        let version = read_u32(r, &mut offset)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let mut fields = [0usize; 10];
        for f in fields.iter_mut() {
            *f = read_u32(r, &mut offset)? as usize;
        }
        let config = ModelConfig::from_header_fields(&fields)?;
        let count = read_u32(r, &mut offset)? as usize;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r, &mut offset)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, &mut offset)?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
                offset,
                message: "blob name is not utf-8".to_string(),
            })?;
            let rank = read_u32(r, &mut offset)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r, &mut offset)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f32; numel];
            let mut buf = [0u8; 4];
            for slot in data.iter_mut() {
                read_exact(r, &mut buf, &mut offset)?;
                *slot = f32::from_le_bytes(buf);
            }
            blobs.push((name, shape, data));
        }
        Ok(Checkpoint { config, blobs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        offset: *offset,
        message: format!("unexpected end of file reading {} bytes", buf.len()),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32(r: &mut impl Read, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}
