//! Attention mask families.
//!
//! Three patterns govern who attends to whom over a window of `s` context
//! frames followed by `o` target frames:
//!
//! * `Bidirectional` — everyone attends everyone.
//! * `EncDec` — context frames attend only context; target frames attend
//!   everything. Context encoding becomes independent of the target block,
//!   so K/V states can be cached across diffusion steps.
//! * `BlockCausal` — context additionally splits into `o`-sized blocks where
//!   each block attends only itself and the preceding `s/o` blocks; the
//!   target block attends the whole window. Cached blocks stay valid when
//!   the window slides, enabling caching across time as well.
//!
//! `BlockCausal` masks may be built for sequences longer than `s + o`; the
//! per-block window rule then produces the banded pattern an uncached
//! recompute over full history must use to reproduce the cached engine.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFamily {
    Bidirectional,
    EncDec,
    BlockCausal,
}

/// Declarative mask description from which boolean matrices are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub family: MaskFamily,
    pub context_frames: usize,
    pub target_frames: usize,
}

impl AttentionMaskSpec {
    pub fn new(family: MaskFamily, context_frames: usize, target_frames: usize) -> Self {
        AttentionMaskSpec {
            family,
            context_frames,
            target_frames,
        }
    }
}

/// Boolean attention matrix; `true` means "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Mask from an explicit allow matrix (row-major, `size x size`).
    pub fn custom(size: usize, allow: Vec<bool>) -> Result<AttentionMask> {
        if allow.len() != size * size {
            return Err(Error::dim(format!(
                "allow matrix has {} entries, expected {}",
                allow.len(),
                size * size
            )));
        }
        for row in 0..size {
            if !allow[row * size..(row + 1) * size].iter().any(|&a| a) {
                return Err(Error::contract(format!(
                    "mask row {row} has no allowed columns"
                )));
            }
        }
        Ok(AttentionMask { size, allow })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.size + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Additive pre-softmax bias: 0 where allowed, a large negative constant
    /// where excluded (drives the post-softmax weight to exactly zero).
    pub fn bias_tensor(&self) -> Tensor {
        let data: Vec<f32> = self
            .allow
            .iter()
            .map(|&a| if a { 0.0 } else { -1e9 })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square mask")
    }
}

/// Builds the boolean mask for a window of `t` frames.
///
/// `Bidirectional` accepts any `t`. `EncDec` requires `t = s + o`.
/// `BlockCausal` requires `s` and `t` divisible by `o` and generalizes to
/// longer sequences: every `o`-block attends itself and the `s/o` blocks
/// before it.
pub fn build_mask(spec: &AttentionMaskSpec, t: usize) -> Result<AttentionMask> {
    let (s, o) = (spec.context_frames, spec.target_frames);
    if t == 0 {
        return Err(Error::config("mask for an empty window".to_string()));
    }
    let mut allow = vec![false; t * t];
    match spec.family {
        MaskFamily::Bidirectional => allow.fill(true),
        MaskFamily::EncDec => {
            if t != s + o {
                return Err(Error::config(format!(
                    "enc-dec mask needs t = s + o, got t={t}, s={s}, o={o}"
                )));
            }
            for row in 0..t {
                let limit = if row < s { s } else { t };
                for col in 0..limit {
                    allow[row * t + col] = true;
                }
            }
        }
        MaskFamily::BlockCausal => {
            if o == 0 || s % o != 0 {
                return Err(Error::config(format!(
                    "block-causal mask needs s divisible by o, got s={s}, o={o}"
                )));
            }
            if t % o != 0 {
                return Err(Error::config(format!(
                    "block-causal mask needs t divisible by o, got t={t}, o={o}"
                )));
            }
            let window_blocks = s / o;
            for row in 0..t {
                let row_block = row / o;
                let first_block = row_block.saturating_sub(window_blocks);
                for col in first_block * o..(row_block + 1) * o {
                    allow[row * t + col] = true;
                }
            }
        }
    }
    for row in 0..t {
        if !allow[row * t..(row + 1) * t].iter().any(|&a| a) {
            return Err(Error::contract(format!(
                "mask row {row} has no allowed columns"
            )));
        }
    }
    Ok(AttentionMask { size: t, allow })
}
