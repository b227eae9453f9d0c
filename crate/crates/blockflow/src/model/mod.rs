//! The diffusion transformer.
//!
//! One backbone serves three pass types:
//!
//! * `forward_full` — reference path over a whole window, any mask family.
//! * `encode_context` — clean frames only, noise level pinned to 0, emits
//!   per-layer K/V entries and no velocity.
//! * `forward_decode` — target frames only, attending cached K/V plus
//!   themselves.
//!
//! Clean context frames are routed around the noisy input projection
//! (`input_w` rows `[0, C)` carry noisy latents, `[C, 2C)` carry the clean
//! concat channel) and their noise-level conditioning is pinned to 0
//! per-frame, so context activations depend only on the context itself.
//! Positions are rotary and window-relative; cached K is stored pre-rotation
//! and rotated on read at the position the frame currently occupies.

mod mask;
mod params;

pub use mask::{build_mask, AttentionMask, AttentionMaskSpec, MaskFamily};
pub use params::{BlockParams, Checkpoint, Params, NOISE_FEATURES};

use crate::error::{Error, Result};
use crate::latent::LatentSequence;
use crate::tensor::{Tape, Tensor};

/// Geometry and conditioning dimensions of one transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub context_frames: usize,
    pub target_frames: usize,
    pub cond_dim: usize,
    pub local_cond_channels: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Default toy geometry; keeps the 3:1 context-to-target ratio small
    /// enough to train on a laptop while exercising every pathway.
    pub fn toy() -> Self {
        ModelConfig {
            channels: 8,
            hidden: 64,
            layers: 4,
            heads: 4,
            head_dim: 16,
            context_frames: 24,
            target_frames: 8,
            cond_dim: 8,
            local_cond_channels: 2,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::config(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config("head_dim must be even for rotary pairs"));
        }
        if self.target_frames == 0 {
            return Err(Error::config("target_frames must be positive"));
        }
        if self.context_frames % self.target_frames != 0 {
            return Err(Error::config(format!(
                "context_frames {} must be divisible by target_frames {}",
                self.context_frames, self.target_frames
            )));
        }
        if self.max_positions < self.context_frames + self.target_frames {
            return Err(Error::config("max_positions smaller than one window"));
        }
        if self.channels == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::config("zero-sized model"));
        }
        Ok(())
    }

    /// Input projection width: noisy latents, clean concat channel, local
    /// condition channels.
    pub fn input_dim(&self) -> usize {
        2 * self.channels + self.local_cond_channels
    }

    pub fn window(&self) -> usize {
        self.context_frames + self.target_frames
    }

    pub(crate) fn header_fields(&self) -> [usize; 10] {
        [
            self.channels,
            self.hidden,
            self.layers,
            self.heads,
            self.head_dim,
            self.context_frames,
            self.target_frames,
            self.cond_dim,
            self.local_cond_channels,
            self.max_positions,
        ]
    }

    pub(crate) fn from_header_fields(f: &[usize; 10]) -> Result<Self> {
        let cfg = ModelConfig {
            channels: f[0],
            hidden: f[1],
            layers: f[2],
            heads: f[3],
            head_dim: f[4],
            context_frames: f[5],
            target_frames: f[6],
            cond_dim: f[7],
            local_cond_channels: f[8],
            max_positions: f[9],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Conditioning for one window: an optional global vector, optional
/// time-aligned local channels, and context-null bookkeeping.
#[derive(Debug, Clone)]
pub struct ConditionInput {
    /// Global condition vector; `None` is the null condition used for
    /// classifier-free guidance.
    pub global_vec: Option<Vec<f32>>,
    /// Frame-major `[frames x local_cond_channels]` local conditions aligned
    /// with the current window; `None` means null local conditions.
    pub local_chans: Option<Vec<f32>>,
    /// Number of leading context frames treated as null (zeroed). A value
    /// covering the whole context marks the fully-null start-of-generation
    /// case and adds the learned null-context embedding.
    pub null_context_frames: usize,
    /// Future visibility offset for local channels, measured from the
    /// context/target boundary: local frames at window index
    /// `>= context_frames + future_visibility` are zeroed. `i64::MAX`
    /// disables the cutoff.
    pub future_visibility: i64,
}

impl ConditionInput {
    pub fn null() -> Self {
        ConditionInput {
            global_vec: None,
            local_chans: None,
            null_context_frames: 0,
            future_visibility: i64::MAX,
        }
    }

    pub fn global(vec: Vec<f32>) -> Self {
        ConditionInput {
            global_vec: Some(vec),
            ..ConditionInput::null()
        }
    }

    pub fn with_local(mut self, local: Vec<f32>, future_visibility: i64) -> Self {
        self.local_chans = Some(local);
        self.future_visibility = future_visibility;
        self
    }

    pub fn with_null_context(mut self, frames: usize) -> Self {
        self.null_context_frames = frames;
        self
    }

    /// Local channel values with the visibility cutoff applied, for a window
    /// of `frames` frames whose context/target boundary sits at `boundary`.
    pub(crate) fn effective_local(
        &self,
        frames: usize,
        boundary: usize,
        lc: usize,
    ) -> Result<Option<Vec<f32>>> {
        let Some(local) = &self.local_chans else {
            return Ok(None);
        };
        if lc == 0 {
            return Ok(None);
        }
        if local.len() != frames * lc {
            return Err(Error::dim(format!(
                "local conditions cover {} values, window needs {}",
                local.len(),
                frames * lc
            )));
        }
        let mut out = local.clone();
        if self.future_visibility != i64::MAX {
            let cutoff = boundary as i64 + self.future_visibility;
            for t in 0..frames {
                if (t as i64) >= cutoff {
                    out[t * lc..(t + 1) * lc].fill(0.0);
                }
            }
        }
        Ok(Some(out))
    }
}

/// Per-layer key/value activations for a span of frames, pre-rotation.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// K/V entries produced by one encode pass.
#[derive(Debug, Clone)]
pub struct KvEntries {
    pub frames: usize,
    pub layers: Vec<LayerKv>,
}

/// Borrowed view of cached K/V the decode and encode passes read from.
/// `base_position` shifts the window origin; streaming always uses 0, and
/// the rotary shift-invariance check uses nonzero bases.
pub struct KvView<'a> {
    pub layers: Vec<(&'a [f32], &'a [f32])>,
    pub len: usize,
    pub base_position: usize,
}

/// Scaled dot-product attention over already position-encoded single-head
/// tensors. Masked positions receive a large negative bias before the
/// softmax, so excluded columns end up with exactly zero weight.
pub fn attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    let bias = match mask {
        Some(m) => {
            if m.size() != q.shape()[0] || m.size() != k.shape()[0] {
                return Err(Error::dim(format!(
                    "mask of size {} does not fit {} queries x {} keys",
                    m.size(),
                    q.shape()[0],
                    k.shape()[0]
                )));
            }
            Some(m.bias_tensor())
        }
        None => None,
    };
    masked_attention(tape, q, k, v, bias.as_ref())
}

fn masked_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let d = *q
        .shape()
        .last()
        .ok_or_else(|| Error::dim("attention on 0-d query"))?;
    let k_t = tape.transpose(k)?;
    let scores = tape.matmul(q, &k_t)?;
    let scores = tape.scale(&scores, 1.0 / (d as f32).sqrt())?;
    let scores = match bias {
        Some(b) => tape.add(&scores, b)?,
        None => scores,
    };
    let weights = tape.softmax(&scores, 1)?;
    tape.matmul(&weights, v)
}

struct Rotary {
    cos: Vec<f32>,
    sin: Vec<f32>,
    dim: usize,
}

impl Rotary {
    fn new(max_positions: usize, dim: usize) -> Rotary {
        let pairs = dim / 2;
        let mut cos = vec![0.0f32; max_positions * dim];
        let mut sin = vec![0.0f32; max_positions * dim];
        for p in 0..max_positions {
            for i in 0..pairs {
                let theta = (p as f64) / 10_000f64.powf(2.0 * i as f64 / dim as f64);
                let (s, c) = theta.sin_cos();
                cos[p * dim + 2 * i] = c as f32;
                cos[p * dim + 2 * i + 1] = c as f32;
                sin[p * dim + 2 * i] = s as f32;
                sin[p * dim + 2 * i + 1] = s as f32;
            }
        }
        Rotary { cos, sin, dim }
    }

    fn tables(&self, positions: &[usize]) -> (Tensor, Tensor) {
        let rows = positions.len();
        let mut cos = Vec::with_capacity(rows * self.dim);
        let mut sin = Vec::with_capacity(rows * self.dim);
        for &p in positions {
            cos.extend_from_slice(&self.cos[p * self.dim..(p + 1) * self.dim]);
            sin.extend_from_slice(&self.sin[p * self.dim..(p + 1) * self.dim]);
        }
        (
            Tensor::new(vec![rows, self.dim], cos).expect("sized"),
            Tensor::new(vec![rows, self.dim], sin).expect("sized"),
        )
    }
}

/// What a pass should produce.
struct Want {
    head: bool,
    kv: bool,
    layer_states: bool,
}

struct PassOutput {
    velocity: Option<Tensor>,
    kv: Option<Vec<LayerKv>>,
    layer_states: Option<Vec<Tensor>>,
}

/// The transformer: configuration, parameters and fixed tables.
pub struct DiT {
    pub cfg: ModelConfig,
    pub params: Params,
    rotary: Rotary,
    ln_gain: Tensor,
    ln_bias: Tensor,
}

impl DiT {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<DiT> {
        cfg.validate()?;
        let params = Params::init(&cfg, seed);
        Ok(DiT::from_params(cfg, params))
    }

    pub fn from_params(cfg: ModelConfig, params: Params) -> DiT {
        DiT {
            rotary: Rotary::new(cfg.max_positions, cfg.head_dim),
            ln_gain: Tensor::ones(vec![cfg.hidden]),
            ln_bias: Tensor::zeros(vec![cfg.hidden]),
            cfg,
            params,
        }
    }

    /// Shares parameter storage but with gradients disabled, for running a
    /// frozen copy inside another model's training step.
    pub fn frozen(&self) -> DiT {
        DiT::from_params(self.cfg, self.params.frozen())
    }

    // ── Conditioning ────────────────────────────────────────────────

    fn noise_features(k: f32) -> [f32; NOISE_FEATURES] {
        let mut out = [0.0f32; NOISE_FEATURES];
        let pairs = NOISE_FEATURES / 2;
        for i in 0..pairs {
            let omega = 10f64.powf(3.0 * i as f64 / (pairs - 1) as f64);
            let (s, c) = (k as f64 * omega).sin_cos();
            out[2 * i] = s as f32;
            out[2 * i + 1] = c as f32;
        }
        out
    }

    fn fully_null_context(&self, c: &ConditionInput) -> bool {
        self.cfg.context_frames > 0 && c.null_context_frames >= self.cfg.context_frames
    }

    /// Per-frame conditioning embedding `[rows x H]`: noise-level features
    /// projected and shifted by the global condition and the null-context
    /// flag. Context frames always pass `k = 0` here.
    fn cond_embedding(
        &self,
        tape: &mut Tape,
        k_frames: &[f32],
        c: &ConditionInput,
    ) -> Result<Tensor> {
        let rows = k_frames.len();
        let mut feats = Vec::with_capacity(rows * NOISE_FEATURES);
        for &k in k_frames {
            feats.extend_from_slice(&Self::noise_features(k));
        }
        let feats = Tensor::new(vec![rows, NOISE_FEATURES], feats)?;
        let projected = tape.matmul(&feats, &self.params.noise_w)?;
        let mut e = tape.add(&projected, &self.params.noise_b)?;
        if let Some(g) = &c.global_vec {
            if g.len() != self.cfg.cond_dim {
                return Err(Error::dim(format!(
                    "global condition has {} entries, model wants {}",
                    g.len(),
                    self.cfg.cond_dim
                )));
            }
            let gt = Tensor::new(vec![1, self.cfg.cond_dim], g.clone())?;
            let gp = tape.matmul(&gt, &self.params.cond_w)?;
            let gp = tape.add(&gp, &self.params.cond_b)?;
            let gp = tape.reshape(&gp, vec![self.cfg.hidden])?;
            e = tape.add(&e, &gp)?;
        }
        if self.fully_null_context(c) {
            let flag = tape.reshape(&self.params.null_ctx, vec![self.cfg.hidden])?;
            e = tape.add(&e, &flag)?;
        }
        Ok(e)
    }

    // ── Input features ──────────────────────────────────────────────

    /// Routed input projection over a window with leading clean frames:
    /// target rows see the noisy latents through the first block of input
    /// rows, context rows see the clean latents through the second, local
    /// condition channels ride alongside.
    pub fn input_project(
        &self,
        tape: &mut Tape,
        x_noisy: &Tensor,
        x_clean: &LatentSequence,
        c: &ConditionInput,
    ) -> Result<Tensor> {
        let x_in = self.window_features(tape, x_noisy, x_clean, c)?;
        let h = tape.matmul(&x_in, &self.params.input_w)?;
        tape.add(&h, &self.params.input_b)
    }

    fn window_features(
        &self,
        tape: &mut Tape,
        x_noisy: &Tensor,
        x_clean: &LatentSequence,
        c: &ConditionInput,
    ) -> Result<Tensor> {
        let ch = self.cfg.channels;
        let sh = x_noisy.shape();
        if sh.len() != 2 || sh[1] != ch {
            return Err(Error::dim(format!(
                "noisy window must be [frames, {ch}], got {sh:?}"
            )));
        }
        let frames = sh[0];
        let ctx = x_clean.frames();
        if x_clean.channels() != ch {
            return Err(Error::dim(format!(
                "clean context has {} channels, model wants {ch}",
                x_clean.channels()
            )));
        }
        if ctx >= frames {
            return Err(Error::dim(format!(
                "window of {frames} frames cannot hold {ctx} context frames"
            )));
        }

        // Routing mask: zero on context rows, one on target rows.
        let mut route = vec![0.0f32; frames * ch];
        route[ctx * ch..].fill(1.0);
        let route = Tensor::new(vec![frames, ch], route)?;
        let routed = tape.mul(x_noisy, &route)?;

        // Concat channel: clean frames then zeros, leading null frames
        // zeroed out.
        let mut concat = vec![0.0f32; frames * ch];
        for t in 0..ctx {
            if t >= c.null_context_frames {
                concat[t * ch..(t + 1) * ch].copy_from_slice(x_clean.frame(t));
            }
        }
        let concat = Tensor::new(vec![frames, ch], concat)?;

        let lc = self.cfg.local_cond_channels;
        if lc == 0 {
            return tape.concat(&[&routed, &concat], 1);
        }
        let local = match c.effective_local(frames, ctx, lc)? {
            Some(v) => Tensor::new(vec![frames, lc], v)?,
            None => Tensor::zeros(vec![frames, lc]),
        };
        tape.concat(&[&routed, &concat, &local], 1)
    }

    // ── Transformer body ────────────────────────────────────────────

    fn rope(&self, tape: &mut Tape, x: &Tensor, positions: &[usize]) -> Result<Tensor> {
        for &p in positions {
            if p >= self.cfg.max_positions {
                return Err(Error::config(format!(
                    "position {p} exceeds max_positions {}",
                    self.cfg.max_positions
                )));
            }
        }
        let (cos, sin) = self.rotary.tables(positions);
        let xc = tape.mul(x, &cos)?;
        let xr = tape.rotate_pairs(x)?;
        let xs = tape.mul(&xr, &sin)?;
        tape.add(&xc, &xs)
    }

    fn head_slice(data: &[f32], rows: usize, hidden: usize, head: usize, hd: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows * hd);
        for r in 0..rows {
            out.extend_from_slice(&data[r * hidden + head * hd..r * hidden + (head + 1) * hd]);
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        h_init: Tensor,
        k_frames: &[f32],
        c: &ConditionInput,
        positions: &[usize],
        cache: Option<&KvView>,
        mask_bias: Option<&Tensor>,
        want: Want,
    ) -> Result<PassOutput> {
        let hd = self.cfg.head_dim;
        let hidden = self.cfg.hidden;
        let cache_len = cache.map(|c| c.len).unwrap_or(0);
        if let Some(view) = cache {
            if view.layers.len() != self.cfg.layers {
                return Err(Error::contract(format!(
                    "cache has {} layers, model has {}",
                    view.layers.len(),
                    self.cfg.layers
                )));
            }
        }
        let cache_positions: Vec<usize> = cache
            .map(|v| (v.base_position..v.base_position + v.len).collect())
            .unwrap_or_default();

        let e = self.cond_embedding(tape, k_frames, c)?;
        let c_act = tape.silu(&e)?;
        let one = Tensor::scalar(1.0);

        let mut h = h_init;
        let mut kv_out = if want.kv {
            Some(Vec::with_capacity(self.cfg.layers))
        } else {
            None
        };
        let mut layer_states = if want.layer_states { Some(Vec::new()) } else { None };

        for (li, block) in self.params.blocks.iter().enumerate() {
            let modulation = tape.matmul(&c_act, &block.mod_w)?;
            let modulation = tape.add(&modulation, &block.mod_b)?;
            let sc1 = tape.narrow(&modulation, 1, 0, hidden)?;
            let sh1 = tape.narrow(&modulation, 1, hidden, hidden)?;
            let sc2 = tape.narrow(&modulation, 1, 2 * hidden, hidden)?;
            let sh2 = tape.narrow(&modulation, 1, 3 * hidden, hidden)?;

            // Attention with adaptive scale/shift on the normalized input.
            let a = tape.layer_norm(&h, &self.ln_gain, &self.ln_bias, 1e-5)?;
            let scale1 = tape.add(&sc1, &one)?;
            let a = tape.mul(&a, &scale1)?;
            let a = tape.add(&a, &sh1)?;
            let qkv = tape.matmul(&a, &block.qkv_w)?;
            let qkv = tape.add(&qkv, &block.qkv_b)?;
            let q = tape.narrow(&qkv, 1, 0, hidden)?;
            let kt = tape.narrow(&qkv, 1, hidden, hidden)?;
            let vt = tape.narrow(&qkv, 1, 2 * hidden, hidden)?;

            if let Some(kv) = kv_out.as_mut() {
                kv.push(LayerKv {
                    k: kt.data().to_vec(),
                    v: vt.data().to_vec(),
                });
            }

            let mut head_outs = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let qh = tape.narrow(&q, 1, head * hd, hd)?;
                let kh = tape.narrow(&kt, 1, head * hd, hd)?;
                let vh = tape.narrow(&vt, 1, head * hd, hd)?;
                let qr = self.rope(tape, &qh, positions)?;
                let kr = self.rope(tape, &kh, positions)?;

                let (k_all, v_all) = if let Some(view) = cache {
                    let (ck, cv) = view.layers[li];
                    let ck = Tensor::new(
                        vec![cache_len, hd],
                        Self::head_slice(ck, cache_len, hidden, head, hd),
                    )?;
                    let cv = Tensor::new(
                        vec![cache_len, hd],
                        Self::head_slice(cv, cache_len, hidden, head, hd),
                    )?;
                    let ck_rot = self.rope(tape, &ck, &cache_positions)?;
                    (
                        tape.concat(&[&ck_rot, &kr], 0)?,
                        tape.concat(&[&cv, &vh], 0)?,
                    )
                } else {
                    (kr, vh)
                };

                head_outs.push(masked_attention(tape, &qr, &k_all, &v_all, mask_bias)?);
            }
            let refs: Vec<&Tensor> = head_outs.iter().collect();
            let attn = tape.concat(&refs, 1)?;
            let attn = tape.matmul(&attn, &block.out_w)?;
            let attn = tape.add(&attn, &block.out_b)?;
            h = tape.add(&h, &attn)?;

            // MLP with its own scale/shift.
            let m = tape.layer_norm(&h, &self.ln_gain, &self.ln_bias, 1e-5)?;
            let scale2 = tape.add(&sc2, &one)?;
            let m = tape.mul(&m, &scale2)?;
            let m = tape.add(&m, &sh2)?;
            let mid = tape.matmul(&m, &block.mlp_in_w)?;
            let mid = tape.add(&mid, &block.mlp_in_b)?;
            let mid = tape.silu(&mid)?;
            let out = tape.matmul(&mid, &block.mlp_out_w)?;
            let out = tape.add(&out, &block.mlp_out_b)?;
            h = tape.add(&h, &out)?;

            if let Some(states) = layer_states.as_mut() {
                states.push(h.clone());
            }
        }

        let velocity = if want.head {
            let f = tape.layer_norm(&h, &self.ln_gain, &self.ln_bias, 1e-5)?;
            let v = tape.matmul(&f, &self.params.head_w)?;
            Some(tape.add(&v, &self.params.head_b)?)
        } else {
            None
        };
        Ok(PassOutput {
            velocity,
            kv: kv_out,
            layer_states,
        })
    }

    // ── Public passes ───────────────────────────────────────────────

    /// Full-window forward: velocity prediction over all frames. `x_noisy`
    /// holds the whole window (context rows are ignored through routing),
    /// `x_clean` the leading clean frames. The mask family governs who
    /// attends whom; block-causal masks accept windows longer than one
    /// `s + o` span for recompute references.
    pub fn forward_full(
        &self,
        tape: &mut Tape,
        x_noisy: &Tensor,
        x_clean: &LatentSequence,
        k: f32,
        c: &ConditionInput,
        spec: &AttentionMaskSpec,
    ) -> Result<Tensor> {
        Ok(self
            .full_pass(tape, x_noisy, x_clean, k, c, spec, false)?
            .velocity
            .expect("head requested"))
    }

    /// `forward_full` that also returns the hidden state after every layer,
    /// for the context-invariance checks.
    pub fn forward_full_collect(
        &self,
        tape: &mut Tape,
        x_noisy: &Tensor,
        x_clean: &LatentSequence,
        k: f32,
        c: &ConditionInput,
        spec: &AttentionMaskSpec,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let out = self.full_pass(tape, x_noisy, x_clean, k, c, spec, true)?;
        Ok((
            out.velocity.expect("head requested"),
            out.layer_states.expect("layer states requested"),
        ))
    }

    fn full_pass(
        &self,
        tape: &mut Tape,
        x_noisy: &Tensor,
        x_clean: &LatentSequence,
        k: f32,
        c: &ConditionInput,
        spec: &AttentionMaskSpec,
        collect_layers: bool,
    ) -> Result<PassOutput> {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::contract(format!("noise level {k} outside [0, 1]")));
        }
        let frames = x_noisy.shape()[0];
        let ctx = x_clean.frames();
        match spec.family {
            MaskFamily::EncDec => {
                if ctx != spec.context_frames || frames != spec.context_frames + spec.target_frames
                {
                    return Err(Error::config(format!(
                        "enc-dec pass wants s={} o={}, got ctx={ctx} frames={frames}",
                        spec.context_frames, spec.target_frames
                    )));
                }
            }
            MaskFamily::BlockCausal => {
                if frames != ctx + spec.target_frames {
                    return Err(Error::config(format!(
                        "block-causal pass wants ctx + o frames, got ctx={ctx} frames={frames}"
                    )));
                }
            }
            MaskFamily::Bidirectional => {}
        }
        let mask = build_mask(spec, frames)?;
        let bias = mask.bias_tensor();
        let h = self.input_project(tape, x_noisy, x_clean, c)?;
        let mut k_frames = vec![0.0f32; frames];
        k_frames[ctx..].fill(k);
        let positions: Vec<usize> = (0..frames).collect();
        self.run(
            tape,
            h,
            &k_frames,
            c,
            &positions,
            None,
            Some(&bias),
            Want {
                head: true,
                kv: false,
                layer_states: collect_layers,
            },
        )
    }

    /// Encodes clean frames at noise level 0 into per-layer K/V entries.
    /// With a cache view the frames attend the cached window plus
    /// themselves (block-causal prefill and cache update); without one they
    /// attend only each other (encoder-decoder context encoding).
    pub fn encode_context(
        &self,
        tape: &mut Tape,
        frames: &LatentSequence,
        c: &ConditionInput,
        cache: Option<&KvView>,
    ) -> Result<KvEntries> {
        let n = frames.frames();
        if n == 0 {
            return Err(Error::contract("encode of zero frames"));
        }
        if frames.channels() != self.cfg.channels {
            return Err(Error::dim(format!(
                "encode frames have {} channels, model wants {}",
                frames.channels(),
                self.cfg.channels
            )));
        }
        let cache_len = cache.map(|v| v.len).unwrap_or(0);
        let base = cache.map(|v| v.base_position).unwrap_or(0);
        let positions: Vec<usize> = (base + cache_len..base + cache_len + n).collect();

        // Input features: the routed noisy part is zero (clean frames carry
        // no noise), the concat channel holds the frames themselves.
        let ch = self.cfg.channels;
        let zeros = Tensor::zeros(vec![n, ch]);
        let mut concat = vec![0.0f32; n * ch];
        for t in 0..n {
            if cache_len + t >= c.null_context_frames {
                concat[t * ch..(t + 1) * ch].copy_from_slice(frames.frame(t));
            }
        }
        let concat = Tensor::new(vec![n, ch], concat)?;
        let lc = self.cfg.local_cond_channels;
        let x_in = if lc == 0 {
            tape.concat(&[&zeros, &concat], 1)?
        } else {
            let window = self.cfg.window();
            let local = match c.effective_local(window, self.cfg.context_frames, lc)? {
                Some(v) => {
                    if cache_len + n > window {
                        return Err(Error::dim(format!(
                            "encode spans frames up to {} but local conditions cover {window}",
                            cache_len + n
                        )));
                    }
                    Tensor::new(vec![n, lc], v[cache_len * lc..(cache_len + n) * lc].to_vec())?
                }
                None => Tensor::zeros(vec![n, lc]),
            };
            tape.concat(&[&zeros, &concat, &local], 1)?
        };
        let h = tape.matmul(&x_in, &self.params.input_w)?;
        let h = tape.add(&h, &self.params.input_b)?;

        let k_frames = vec![0.0f32; n];
        let out = self.run(
            tape,
            h,
            &k_frames,
            c,
            &positions,
            cache,
            None,
            Want {
                head: false,
                kv: true,
                layer_states: false,
            },
        )?;
        Ok(KvEntries {
            frames: n,
            layers: out.kv.expect("kv requested"),
        })
    }

    /// Velocity over the target frames only, attending cached context plus
    /// the targets themselves.
    pub fn forward_decode(
        &self,
        tape: &mut Tape,
        x_target: &Tensor,
        k: f32,
        c: &ConditionInput,
        cache: &KvView,
    ) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::contract(format!("noise level {k} outside [0, 1]")));
        }
        let sh = x_target.shape();
        let o = self.cfg.target_frames;
        if sh.len() != 2 || sh[0] != o || sh[1] != self.cfg.channels {
            return Err(Error::dim(format!(
                "decode target must be [{o}, {}], got {sh:?}",
                self.cfg.channels
            )));
        }
        if cache.len != self.cfg.context_frames {
            return Err(Error::contract(format!(
                "decode needs {} cached frames, cache holds {}",
                self.cfg.context_frames, cache.len
            )));
        }
        let s = self.cfg.context_frames;
        let positions: Vec<usize> =
            (cache.base_position + s..cache.base_position + s + o).collect();

        let ch = self.cfg.channels;
        let zeros = Tensor::zeros(vec![o, ch]);
        let lc = self.cfg.local_cond_channels;
        let x_in = if lc == 0 {
            tape.concat(&[x_target, &zeros], 1)?
        } else {
            let window = self.cfg.window();
            let local = match c.effective_local(window, s, lc)? {
                Some(v) => Tensor::new(vec![o, lc], v[s * lc..(s + o) * lc].to_vec())?,
                None => Tensor::zeros(vec![o, lc]),
            };
            tape.concat(&[x_target, &zeros, &local], 1)?
        };
        let h = tape.matmul(&x_in, &self.params.input_w)?;
        let h = tape.add(&h, &self.params.input_b)?;

        let k_frames = vec![k; o];
        let out = self.run(
            tape,
            h,
            &k_frames,
            c,
            &positions,
            Some(cache),
            None,
            Want {
                head: true,
                kv: false,
                layer_states: false,
            },
        )?;
        Ok(out.velocity.expect("head requested"))
    }

    // ── Checkpointing ───────────────────────────────────────────────

    pub fn to_checkpoint(&self, extra: Vec<(String, Vec<usize>, Vec<f32>)>) -> Checkpoint {
        let mut blobs: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .params
            .named()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.data().to_vec()))
            .collect();
        blobs.extend(extra);
        Checkpoint {
            config: self.cfg,
            blobs,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<DiT> {
        let cfg = ckpt.config;
        cfg.validate()?;
        let mut model = DiT::new(cfg, 0)?;
        for (name, t) in model.params.named_mut() {
            let (_, shape, data) = ckpt.find(&name).ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint is missing parameter {name}"),
            })?;
            if shape != t.shape() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "parameter {name} has shape {shape:?}, model wants {:?}",
                        t.shape()
                    ),
                });
            }
            *t = Tensor::param(shape.clone(), data.clone())?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
