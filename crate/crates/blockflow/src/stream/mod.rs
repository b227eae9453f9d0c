//! Streaming inference engines.
//!
//! Three ways to emit a latent stream block by block:
//!
//! * `Baseline` — the full-window loop: every diffusion step runs a
//!   whole-window forward, context frames are reset to freshly corrupted
//!   clean latents each step. `B * K` full passes.
//! * `EncDec` — encode the clean context once per block into a K/V cache,
//!   then run the `K` denoising steps as target-only decode passes.
//!   `B` encodes, `B * K` decodes.
//! * `BlockCausal` — prefill the context block by block once, then per block
//!   decode `K` times and encode only the newly emitted block, evicting the
//!   oldest one. `s/o + B` encodes, `B * K` decodes.
//!
//! All noise is counter-keyed by (stream, block, purpose, step, frame), so
//! engines that draw different amounts of auxiliary noise still consume
//! identical noise where it matters and can be compared frame by frame.

pub mod reference;

use crate::error::{Error, Result};
use crate::flow::{self, NoiseSchedule, SamplerConfig, SamplerKind};
use crate::latent::LatentSequence;
use crate::model::{ConditionInput, DiT, KvEntries, KvView, LayerKv, MaskFamily};
use crate::rng::{gaussian_frame, NoiseKey, Purpose};
use crate::tensor::{Tape, Tensor};

/// Per-layer key/value storage for one streaming session.
#[derive(Debug, Clone)]
pub struct KVCache {
    layers: Vec<LayerKv>,
    len: usize,
    capacity: usize,
    hidden: usize,
}

impl KVCache {
    pub fn new(layers: usize, capacity: usize, hidden: usize) -> KVCache {
        KVCache {
            layers: (0..layers)
                .map(|_| LayerKv {
                    k: Vec::with_capacity(capacity * hidden),
                    v: Vec::with_capacity(capacity * hidden),
                })
                .collect(),
            len: 0,
            capacity,
            hidden,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.k.clear();
            l.v.clear();
        }
        self.len = 0;
    }

    pub fn append(&mut self, entries: &KvEntries) -> Result<()> {
        if entries.layers.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "cache has {} layers, entries have {}",
                self.layers.len(),
                entries.layers.len()
            )));
        }
        if self.len + entries.frames > self.capacity {
            return Err(Error::contract(format!(
                "cache capacity exceeded: {} + {} > {}",
                self.len, entries.frames, self.capacity
            )));
        }
        for (dst, src) in self.layers.iter_mut().zip(&entries.layers) {
            dst.k.extend_from_slice(&src.k);
            dst.v.extend_from_slice(&src.v);
        }
        self.len += entries.frames;
        Ok(())
    }

    /// Removes the oldest `n` frames.
    pub fn slide_evict(&mut self, n: usize) -> Result<()> {
        if n > self.len {
            return Err(Error::contract(format!(
                "cannot evict {n} frames from a cache of {}",
                self.len
            )));
        }
        for l in &mut self.layers {
            l.k.drain(..n * self.hidden);
            l.v.drain(..n * self.hidden);
        }
        self.len -= n;
        Ok(())
    }

    pub fn view(&self) -> KvView<'_> {
        KvView {
            layers: self
                .layers
                .iter()
                .map(|l| (l.k.as_slice(), l.v.as_slice()))
                .collect(),
            len: self.len,
            base_position: 0,
        }
    }
}

/// Which inference loop a session runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    /// Full-window loop; the mask family is configurable so the enc-dec
    /// masked variant can serve as the uncached reference for the cached
    /// engine, while the bidirectional variant reproduces the standard
    /// outpainting pipeline.
    Baseline { mask: MaskFamily },
    EncDec,
    BlockCausal,
}

/// Forward-pass counters split by pass type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NfeCounters {
    pub full_passes: u64,
    pub encode_passes: u64,
    pub decode_passes: u64,
}

/// Closed-form pass counts for a given engine and run shape.
pub fn predicted_nfe(
    engine: Engine,
    blocks: u64,
    steps: u64,
    context_frames: u64,
    target_frames: u64,
    guidance: u64,
) -> NfeCounters {
    match engine {
        Engine::Baseline { .. } => NfeCounters {
            full_passes: blocks * steps * guidance,
            encode_passes: 0,
            decode_passes: 0,
        },
        Engine::EncDec => NfeCounters {
            full_passes: 0,
            encode_passes: blocks * guidance,
            decode_passes: blocks * steps * guidance,
        },
        Engine::BlockCausal => {
            let prefill = if target_frames == 0 {
                0
            } else {
                context_frames / target_frames
            };
            NfeCounters {
                full_passes: 0,
                encode_passes: (prefill + blocks) * guidance,
                decode_passes: blocks * steps * guidance,
            }
        }
    }
}

/// Verified counter record: measured counters plus the closed-form
/// prediction they were checked against.
#[derive(Debug, Clone, Copy)]
pub struct NfeReport {
    pub engine: Engine,
    pub blocks: u64,
    pub steps: u64,
    pub guidance: u64,
    pub measured: NfeCounters,
    pub predicted: NfeCounters,
}

// ── Per-block sampling driver ───────────────────────────────────────

/// Runs one block's denoising loop. The prediction closures receive
/// `(tape, x_target, noise_level, step_index)` and return velocity over the
/// target frames; how that forward happens (cached decode, full window) is
/// the engine's business.
pub(crate) struct BlockSampler<'a> {
    pub sampler: &'a SamplerConfig,
    pub schedule: &'a NoiseSchedule,
    pub stream: u64,
    pub block: u64,
    pub channels: usize,
    pub target_frames: usize,
    /// Window position of the first target frame; noise keys use
    /// window-relative frame indices shared by cached and uncached paths.
    pub frame_offset: usize,
    /// Record only the final denoising step on the tape (rollout training).
    pub grad_final_only: bool,
}

type PredictFn<'c> = dyn FnMut(&mut Tape, &Tensor, f32, usize) -> Result<Tensor> + 'c;

impl<'a> BlockSampler<'a> {
    fn noise(&self, purpose: Purpose, step: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.target_frames * self.channels);
        for t in 0..self.target_frames {
            data.extend(gaussian_frame(
                NoiseKey {
                    stream: self.stream,
                    block: self.block,
                    purpose,
                    step: step as u64,
                    frame: (self.frame_offset + t) as u64,
                },
                self.channels,
            ));
        }
        Tensor::new(vec![self.target_frames, self.channels], data).expect("sized")
    }

    pub fn init_noise(&self) -> Tensor {
        self.noise(Purpose::TargetInit, 0)
    }

    /// Denoises from pure noise to the emitted block.
    pub fn run(
        &self,
        tape: &mut Tape,
        predict: &mut PredictFn<'_>,
        predict_uncond: Option<&mut PredictFn<'_>>,
    ) -> Result<Tensor> {
        self.sampler.validate()?;
        let needs_uncond = self.sampler.guidance_multiplier() == 2;
        if needs_uncond && predict_uncond.is_none() {
            return Err(Error::contract(
                "sampler needs an unconditional branch but none was provided",
            ));
        }
        let mut uncond = predict_uncond;
        let was_recording = tape.is_recording();
        let steps = self.schedule.steps();
        let mut x = self.init_noise();
        for (idx, (k_j, k_prev)) in self.schedule.transitions().enumerate() {
            let final_step = idx + 1 == steps;
            if self.grad_final_only {
                tape.set_recording(was_recording && final_step);
            }
            let v_cond = predict(tape, &x, k_j, idx)?;
            x = match self.sampler.kind {
                SamplerKind::Euler => {
                    let v_hat = if needs_uncond {
                        let v_u = uncond.as_mut().unwrap()(tape, &x, k_j, idx)?;
                        flow::cfg_combine(tape, &v_cond, &v_u, self.sampler.cfg_weight)?
                    } else {
                        v_cond
                    };
                    flow::euler_step(tape, &v_hat, &x, k_j, k_prev)?
                }
                SamplerKind::PingPong => {
                    let v_hat = if needs_uncond {
                        let v_u = uncond.as_mut().unwrap()(tape, &x, k_j, idx)?;
                        flow::cfg_combine(tape, &v_cond, &v_u, self.sampler.cfg_weight)?
                    } else {
                        v_cond
                    };
                    let x0 = flow::x0_from_v(tape, &x, k_j, &v_hat)?;
                    let eps = self.noise(Purpose::Renoise, idx);
                    flow::pingpong_step(tape, &x0, k_prev, &eps)?
                }
                SamplerKind::GuidedPingPong => {
                    let v_u = uncond.as_mut().unwrap()(tape, &x, k_j, idx)?;
                    let x0_c = flow::x0_from_v(tape, &x, k_j, &v_cond)?;
                    let x0_u = flow::x0_from_v(tape, &x, k_j, &v_u)?;
                    let x0_g =
                        flow::guided_denoise(tape, &x0_c, &x0_u, self.sampler.guided_weight)?;
                    let eps = self.noise(Purpose::Renoise, idx);
                    flow::guided_pingpong_step(tape, &x0_g, &x0_u, k_prev, &eps)?
                }
            };
        }
        if self.grad_final_only {
            tape.set_recording(was_recording);
        }
        Ok(x)
    }
}

// ── Streaming session ───────────────────────────────────────────────

/// One streaming generation: a model handle, a context buffer of the most
/// recent `s` frames, the engine-specific caches, and pass counters.
/// Blocks are pulled one at a time with [`StreamSession::next_block`].
pub struct StreamSession<'m> {
    model: &'m DiT,
    engine: Engine,
    sampler: SamplerConfig,
    context: LatentSequence,
    primed_frames: usize,
    cache: KVCache,
    uncond_cache: KVCache,
    prefilled: bool,
    blocks_emitted: u64,
    stream_seed: u64,
    nfe: NfeCounters,
}

impl<'m> StreamSession<'m> {
    pub fn new(
        model: &'m DiT,
        engine: Engine,
        sampler: SamplerConfig,
        stream_seed: u64,
    ) -> Result<StreamSession<'m>> {
        sampler.validate()?;
        let cfg = &model.cfg;
        let capacity = cfg.context_frames + cfg.target_frames;
        Ok(StreamSession {
            model,
            engine,
            sampler,
            context: LatentSequence::zeros(cfg.channels, cfg.context_frames),
            primed_frames: 0,
            cache: KVCache::new(cfg.layers, capacity, cfg.hidden),
            uncond_cache: KVCache::new(cfg.layers, capacity, cfg.hidden),
            prefilled: false,
            blocks_emitted: 0,
            stream_seed,
            nfe: NfeCounters::default(),
        })
    }

    /// Fills the context buffer with the last `s` frames of `prime`
    /// (zero-padded on the left when shorter).
    pub fn prime(&mut self, prime: &LatentSequence) -> Result<()> {
        if prime.channels() != self.model.cfg.channels {
            return Err(Error::dim(format!(
                "prime has {} channels, model wants {}",
                prime.channels(),
                self.model.cfg.channels
            )));
        }
        if self.prefilled || self.blocks_emitted > 0 {
            return Err(Error::contract("cannot prime a session that already ran"));
        }
        let s = self.model.cfg.context_frames;
        self.context = prime.tail_padded(s);
        self.primed_frames = prime.frames().min(s);
        Ok(())
    }

    pub fn context(&self) -> &LatentSequence {
        &self.context
    }

    pub fn nfe(&self) -> NfeCounters {
        self.nfe
    }

    pub fn blocks_emitted(&self) -> u64 {
        self.blocks_emitted
    }

    pub fn engine(&self) -> Engine {
        self.engine
    }

    pub fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    /// Zeroes the first `frames` frames of the context buffer (prompt
    /// transition context dropout).
    pub fn drop_context_head(&mut self, frames: usize) {
        let n = frames.min(self.model.cfg.context_frames);
        for t in 0..n {
            self.context.frame_mut(t).fill(0.0);
        }
    }

    /// Session-managed condition adjustments: the caller supplies global and
    /// local conditions, the session tracks how much of the context is real.
    fn effective_cond(&self, c: &ConditionInput) -> ConditionInput {
        let s = self.model.cfg.context_frames;
        ConditionInput {
            null_context_frames: s - self.primed_frames,
            ..c.clone()
        }
    }

    fn uncond_of(c: &ConditionInput) -> ConditionInput {
        ConditionInput {
            global_vec: None,
            local_chans: None,
            ..c.clone()
        }
    }

    fn needs_uncond(&self) -> bool {
        self.sampler.guidance_multiplier() == 2
    }

    fn slide(&mut self, emitted: &LatentSequence) {
        let s = self.model.cfg.context_frames;
        let o = self.model.cfg.target_frames;
        if s == 0 {
            return;
        }
        let mut joined = self.context.clone();
        joined.append(emitted).expect("channel counts match");
        self.context = joined.tail_padded(s);
        self.primed_frames = (self.primed_frames + o).min(s);
    }

    /// Generates and emits the next `o`-frame block.
    pub fn next_block(&mut self, c: &ConditionInput) -> Result<LatentSequence> {
        let cond = self.effective_cond(c);
        let uncond = Self::uncond_of(&cond);
        let sampler = self.sampler.clone();
        let schedule = sampler.schedule()?;
        let cfg = &self.model.cfg;
        let driver = BlockSampler {
            sampler: &sampler,
            schedule: &schedule,
            stream: self.stream_seed,
            block: self.blocks_emitted,
            channels: cfg.channels,
            target_frames: cfg.target_frames,
            frame_offset: cfg.context_frames,
            grad_final_only: false,
        };
        let mut tape = Tape::no_grad();
        let emitted = match self.engine {
            Engine::Baseline { mask } => {
                self.baseline_block(&mut tape, &driver, &cond, &uncond, mask)?
            }
            Engine::EncDec => self.encdec_block(&mut tape, &driver, &cond, &uncond)?,
            Engine::BlockCausal => self.blockcausal_block(&mut tape, &driver, &cond, &uncond)?,
        };
        let emitted = LatentSequence::from_tensor(&emitted)?;
        self.slide(&emitted);
        self.blocks_emitted += 1;
        Ok(emitted)
    }

    fn baseline_block(
        &mut self,
        tape: &mut Tape,
        driver: &BlockSampler,
        cond: &ConditionInput,
        uncond: &ConditionInput,
        mask: MaskFamily,
    ) -> Result<Tensor> {
        let cfg = &self.model.cfg;
        let (s, o, ch) = (cfg.context_frames, cfg.target_frames, cfg.channels);
        let spec = crate::model::AttentionMaskSpec::new(mask, s, o);
        let model = self.model;
        let context = &self.context;
        let stream = self.stream_seed;
        let block = self.blocks_emitted;
        let full_count = std::cell::Cell::new(0u64);

        // Context rows of the window: pure noise before the first step, then
        // reset to freshly corrupted clean latents at each level. Under the
        // routed input projection these rows never reach the network, but the
        // loop runs them faithfully.
        let ctx_rows_at = |k: f32, step: usize| -> Vec<f32> {
            let first = step == 0;
            let mut rows = Vec::with_capacity(s * ch);
            for t in 0..s {
                let purpose = if first { Purpose::TargetInit } else { Purpose::ContextReset };
                let eps = gaussian_frame(
                    NoiseKey {
                        stream,
                        block,
                        purpose,
                        step: step as u64,
                        frame: t as u64,
                    },
                    ch,
                );
                for (c_idx, e) in eps.iter().enumerate() {
                    let clean = context.frame(t)[c_idx];
                    rows.push(if first { *e } else { (1.0 - k) * clean + k * e });
                }
            }
            rows
        };

        let forward = |tape: &mut Tape,
                       x_target: &Tensor,
                       k: f32,
                       step: usize,
                       which: &ConditionInput|
         -> Result<Tensor> {
            let mut window = ctx_rows_at(k, step);
            window.extend_from_slice(x_target.data());
            let window = Tensor::new(vec![s + o, ch], window)?;
            let v = model.forward_full(tape, &window, context, k, which, &spec)?;
            full_count.set(full_count.get() + 1);
            tape.narrow(&v, 0, s, o)
        };

        let mut predict =
            |tape: &mut Tape, x: &Tensor, k: f32, step: usize| forward(tape, x, k, step, cond);
        let out = if self.needs_uncond() {
            let mut predict_uncond =
                |tape: &mut Tape, x: &Tensor, k: f32, step: usize| forward(tape, x, k, step, uncond);
            driver.run(tape, &mut predict, Some(&mut predict_uncond))?
        } else {
            driver.run(tape, &mut predict, None)?
        };
        self.nfe.full_passes += full_count.get();
        Ok(out)
    }

    fn encdec_block(
        &mut self,
        tape: &mut Tape,
        driver: &BlockSampler,
        cond: &ConditionInput,
        uncond: &ConditionInput,
    ) -> Result<Tensor> {
        let s = self.model.cfg.context_frames;
        // Rebuild the cache over the current context each block.
        self.cache.clear();
        if s > 0 {
            let entries = self.model.encode_context(tape, &self.context, cond, None)?;
            self.nfe.encode_passes += 1;
            self.cache.append(&entries)?;
        }
        if self.needs_uncond() {
            self.uncond_cache.clear();
            if s > 0 {
                let entries = self.model.encode_context(tape, &self.context, uncond, None)?;
                self.nfe.encode_passes += 1;
                self.uncond_cache.append(&entries)?;
            }
        }
        self.run_cached(tape, driver, cond, uncond)
    }

    fn blockcausal_block(
        &mut self,
        tape: &mut Tape,
        driver: &BlockSampler,
        cond: &ConditionInput,
        uncond: &ConditionInput,
    ) -> Result<Tensor> {
        let cfg = &self.model.cfg;
        let (s, o) = (cfg.context_frames, cfg.target_frames);
        if !self.prefilled {
            for b in 0..s / o {
                let block = self.context.slice(b * o, o)?;
                let entries = {
                    let view = self.cache.view();
                    let existing = if view.len == 0 { None } else { Some(&view) };
                    self.model.encode_context(tape, &block, cond, existing)?
                };
                self.nfe.encode_passes += 1;
                self.cache.append(&entries)?;
                if self.needs_uncond() {
                    let entries = {
                        let view = self.uncond_cache.view();
                        let existing = if view.len == 0 { None } else { Some(&view) };
                        self.model.encode_context(tape, &block, uncond, existing)?
                    };
                    self.nfe.encode_passes += 1;
                    self.uncond_cache.append(&entries)?;
                }
            }
            self.prefilled = true;
        }
        let emitted = self.run_cached(tape, driver, cond, uncond)?;

        // Update the cache with the newly generated block, then evict the
        // oldest one.
        let block = LatentSequence::from_tensor(&emitted)?;
        let entries = {
            let view = self.cache.view();
            self.model
                .encode_context(tape, &block, cond, Some(&view))?
        };
        self.nfe.encode_passes += 1;
        self.cache.append(&entries)?;
        self.cache.slide_evict(o)?;
        if self.needs_uncond() {
            let entries = {
                let view = self.uncond_cache.view();
                self.model
                    .encode_context(tape, &block, uncond, Some(&view))?
            };
            self.nfe.encode_passes += 1;
            self.uncond_cache.append(&entries)?;
            self.uncond_cache.slide_evict(o)?;
        }
        Ok(emitted)
    }

    fn run_cached(
        &mut self,
        tape: &mut Tape,
        driver: &BlockSampler,
        cond: &ConditionInput,
        uncond: &ConditionInput,
    ) -> Result<Tensor> {
        let model = self.model;
        let cache = &self.cache;
        let dec_count = std::cell::Cell::new(0u64);
        let mut predict = |tape: &mut Tape, x: &Tensor, k: f32, _step: usize| {
            let v = model.forward_decode(tape, x, k, cond, &cache.view())?;
            dec_count.set(dec_count.get() + 1);
            Ok(v)
        };
        let out = if self.needs_uncond() {
            let uncache = &self.uncond_cache;
            let mut predict_uncond = |tape: &mut Tape, x: &Tensor, k: f32, _step: usize| {
                let v = model.forward_decode(tape, x, k, uncond, &uncache.view())?;
                dec_count.set(dec_count.get() + 1);
                Ok(v)
            };
            driver.run(tape, &mut predict, Some(&mut predict_uncond))?
        } else {
            driver.run(tape, &mut predict, None)?
        };
        self.nfe.decode_passes += dec_count.get();
        Ok(out)
    }

    /// Measured counters next to their closed-form prediction; errors when
    /// they disagree.
    pub fn report_nfe(&self, steps: u64) -> Result<NfeReport> {
        let cfg = &self.model.cfg;
        let predicted = predicted_nfe(
            self.engine,
            self.blocks_emitted,
            steps,
            cfg.context_frames as u64,
            cfg.target_frames as u64,
            self.sampler.guidance_multiplier(),
        );
        if predicted != self.nfe {
            return Err(Error::contract(format!(
                "NFE counters {:?} disagree with closed form {:?}",
                self.nfe, predicted
            )));
        }
        Ok(NfeReport {
            engine: self.engine,
            blocks: self.blocks_emitted,
            steps,
            guidance: self.sampler.guidance_multiplier(),
            measured: self.nfe,
            predicted,
        })
    }
}

// ── Whole-run helpers ───────────────────────────────────────────────

fn run_blocks(
    session: &mut StreamSession,
    blocks: usize,
    c: &ConditionInput,
) -> Result<LatentSequence> {
    if blocks < 1 {
        return Err(Error::contract("at least one block must be generated"));
    }
    let mut out = LatentSequence::zeros(session.model.cfg.channels, 0);
    for _ in 0..blocks {
        let block = session.next_block(c)?;
        out.append(&block)?;
    }
    Ok(out)
}

pub fn run_baseline(
    session: &mut StreamSession,
    blocks: usize,
    c: &ConditionInput,
) -> Result<LatentSequence> {
    match session.engine {
        Engine::Baseline { .. } => run_blocks(session, blocks, c),
        _ => Err(Error::contract("session engine is not Baseline")),
    }
}

pub fn run_encdec(
    session: &mut StreamSession,
    blocks: usize,
    c: &ConditionInput,
) -> Result<LatentSequence> {
    match session.engine {
        Engine::EncDec => run_blocks(session, blocks, c),
        _ => Err(Error::contract("session engine is not EncDec")),
    }
}

pub fn run_blockcausal(
    session: &mut StreamSession,
    blocks: usize,
    c: &ConditionInput,
) -> Result<LatentSequence> {
    match session.engine {
        Engine::BlockCausal => run_blocks(session, blocks, c),
        _ => Err(Error::contract("session engine is not BlockCausal")),
    }
}

// ── Prompt transitions ──────────────────────────────────────────────

/// Cross-fade between two conditions over a fixed number of blocks.
#[derive(Debug, Clone)]
pub struct TransitionConfig {
    pub cond_a: ConditionInput,
    pub cond_b: ConditionInput,
    /// Weight of `cond_b` per block; entries must lie in [0, 1].
    pub schedule: Vec<f32>,
    /// Frames of context zeroed once, at the first block where `cond_b`
    /// becomes dominant (weight > 0.5).
    pub context_dropout: usize,
}

impl TransitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::config("transition schedule is empty"));
        }
        if self.schedule.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::config(format!(
                "transition weights must lie in [0, 1], got {:?}",
                self.schedule
            )));
        }
        Ok(())
    }
}

/// Scales the paper-scale context dropout of 180 frames (out of a 192-frame
/// context) to this model's context length.
pub fn default_context_dropout(context_frames: usize) -> usize {
    ((180.0 * context_frames as f64) / 192.0).round() as usize
}

#[derive(Debug, Clone)]
pub struct TransitionReport {
    pub latents: LatentSequence,
    pub dropout_events: usize,
    pub dropout_block: Option<usize>,
    /// Blocks (indices into the run) generated at full target weight.
    pub settled_blocks: Vec<usize>,
}

fn blend_conditions(a: &ConditionInput, b: &ConditionInput, w: f32) -> ConditionInput {
    if w == 0.0 {
        return a.clone();
    }
    if w == 1.0 {
        return b.clone();
    }
    let blend_vec = |x: Option<&Vec<f32>>, y: Option<&Vec<f32>>| -> Option<Vec<f32>> {
        match (x, y) {
            (None, None) => None,
            _ => {
                let len = x.map(|v| v.len()).or_else(|| y.map(|v| v.len())).unwrap();
                let zero = vec![0.0f32; len];
                let xv = x.map(|v| v.as_slice()).unwrap_or(&zero);
                let yv = y.map(|v| v.as_slice()).unwrap_or(&zero);
                Some(
                    xv.iter()
                        .zip(yv)
                        .map(|(p, q)| (1.0 - w) * p + w * q)
                        .collect(),
                )
            }
        }
    };
    ConditionInput {
        global_vec: blend_vec(a.global_vec.as_ref(), b.global_vec.as_ref()),
        local_chans: blend_vec(a.local_chans.as_ref(), b.local_chans.as_ref()),
        null_context_frames: a.null_context_frames,
        future_visibility: a.future_visibility,
    }
}

/// Runs a prompt transition on an enc-dec session with the guided ping-pong
/// sampler: per block the condition is the scheduled blend, and the first
/// `context_dropout` frames of context are zeroed exactly once when the
/// target condition first dominates.
pub fn run_transition(
    session: &mut StreamSession,
    cfg: &TransitionConfig,
) -> Result<TransitionReport> {
    cfg.validate()?;
    if session.engine != Engine::EncDec {
        return Err(Error::config("prompt transitions require the EncDec engine"));
    }
    if session.sampler.kind != SamplerKind::GuidedPingPong {
        return Err(Error::config(
            "prompt transitions require the guided ping-pong sampler",
        ));
    }
    let mut out = LatentSequence::zeros(session.model.cfg.channels, 0);
    let mut dropout_events = 0;
    let mut dropout_block = None;
    let mut settled = Vec::new();
    for (i, &w) in cfg.schedule.iter().enumerate() {
        if w > 0.5 && dropout_events == 0 {
            session.drop_context_head(cfg.context_dropout);
            dropout_events += 1;
            dropout_block = Some(i);
        }
        let c = blend_conditions(&cfg.cond_a, &cfg.cond_b, w);
        let block = session.next_block(&c)?;
        if w == 1.0 {
            settled.push(i);
        }
        out.append(&block)?;
    }
    Ok(TransitionReport {
        latents: out,
        dropout_events,
        dropout_block,
        settled_blocks: settled,
    })
}
