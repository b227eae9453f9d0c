//! Uncached recompute reference for the block-causal engine.
//!
//! Replays the same generation without any K/V cache: every denoising step
//! runs one full forward over the entire history (prime plus everything
//! emitted so far) under the banded block-causal mask, in which each
//! `o`-block attends itself and the `s/o` blocks before it. That is exactly
//! the attention pattern the cached engine realizes incrementally, so the
//! two paths must agree frame for frame up to float noise.
//!
//! The reference requires a fully-primed start and a constant condition:
//! cached context entries bake in the condition active at their encode time,
//! and a growing history cannot replay per-block condition changes.

use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::latent::LatentSequence;
use crate::model::{AttentionMaskSpec, ConditionInput, DiT, MaskFamily};
use crate::tensor::{Tape, Tensor};

use super::BlockSampler;

pub fn blockcausal_recompute(
    model: &DiT,
    prime: &LatentSequence,
    c: &ConditionInput,
    sampler: &SamplerConfig,
    blocks: usize,
    stream_seed: u64,
) -> Result<LatentSequence> {
    let cfg = &model.cfg;
    let (s, o, ch) = (cfg.context_frames, cfg.target_frames, cfg.channels);
    if prime.frames() != s {
        return Err(Error::contract(format!(
            "reference needs a fully primed context of {s} frames, got {}",
            prime.frames()
        )));
    }
    if c.null_context_frames != 0 {
        return Err(Error::contract(
            "reference requires a fully-primed (non-null) context",
        ));
    }
    if s + blocks * o > cfg.max_positions {
        return Err(Error::config(format!(
            "recompute history of {} frames exceeds max_positions {}",
            s + blocks * o,
            cfg.max_positions
        )));
    }
    sampler.validate()?;
    let schedule = sampler.schedule()?;
    let lc = cfg.local_cond_channels;

    // Local-condition history mirrors what each frame's encode pass saw:
    // the window-relative visibility cutoff applied at its birth position.
    let window_local = c.effective_local(cfg.window(), s, lc)?;
    let mut local_history: Vec<f32> = window_local
        .as_ref()
        .map(|v| v[..s * lc].to_vec())
        .unwrap_or_default();
    let target_local: Option<Vec<f32>> = window_local.as_ref().map(|v| v[s * lc..].to_vec());

    let mut history = prime.clone();
    let mut out = LatentSequence::zeros(ch, 0);
    let spec = AttentionMaskSpec::new(MaskFamily::BlockCausal, s, o);

    for block in 0..blocks {
        let driver = BlockSampler {
            sampler,
            schedule: &schedule,
            stream: stream_seed,
            block: block as u64,
            channels: ch,
            target_frames: o,
            frame_offset: s,
            grad_final_only: false,
        };
        let mut tape = Tape::no_grad();

        let make_cond = |global: Option<Vec<f32>>, with_local: bool| -> ConditionInput {
            let local = if with_local && lc > 0 && window_local.is_some() {
                let mut full = local_history.clone();
                full.extend_from_slice(target_local.as_ref().unwrap());
                Some(full)
            } else {
                None
            };
            ConditionInput {
                global_vec: global,
                local_chans: local,
                null_context_frames: 0,
                future_visibility: i64::MAX,
            }
        };
        let cond = make_cond(c.global_vec.clone(), true);
        let uncond = make_cond(None, false);

        let forward = |tape: &mut Tape, x: &Tensor, k: f32, which: &ConditionInput| {
            let ctx_len = history.frames();
            let mut window = vec![0.0f32; ctx_len * ch];
            window.extend_from_slice(x.data());
            let window = Tensor::new(vec![ctx_len + o, ch], window)?;
            let v = model.forward_full(tape, &window, &history, k, which, &spec)?;
            tape.narrow(&v, 0, ctx_len, o)
        };
        let mut predict =
            |tape: &mut Tape, x: &Tensor, k: f32, _step: usize| forward(tape, x, k, &cond);
        let emitted = if sampler.guidance_multiplier() == 2 {
            let mut predict_uncond =
                |tape: &mut Tape, x: &Tensor, k: f32, _step: usize| forward(tape, x, k, &uncond);
            driver.run(&mut tape, &mut predict, Some(&mut predict_uncond))?
        } else {
            driver.run(&mut tape, &mut predict, None)?
        };

        let emitted = LatentSequence::from_tensor(&emitted)?;
        history.append(&emitted)?;
        if let Some(tl) = &target_local {
            local_history.extend_from_slice(tl);
        }
        out.append(&emitted)?;
    }
    Ok(out)
}
