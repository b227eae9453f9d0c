//! Flow-matching math: the linear corruption path, the velocity regression
//! loss, classifier-free guidance, and the Euler / ping-pong / guided
//! ping-pong sampler steps.
//!
//! Everything here is a pure function over tensors plus an explicit tape, so
//! the same code path serves inference (non-recording tape) and
//! differentiable rollouts (recording tape).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Decreasing noise level schedule `k_K > ... > k_1`, with `k_0 = 0` implied.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    levels: Vec<f32>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<f32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("noise schedule needs at least one level"));
        }
        for w in levels.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::config(format!(
                    "noise levels must be strictly decreasing, got {levels:?}"
                )));
            }
        }
        if levels[0] > 1.0 || *levels.last().unwrap() < 0.0 {
            return Err(Error::config(format!(
                "noise levels must lie in [0, 1], got {levels:?}"
            )));
        }
        Ok(NoiseSchedule { levels })
    }

    /// Uniform spacing: `k_j = j / K` for `j = K..1`.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let levels = (1..=steps)
            .rev()
            .map(|j| j as f32 / steps as f32)
            .collect();
        NoiseSchedule::new(levels)
    }

    /// Few-step schedule {1.0, 0.75, 0.5, 0.25} truncated to `steps` entries;
    /// falls back to uniform spacing beyond four steps.
    pub fn few_step(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if steps <= 4 {
            NoiseSchedule::new([1.0, 0.75, 0.5, 0.25][..steps].to_vec())
        } else {
            NoiseSchedule::uniform(steps)
        }
    }

    pub fn steps(&self) -> usize {
        self.levels.len()
    }

    /// Levels in descending order, `k_K` first.
    pub fn levels(&self) -> &[f32] {
        &self.levels
    }

    /// (k_j, k_{j-1}) pairs walked by a sampler, ending at `k_0 = 0`.
    pub fn transitions(&self) -> impl Iterator<Item = (f32, f32)> + '_ {
        let next = self.levels.iter().skip(1).copied().chain(std::iter::once(0.0));
        self.levels.iter().copied().zip(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Euler,
    PingPong,
    /// Ping-pong that denoises with the guided estimate but renoises with the
    /// unconditional one (CFG++ adapted to the ping-pong update).
    GuidedPingPong,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Classifier-free guidance weight for the Euler path; 1 disables CFG.
    pub cfg_weight: f32,
    /// Interpolation weight for guided ping-pong denoising, in [0, 1].
    pub guided_weight: f32,
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn euler(steps: usize) -> Self {
        SamplerConfig {
            kind: SamplerKind::Euler,
            steps,
            cfg_weight: 1.0,
            guided_weight: 0.7,
            rng_seed: 0,
        }
    }

    pub fn pingpong(steps: usize) -> Self {
        SamplerConfig {
            kind: SamplerKind::PingPong,
            steps,
            cfg_weight: 1.0,
            guided_weight: 0.7,
            rng_seed: 0,
        }
    }

    pub fn guided_pingpong(steps: usize, guided_weight: f32) -> Self {
        SamplerConfig {
            kind: SamplerKind::GuidedPingPong,
            steps,
            cfg_weight: 1.0,
            guided_weight,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sampler needs at least one step"));
        }
        if self.cfg_weight < 1.0 {
            return Err(Error::config(format!(
                "cfg_weight must be >= 1, got {}",
                self.cfg_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.guided_weight) {
            return Err(Error::config(format!(
                "guided_weight must lie in [0, 1], got {}",
                self.guided_weight
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.kind {
            SamplerKind::Euler => NoiseSchedule::uniform(self.steps),
            SamplerKind::PingPong | SamplerKind::GuidedPingPong => {
                NoiseSchedule::few_step(self.steps)
            }
        }
    }

    /// Model evaluations needed per sampler step (2 when an unconditional
    /// branch is required).
    pub fn guidance_multiplier(&self) -> u64 {
        match self.kind {
            SamplerKind::Euler | SamplerKind::PingPong => {
                if self.cfg_weight > 1.0 {
                    2
                } else {
                    1
                }
            }
            SamplerKind::GuidedPingPong => 2,
        }
    }
}

// ── Core operations ─────────────────────────────────────────────────

/// `(1 - k) * x + k * eps`
pub fn forward_corrupt(tape: &mut Tape, x: &Tensor, k: f32, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::contract(format!("noise level {k} outside [0, 1]")));
    }
    if x.shape() != eps.shape() {
        return Err(Error::dim(format!(
            "corrupt shape mismatch: {:?} vs {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    let xs = tape.scale(x, 1.0 - k)?;
    let es = tape.scale(eps, k)?;
    tape.add(&xs, &es)
}

/// `eps - x`, the marginal velocity of the linear path.
pub fn marginal_velocity(tape: &mut Tape, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::dim(format!(
            "velocity shape mismatch: {:?} vs {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    tape.sub(eps, x)
}

/// Squared-error velocity regression restricted to masked frames.
///
/// `predict` receives the corrupted sequence and returns the velocity
/// estimate over all frames; the loss averages over masked frames only.
pub fn flow_loss<F>(
    tape: &mut Tape,
    predict: F,
    x: &Tensor,
    k: f32,
    eps: &Tensor,
    target_mask: &[bool],
) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let frames = x.shape()[0];
    let channels = x.shape()[1];
    if target_mask.len() != frames {
        return Err(Error::dim(format!(
            "mask covers {} frames, sequence has {frames}",
            target_mask.len()
        )));
    }
    let count = target_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::contract("flow loss needs a non-empty target mask"));
    }
    let corrupted = forward_corrupt(tape, x, k, eps)?;
    let v_hat = predict(tape, &corrupted)?;
    if v_hat.shape() != x.shape() {
        return Err(Error::dim(format!(
            "velocity prediction shape {:?} does not match input {:?}",
            v_hat.shape(),
            x.shape()
        )));
    }
    let v_target = marginal_velocity(tape, x, eps)?;
    let diff = tape.sub(&v_hat, &v_target)?;
    let sq = tape.mul(&diff, &diff)?;
    let mask_data: Vec<f32> = target_mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(channels))
        .collect();
    let mask = Tensor::new(vec![frames, channels], mask_data)?;
    let masked = tape.mul(&sq, &mask)?;
    let total = tape.sum(&masked)?;
    tape.scale(&total, 1.0 / (count * channels) as f32)
}

/// `v_uncond + w * (v_cond - v_uncond)`; `w = 1` returns the conditional
/// branch untouched.
pub fn cfg_combine(tape: &mut Tape, v_cond: &Tensor, v_uncond: &Tensor, w: f32) -> Result<Tensor> {
    if w < 1.0 {
        return Err(Error::contract(format!("cfg weight must be >= 1, got {w}")));
    }
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    let delta = tape.sub(v_cond, v_uncond)?;
    let scaled = tape.scale(&delta, w)?;
    tape.add(v_uncond, &scaled)
}

/// One Euler step of `dx/dk = v`, integrating downward from `k_j` to
/// `k_prev`: `x + (k_prev - k_j) * v`.
pub fn euler_step(
    tape: &mut Tape,
    v_hat: &Tensor,
    x_k: &Tensor,
    k_j: f32,
    k_prev: f32,
) -> Result<Tensor> {
    if k_prev >= k_j {
        return Err(Error::contract(format!(
            "euler step needs k_prev < k_j, got {k_prev} >= {k_j}"
        )));
    }
    let step = tape.scale(v_hat, k_prev - k_j)?;
    tape.add(x_k, &step)
}

/// Denoised estimate from a velocity prediction: `x_k - k * v_hat`.
pub fn x0_from_v(tape: &mut Tape, x_k: &Tensor, k: f32, v_hat: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::contract(format!("noise level {k} outside [0, 1]")));
    }
    let vk = tape.scale(v_hat, k)?;
    tape.sub(x_k, &vk)
}

/// Ping-pong update: renoise the denoised estimate to the next level with
/// fresh noise. Computed as `x0 + k_prev * (eps - x0)`, which is the same
/// expression the guided variant uses, so the two coincide bitwise whenever
/// their denoised estimates coincide.
pub fn pingpong_step(
    tape: &mut Tape,
    x0_hat: &Tensor,
    k_prev: f32,
    eps_new: &Tensor,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&k_prev) {
        return Err(Error::contract(format!(
            "pingpong renoise level must lie in [0, 1), got {k_prev}"
        )));
    }
    let delta = tape.sub(eps_new, x0_hat)?;
    let scaled = tape.scale(&delta, k_prev)?;
    tape.add(x0_hat, &scaled)
}

/// Interpolates denoised estimates: `x0_u + lambda * (x0_c - x0_u)`.
pub fn guided_denoise(
    tape: &mut Tape,
    x0_cond: &Tensor,
    x0_uncond: &Tensor,
    lambda: f32,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!(
            "guidance interpolation weight must lie in [0, 1], got {lambda}"
        )));
    }
    let delta = tape.sub(x0_cond, x0_uncond)?;
    let scaled = tape.scale(&delta, lambda)?;
    tape.add(x0_uncond, &scaled)
}

/// Guided ping-pong update: denoise with the guided estimate, renoise with
/// the unconditional one: `x0_guided + k_prev * (eps - x0_uncond)`.
pub fn guided_pingpong_step(
    tape: &mut Tape,
    x0_guided: &Tensor,
    x0_uncond: &Tensor,
    k_prev: f32,
    eps_new: &Tensor,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&k_prev) {
        return Err(Error::contract(format!(
            "renoise level must lie in [0, 1), got {k_prev}"
        )));
    }
    let delta = tape.sub(eps_new, x0_uncond)?;
    let scaled = tape.scale(&delta, k_prev)?;
    tape.add(x0_guided, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain_rng, normal_f32};

    fn t(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![n / 1, 1], v).unwrap()
    }

    #[test]
    fn corrupt_endpoints() {
        let mut g = Tape::no_grad();
        let x = t(vec![2.0, -1.0]);
        let eps = t(vec![0.5, 0.5]);
        assert_eq!(forward_corrupt(&mut g, &x, 0.0, &eps).unwrap().data(), x.data());
        assert_eq!(forward_corrupt(&mut g, &x, 1.0, &eps).unwrap().data(), eps.data());
        let mid = forward_corrupt(&mut g, &t(vec![2.0]), 0.5, &t(vec![0.0])).unwrap();
        assert_eq!(mid.data(), &[1.0]);
        assert!(forward_corrupt(&mut g, &x, 1.5, &eps).is_err());
    }

    #[test]
    fn velocity_and_one_step_recovery() {
        let mut g = Tape::no_grad();
        let x = t(vec![0.3, -0.7, 2.0]);
        let eps = t(vec![1.0, 1.0, -1.0]);
        let v = marginal_velocity(&mut g, &x, &eps).unwrap();
        // x at k = 1 is exactly eps; one full Euler step recovers x.
        let x1 = forward_corrupt(&mut g, &x, 1.0, &eps).unwrap();
        let back = euler_step(&mut g, &v, &x1, 1.0, 0.0).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let zero = marginal_velocity(&mut g, &x, &x).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn euler_linearity() {
        let mut g = Tape::no_grad();
        let x = t(vec![1.0, 2.0]);
        let v = t(vec![0.5, -0.25]);
        let full = euler_step(&mut g, &v, &x, 1.0, 0.0).unwrap();
        let half = euler_step(&mut g, &v, &x, 1.0, 0.5).unwrap();
        let two = euler_step(&mut g, &v, &half, 0.5, 0.0).unwrap();
        for (a, b) in full.data().iter().zip(two.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let same = euler_step(&mut g, &t(vec![0.0, 0.0]), &x, 1.0, 0.5).unwrap();
        assert_eq!(same.data(), x.data());
        assert!(euler_step(&mut g, &v, &x, 0.5, 0.5).is_err());
    }

    #[test]
    fn x0_identities() {
        let mut g = Tape::no_grad();
        let x = t(vec![0.2, -0.4]);
        let eps = t(vec![1.5, 0.5]);
        let k = 0.6;
        let xk = forward_corrupt(&mut g, &x, k, &eps).unwrap();
        let v = marginal_velocity(&mut g, &x, &eps).unwrap();
        let rec = x0_from_v(&mut g, &xk, k, &v).unwrap();
        for (a, b) in rec.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let same = x0_from_v(&mut g, &xk, 0.0, &v).unwrap();
        assert_eq!(same.data(), xk.data());
    }

    #[test]
    fn cfg_combine_identities() {
        let mut g = Tape::no_grad();
        let vc = t(vec![1.0, 2.0]);
        let vu = t(vec![0.0, 1.0]);
        let w1 = cfg_combine(&mut g, &vc, &vu, 1.0).unwrap();
        assert_eq!(w1.data(), vc.data());
        let same = cfg_combine(&mut g, &vu, &vu, 3.0).unwrap();
        assert_eq!(same.data(), vu.data());
        let w2 = cfg_combine(&mut g, &vc, &t(vec![0.0, 0.0]), 2.0).unwrap();
        assert_eq!(w2.data(), &[2.0, 4.0]);
        assert!(cfg_combine(&mut g, &vc, &vu, 0.5).is_err());
    }

    #[test]
    fn pingpong_identities() {
        let mut g = Tape::no_grad();
        let x0 = t(vec![0.5, -0.5]);
        let eps = t(vec![1.0, 1.0]);
        let same = pingpong_step(&mut g, &x0, 0.0, &eps).unwrap();
        assert_eq!(same.data(), x0.data());
        let zero = pingpong_step(&mut g, &t(vec![0.0, 0.0]), 0.25, &eps).unwrap();
        assert_eq!(zero.data(), &[0.25, 0.25]);
    }

    #[test]
    fn guided_step_reduces_to_pingpong_when_estimates_match() {
        let mut g = Tape::no_grad();
        let x0 = t(vec![0.3, 0.9, -1.2]);
        let eps = t(vec![0.1, -0.2, 0.7]);
        for &k in &[0.0, 0.25, 0.75] {
            let pp = pingpong_step(&mut g, &x0, k, &eps).unwrap();
            let guided = guided_denoise(&mut g, &x0, &x0, 0.7).unwrap();
            let gp = guided_pingpong_step(&mut g, &guided, &x0, k, &eps).unwrap();
            assert_eq!(pp.data(), gp.data(), "k = {k}");
        }
        // lambda = 0 collapses the guided denoise onto the unconditional one.
        let other = t(vec![9.0, 9.0, 9.0]);
        let guided = guided_denoise(&mut g, &other, &x0, 0.0).unwrap();
        let gp = guided_pingpong_step(&mut g, &guided, &x0, 0.5, &eps).unwrap();
        let pp = pingpong_step(&mut g, &x0, 0.5, &eps).unwrap();
        assert_eq!(gp.data(), pp.data());
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.25]).is_ok());
        assert!(NoiseSchedule::new(vec![0.5, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![0.2, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![1.5]).is_err());
        let few = NoiseSchedule::few_step(2).unwrap();
        assert_eq!(few.levels(), &[1.0, 0.75]);
        let uni = NoiseSchedule::uniform(4).unwrap();
        assert_eq!(uni.levels(), &[1.0, 0.75, 0.5, 0.25]);
        let pairs: Vec<_> = NoiseSchedule::uniform(2).unwrap().transitions().collect();
        assert_eq!(pairs, vec![(1.0, 0.5), (0.5, 0.0)]);
    }

    #[test]
    fn masked_loss_matches_slice_loss() {
        // The masked loss over the target slice must equal the unmasked loss
        // computed on that slice alone.
        let mut rng = domain_rng(3, "flow-mask-test", &[]);
        let frames = 6;
        let channels = 3;
        let data: Vec<f32> = (0..frames * channels).map(|_| normal_f32(&mut rng)).collect();
        let noise: Vec<f32> = (0..frames * channels).map(|_| normal_f32(&mut rng)).collect();
        let x = Tensor::new(vec![frames, channels], data.clone()).unwrap();
        let eps = Tensor::new(vec![frames, channels], noise.clone()).unwrap();
        let k = 0.4;
        let mask: Vec<bool> = vec![false, false, true, true, true, false];

        // Model that predicts the marginal velocity plus a fixed offset.
        let delta = 0.35f32;
        let predict = |g: &mut Tape, _xk: &Tensor| {
            let v = g.sub(&eps, &x)?;
            g.add(&v, &Tensor::scalar(delta))
        };
        let mut g = Tape::no_grad();
        let masked = flow_loss(&mut g, predict, &x, k, &eps, &mask).unwrap();
        assert!((masked.item().unwrap() - delta * delta).abs() < 1e-5);

        // Slice version over the masked frames only.
        let xs = Tensor::new(vec![3, channels], data[2 * channels..5 * channels].to_vec()).unwrap();
        let es = Tensor::new(vec![3, channels], noise[2 * channels..5 * channels].to_vec()).unwrap();
        let predict_slice = |g: &mut Tape, _xk: &Tensor| {
            let v = g.sub(&es, &xs)?;
            g.add(&v, &Tensor::scalar(delta))
        };
        let mut g2 = Tape::no_grad();
        let sliced = flow_loss(&mut g2, predict_slice, &xs, k, &es, &[true, true, true]).unwrap();
        assert!((masked.item().unwrap() - sliced.item().unwrap()).abs() < 1e-6);

        // Perfect model gives zero loss; empty mask is rejected.
        let perfect = |g: &mut Tape, _xk: &Tensor| g.sub(&eps, &x);
        let mut g3 = Tape::no_grad();
        let zero = flow_loss(&mut g3, perfect, &x, k, &eps, &mask).unwrap();
        assert!(zero.item().unwrap().abs() < 1e-10);
        let mut g4 = Tape::no_grad();
        let err = flow_loss(
            &mut g4,
            |g: &mut Tape, _xk: &Tensor| g.sub(&eps, &x),
            &x,
            k,
            &eps,
            &[false; 6],
        );
        assert!(err.is_err());
    }

    #[test]
    fn exact_gaussian_field_recovers_moments() {
        // Data distribution N(mu, sigma^2). The conditional marginal velocity
        // has the closed form derived from the joint gaussian of (x, eps):
        //   v(x_k, k) = ((b - a sigma^2) (x_k - a mu)) / (a^2 sigma^2 + b^2) - mu,
        // with a = 1 - k, b = k. Euler integration from pure noise must
        // reproduce the data moments.
        let mu = 1.3f32;
        let sigma = 0.7f32;
        let steps = 32;
        let n = 10_000;
        let schedule = NoiseSchedule::uniform(steps).unwrap();
        let mut rng = domain_rng(11, "gaussian-oracle", &[]);
        let mut samples = Vec::with_capacity(n);
        let mut g = Tape::no_grad();
        for _ in 0..n {
            let mut x = Tensor::new(vec![1, 1], vec![normal_f32(&mut rng)]).unwrap();
            for (k_j, k_prev) in schedule.transitions() {
                let a = 1.0 - k_j;
                let b = k_j;
                let denom = a * a * sigma * sigma + b * b;
                let coef = (b - a * sigma * sigma) / denom;
                let v = coef * (x.data()[0] - a * mu) - mu;
                let vt = Tensor::new(vec![1, 1], vec![v]).unwrap();
                x = euler_step(&mut g, &vt, &x, k_j, k_prev).unwrap();
            }
            samples.push(x.data()[0]);
        }
        let mean = samples.iter().sum::<f32>() / n as f32;
        let var = samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<f32>() / n as f32;
        let mean_tol = 3.0 * sigma / (n as f32).sqrt();
        assert!(
            (mean - mu).abs() < mean_tol,
            "mean {mean} vs {mu} (tol {mean_tol})"
        );
        assert!(
            (var - sigma * sigma).abs() < 0.1 * sigma * sigma,
            "var {var} vs {}",
            sigma * sigma
        );
    }
}
