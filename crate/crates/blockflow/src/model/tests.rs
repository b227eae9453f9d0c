use super::*;
use crate::rng::{domain_rng, normal_f32};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        channels: 4,
        hidden: 32,
        layers: 2,
        heads: 2,
        head_dim: 16,
        context_frames: 8,
        target_frames: 4,
        cond_dim: 4,
        local_cond_channels: 2,
        max_positions: 64,
    }
}

fn rand_latents(seed: u64, tag: u64, channels: usize, frames: usize) -> LatentSequence {
    let mut rng = domain_rng(seed, "model-test", &[tag]);
    LatentSequence::new(channels, (0..channels * frames).map(|_| normal_f32(&mut rng)).collect())
        .unwrap()
}

fn rand_tensor(seed: u64, tag: u64, shape: Vec<usize>) -> Tensor {
    let mut rng = domain_rng(seed, "model-test", &[tag]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal_f32(&mut rng)).collect()).unwrap()
}

fn cond_for(cfg: &ModelConfig, seed: u64) -> ConditionInput {
    let mut rng = domain_rng(seed, "model-test-cond", &[]);
    let global = (0..cfg.cond_dim).map(|_| normal_f32(&mut rng)).collect();
    let local = (0..cfg.window() * cfg.local_cond_channels)
        .map(|_| normal_f32(&mut rng))
        .collect();
    ConditionInput::global(global).with_local(local, i64::MAX)
}

fn view<'a>(entries: &'a KvEntries, base: usize) -> KvView<'a> {
    KvView {
        layers: entries
            .layers
            .iter()
            .map(|l| (l.k.as_slice(), l.v.as_slice()))
            .collect(),
        len: entries.frames,
        base_position: base,
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

// ── Input projection ────────────────────────────────────────────────

#[test]
fn input_project_context_rows_ignore_noise() {
    let cfg = small_cfg();
    let model = DiT::new(cfg, 1).unwrap();
    let c = cond_for(&cfg, 0);
    let clean = rand_latents(0, 1, cfg.channels, cfg.context_frames);
    let window = cfg.window();
    let mut g = Tape::no_grad();
    let h1 = model
        .input_project(&mut g, &rand_tensor(2, 0, vec![window, cfg.channels]), &clean, &c)
        .unwrap();
    let h2 = model
        .input_project(&mut g, &rand_tensor(3, 0, vec![window, cfg.channels]), &clean, &c)
        .unwrap();
    let s = cfg.context_frames;
    assert_eq!(
        &h1.data()[..s * cfg.hidden],
        &h2.data()[..s * cfg.hidden],
        "context rows must be bitwise identical across noise draws"
    );
    assert_ne!(&h1.data()[s * cfg.hidden..], &h2.data()[s * cfg.hidden..]);
}

#[test]
fn input_project_zero_context_gives_zero_rows() {
    let cfg = ModelConfig {
        local_cond_channels: 0,
        ..small_cfg()
    };
    let model = DiT::new(cfg, 1).unwrap();
    let c = ConditionInput::null();
    let clean = LatentSequence::zeros(cfg.channels, cfg.context_frames);
    let mut g = Tape::no_grad();
    let h = model
        .input_project(&mut g, &rand_tensor(5, 0, vec![cfg.window(), cfg.channels]), &clean, &c)
        .unwrap();
    // Bias is zero at init, so zero clean context projects to zero rows.
    assert!(h.data()[..cfg.context_frames * cfg.hidden]
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn input_project_identity_blocks_route_correctly() {
    // Square case C = H with the noisy and clean sub-blocks of the input
    // projection both set to the identity.
    let cfg = ModelConfig {
        channels: 4,
        hidden: 4,
        layers: 1,
        heads: 1,
        head_dim: 4,
        context_frames: 2,
        target_frames: 2,
        cond_dim: 2,
        local_cond_channels: 0,
        max_positions: 16,
    };
    let mut model = DiT::new(cfg, 0).unwrap();
    let mut w = vec![0.0f32; 2 * cfg.channels * cfg.hidden];
    for i in 0..cfg.channels {
        w[i * cfg.hidden + i] = 1.0; // noisy block A = I
        w[(cfg.channels + i) * cfg.hidden + i] = 1.0; // clean block B = I
    }
    model.params.input_w = Tensor::param(vec![2 * cfg.channels, cfg.hidden], w).unwrap();

    let clean = rand_latents(7, 0, cfg.channels, cfg.context_frames);
    let noisy = rand_tensor(8, 0, vec![cfg.window(), cfg.channels]);
    let mut g = Tape::no_grad();
    let h = model
        .input_project(&mut g, &noisy, &clean, &ConditionInput::null())
        .unwrap();
    for t in 0..cfg.context_frames {
        assert_eq!(&h.data()[t * 4..(t + 1) * 4], clean.frame(t));
    }
    for t in cfg.context_frames..cfg.window() {
        assert_eq!(&h.data()[t * 4..(t + 1) * 4], &noisy.data()[t * 4..(t + 1) * 4]);
    }
}

// ── Attention op ────────────────────────────────────────────────────

#[test]
fn attention_uniform_scores_average_values() {
    let mut g = Tape::no_grad();
    let q = Tensor::zeros(vec![3, 4]);
    let k = rand_tensor(1, 1, vec![3, 4]);
    let v = rand_tensor(1, 2, vec![3, 4]);
    let out = attention(&mut g, &q, &k, &v, None).unwrap();
    for row in 0..3 {
        for col in 0..4 {
            let mean = (v.data()[col] + v.data()[4 + col] + v.data()[8 + col]) / 3.0;
            assert!((out.data()[row * 4 + col] - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_diagonal_mask_returns_values() {
    let mut g = Tape::no_grad();
    let n = 4;
    let mut allow = vec![false; n * n];
    for i in 0..n {
        allow[i * n + i] = true;
    }
    let mask = AttentionMask::custom(n, allow).unwrap();
    let q = rand_tensor(2, 1, vec![n, 6]);
    let k = rand_tensor(2, 2, vec![n, 6]);
    let v = rand_tensor(2, 3, vec![n, 6]);
    let out = attention(&mut g, &q, &k, &v, Some(&mask)).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn attention_rejects_empty_rows() {
    let allow = vec![false; 4];
    assert!(AttentionMask::custom(2, allow).is_err());
}

#[test]
fn attention_encdec_mask_blocks_target_leakage() {
    let mut g = Tape::no_grad();
    let spec = AttentionMaskSpec::new(MaskFamily::EncDec, 3, 2);
    let mask = build_mask(&spec, 5).unwrap();
    let q = rand_tensor(3, 1, vec![5, 4]);
    let k = rand_tensor(3, 2, vec![5, 4]);
    let v = rand_tensor(3, 3, vec![5, 4]);
    let base = attention(&mut g, &q, &k, &v, Some(&mask)).unwrap();

    // Perturb the values at target rows; context-row outputs must not move.
    let mut vd = v.data().to_vec();
    for x in &mut vd[3 * 4..] {
        *x += 5.0;
    }
    let v2 = Tensor::new(vec![5, 4], vd).unwrap();
    let out2 = attention(&mut g, &q, &k, &v2, Some(&mask)).unwrap();
    assert_eq!(&base.data()[..3 * 4], &out2.data()[..3 * 4]);
    assert_ne!(&base.data()[3 * 4..], &out2.data()[3 * 4..]);
}

// ── Full forward ────────────────────────────────────────────────────

#[test]
fn forward_full_is_deterministic() {
    let cfg = small_cfg();
    let model = DiT::new(cfg, 3).unwrap();
    let c = cond_for(&cfg, 1);
    let clean = rand_latents(1, 1, cfg.channels, cfg.context_frames);
    let noisy = rand_tensor(1, 2, vec![cfg.window(), cfg.channels]);
    let spec = AttentionMaskSpec::new(MaskFamily::EncDec, cfg.context_frames, cfg.target_frames);
    let mut g = Tape::no_grad();
    let a = model.forward_full(&mut g, &noisy, &clean, 0.5, &c, &spec).unwrap();
    let b = model.forward_full(&mut g, &noisy, &clean, 0.5, &c, &spec).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn context_activations_invariant_under_encdec_mask() {
    // Context-row hidden states at every layer must be bitwise identical
    // across noise levels and across different target fillings.
    let cfg = small_cfg();
    let spec = AttentionMaskSpec::new(MaskFamily::EncDec, cfg.context_frames, cfg.target_frames);
    for seed in 0..5 {
        let model = DiT::new(cfg, seed).unwrap();
        let c = cond_for(&cfg, seed);
        let clean = rand_latents(seed, 4, cfg.channels, cfg.context_frames);
        let mut reference: Option<Vec<Vec<f32>>> = None;
        for (fill, &k) in [0.0f32, 0.3, 1.0].iter().enumerate().flat_map(|(i, k)| {
            [(i as u64 * 2 + 10, k), (i as u64 * 2 + 11, k)]
        }) {
            let noisy = rand_tensor(seed, 100 + fill, vec![cfg.window(), cfg.channels]);
            let mut g = Tape::no_grad();
            let (_, layers) = model
                .forward_full_collect(&mut g, &noisy, &clean, k, &c, &spec)
                .unwrap();
            let ctx_rows: Vec<Vec<f32>> = layers
                .iter()
                .map(|h| h.data()[..cfg.context_frames * cfg.hidden].to_vec())
                .collect();
            match &reference {
                None => reference = Some(ctx_rows),
                Some(r) => assert_eq!(r, &ctx_rows, "seed {seed} k {k}"),
            }
        }
    }
}

#[test]
fn bidirectional_mask_leaks_target_into_context() {
    // Sanity check that the invariance above is a property of the enc-dec
    // mask, not an accident of the architecture.
    let cfg = small_cfg();
    let model = DiT::new(cfg, 9).unwrap();
    let c = cond_for(&cfg, 9);
    let clean = rand_latents(9, 1, cfg.channels, cfg.context_frames);
    let spec = AttentionMaskSpec::new(MaskFamily::Bidirectional, cfg.context_frames, cfg.target_frames);
    let run = |tag: u64| {
        let noisy = rand_tensor(9, tag, vec![cfg.window(), cfg.channels]);
        let mut g = Tape::no_grad();
        let (_, layers) = model
            .forward_full_collect(&mut g, &noisy, &clean, 0.5, &c, &spec)
            .unwrap();
        layers[0].data()[..cfg.context_frames * cfg.hidden].to_vec()
    };
    assert_ne!(run(50), run(51));
}

// ── Cache equivalence ───────────────────────────────────────────────

#[test]
fn encdec_cache_matches_full_forward() {
    let cfg = small_cfg();
    let spec = AttentionMaskSpec::new(MaskFamily::EncDec, cfg.context_frames, cfg.target_frames);
    for seed in 0..20 {
        let model = DiT::new(cfg, seed).unwrap();
        let c = cond_for(&cfg, seed);
        let clean = rand_latents(seed, 2, cfg.channels, cfg.context_frames);
        let target = rand_tensor(seed, 3, vec![cfg.target_frames, cfg.channels]);
        let k = 0.3 + 0.4 * (seed as f32 / 20.0);

        // Full pass: junk in the context rows of the noisy window.
        let mut window = rand_tensor(seed, 4, vec![cfg.window(), cfg.channels])
            .data()
            .to_vec();
        window[cfg.context_frames * cfg.channels..].copy_from_slice(target.data());
        let window = Tensor::new(vec![cfg.window(), cfg.channels], window).unwrap();
        let mut g = Tape::no_grad();
        let full = model.forward_full(&mut g, &window, &clean, k, &c, &spec).unwrap();
        let full_target = &full.data()[cfg.context_frames * cfg.channels..];

        // Cached pass.
        let entries = model.encode_context(&mut g, &clean, &c, None).unwrap();
        assert_eq!(entries.frames, cfg.context_frames);
        let cached = model
            .forward_decode(&mut g, &target, k, &c, &view(&entries, 0))
            .unwrap();
        let diff = max_abs_diff(full_target, cached.data());
        assert!(diff <= 1e-4, "seed {seed}: enc-dec cache diverged by {diff}");
    }
}

#[test]
fn blockcausal_prefill_matches_full_forward() {
    let cfg = small_cfg();
    let spec = AttentionMaskSpec::new(MaskFamily::BlockCausal, cfg.context_frames, cfg.target_frames);
    for seed in 0..20 {
        let model = DiT::new(cfg, seed).unwrap();
        let c = cond_for(&cfg, seed);
        let clean = rand_latents(seed, 5, cfg.channels, cfg.context_frames);
        let target = rand_tensor(seed, 6, vec![cfg.target_frames, cfg.channels]);
        let k = 0.7;

        let mut window = vec![0.0f32; cfg.window() * cfg.channels];
        window[cfg.context_frames * cfg.channels..].copy_from_slice(target.data());
        let window = Tensor::new(vec![cfg.window(), cfg.channels], window).unwrap();
        let mut g = Tape::no_grad();
        let full = model.forward_full(&mut g, &window, &clean, k, &c, &spec).unwrap();
        let full_target = &full.data()[cfg.context_frames * cfg.channels..];

        // Prefill block by block.
        let o = cfg.target_frames;
        let mut layers: Vec<LayerKv> = (0..cfg.layers)
            .map(|_| LayerKv { k: Vec::new(), v: Vec::new() })
            .collect();
        let mut len = 0;
        for b in 0..cfg.context_frames / o {
            let block = clean.slice(b * o, o).unwrap();
            let v = KvView {
                layers: layers.iter().map(|l| (l.k.as_slice(), l.v.as_slice())).collect(),
                len,
                base_position: 0,
            };
            let entries = model
                .encode_context(&mut g, &block, &c, if len == 0 { None } else { Some(&v) })
                .unwrap();
            drop(v);
            for (dst, src) in layers.iter_mut().zip(entries.layers) {
                dst.k.extend_from_slice(&src.k);
                dst.v.extend_from_slice(&src.v);
            }
            len += o;
        }
        assert_eq!(len, cfg.context_frames);
        let v = KvView {
            layers: layers.iter().map(|l| (l.k.as_slice(), l.v.as_slice())).collect(),
            len,
            base_position: 0,
        };
        let cached = model.forward_decode(&mut g, &target, k, &c, &v).unwrap();
        let diff = max_abs_diff(full_target, cached.data());
        assert!(diff <= 1e-4, "seed {seed}: block-causal prefill diverged by {diff}");
    }
}

#[test]
fn decode_with_wrong_cache_length_is_rejected() {
    let cfg = small_cfg();
    let model = DiT::new(cfg, 0).unwrap();
    let c = cond_for(&cfg, 0);
    let target = rand_tensor(0, 1, vec![cfg.target_frames, cfg.channels]);
    let empty: Vec<(&[f32], &[f32])> = (0..cfg.layers).map(|_| (&[][..], &[][..])).collect();
    let v = KvView {
        layers: empty,
        len: 0,
        base_position: 0,
    };
    let mut g = Tape::no_grad();
    assert!(model.forward_decode(&mut g, &target, 0.5, &c, &v).is_err());
}

#[test]
fn no_context_decode_equals_bidirectional_forward() {
    // s = 0 degenerate case: decoding without any cache is a plain
    // bidirectional forward over the target frames.
    let cfg = ModelConfig {
        context_frames: 0,
        ..small_cfg()
    };
    let model = DiT::new(cfg, 4).unwrap();
    let c = cond_for(&cfg, 4);
    let target = rand_tensor(4, 1, vec![cfg.target_frames, cfg.channels]);
    let mut g = Tape::no_grad();
    let empty: Vec<(&[f32], &[f32])> = (0..cfg.layers).map(|_| (&[][..], &[][..])).collect();
    let v = KvView {
        layers: empty,
        len: 0,
        base_position: 0,
    };
    let dec = model.forward_decode(&mut g, &target, 0.4, &c, &v).unwrap();
    let spec = AttentionMaskSpec::new(MaskFamily::Bidirectional, 0, cfg.target_frames);
    let full = model
        .forward_full(
            &mut g,
            &target,
            &LatentSequence::zeros(cfg.channels, 0),
            0.4,
            &c,
            &spec,
        )
        .unwrap();
    assert!(max_abs_diff(dec.data(), full.data()) <= 1e-5);
}

#[test]
fn rotary_positions_are_shift_invariant() {
    // Encoding and decoding a window at a shifted base position must give
    // the same outputs: attention depends only on relative offsets.
    let cfg = small_cfg();
    let model = DiT::new(cfg, 6).unwrap();
    let c = cond_for(&cfg, 6);
    let clean = rand_latents(6, 2, cfg.channels, cfg.context_frames);
    let target = rand_tensor(6, 3, vec![cfg.target_frames, cfg.channels]);
    let mut g = Tape::no_grad();

    let run_at = |g: &mut Tape, base: usize| {
        let empty: Vec<(&[f32], &[f32])> = (0..cfg.layers).map(|_| (&[][..], &[][..])).collect();
        let seed_view = KvView {
            layers: empty,
            len: 0,
            base_position: base,
        };
        let entries = model.encode_context(g, &clean, &c, Some(&seed_view)).unwrap();
        let v = view(&entries, base);
        model.forward_decode(g, &target, 0.5, &c, &v).unwrap()
    };
    let at0 = run_at(&mut g, 0);
    let at9 = run_at(&mut g, 9);
    let diff = max_abs_diff(at0.data(), at9.data());
    assert!(diff <= 1e-5, "shifted outputs diverged by {diff}");
}

// ── Checkpointing ───────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let cfg = small_cfg();
    let model = DiT::new(cfg, 11).unwrap();
    let ckpt = model.to_checkpoint(vec![(
        "train.step".to_string(),
        vec![1],
        vec![42.0],
    )]);
    let mut buf = Vec::new();
    ckpt.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.find("train.step").unwrap().2, vec![42.0]);
    let restored = DiT::from_checkpoint(&back).unwrap();

    let c = cond_for(&cfg, 11);
    let clean = rand_latents(11, 1, cfg.channels, cfg.context_frames);
    let noisy = rand_tensor(11, 2, vec![cfg.window(), cfg.channels]);
    let spec = AttentionMaskSpec::new(MaskFamily::EncDec, cfg.context_frames, cfg.target_frames);
    let mut g = Tape::no_grad();
    let a = model.forward_full(&mut g, &noisy, &clean, 0.5, &c, &spec).unwrap();
    let b = restored.forward_full(&mut g, &noisy, &clean, 0.5, &c, &spec).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn local_condition_visibility_cutoff() {
    let c = ConditionInput::global(vec![0.0; 4]).with_local(vec![1.0; 12 * 2], -2);
    // boundary 8, t_f = -2: frames 6.. are zeroed.
    let local = c.effective_local(12, 8, 2).unwrap().unwrap();
    for t in 0..6 {
        assert_eq!(&local[t * 2..(t + 1) * 2], &[1.0, 1.0]);
    }
    for t in 6..12 {
        assert_eq!(&local[t * 2..(t + 1) * 2], &[0.0, 0.0]);
    }
    // t_f = 0 keeps exactly the context span visible.
    let c0 = ConditionInput::global(vec![0.0; 4]).with_local(vec![1.0; 12 * 2], 0);
    let local0 = c0.effective_local(12, 8, 2).unwrap().unwrap();
    assert!(local0[..8 * 2].iter().all(|&v| v == 1.0));
    assert!(local0[8 * 2..].iter().all(|&v| v == 0.0));
}
