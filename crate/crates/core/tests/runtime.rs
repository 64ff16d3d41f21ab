use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sambay::arch::{Arch, MixerKind, Model, ModelConfig};
use sambay::runtime::{decode_step, footprint_at, generate, prefill, DecodeState, Sampler};
use sambay::{Error, Float, Tensor};

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Max-abs gap between prefill+teacher-forced decoding and the parallel forward.
fn decode_gap<T: Float>(model: &Model<T>, prompt: usize, extra: usize, seed: u64) -> f64 {
    let seq = tokens(prompt + extra, model.config.vocab_size, seed);
    let full = model.forward(&seq).unwrap();
    let (mut state, mut logits) = prefill(model, &seq[..prompt]).unwrap();
    let mut worst = 0f64;
    for t in prompt..=prompt + extra {
        let want = full.row(t - 1);
        for (a, b) in logits.iter().zip(want) {
            worst = worst.max((a.as_f64() - b.as_f64()).abs());
        }
        if t < prompt + extra {
            logits = decode_step(model, &mut state, seq[t]).unwrap();
        }
    }
    worst
}

#[test]
fn prefill_and_decode_match_parallel_forward_f64() {
    for (i, arch) in Arch::ALL.into_iter().enumerate() {
        let mut cfg = ModelConfig::desk(arch, 8, 64).unwrap();
        cfg.window = 8;
        let model = Model::<f64>::new(cfg, 40 + i as u64).unwrap();
        let gap = decode_gap(&model, 13, 20, i as u64);
        assert!(gap < 1e-8, "{arch}: {gap:e}");
    }
}

#[test]
fn prefill_and_decode_match_parallel_forward_f32() {
    for (i, arch) in Arch::ALL.into_iter().enumerate() {
        let cfg = ModelConfig::desk(arch, 8, 128).unwrap();
        let model = Model::<f32>::new(cfg, 7 + i as u64).unwrap();
        let gap = decode_gap(&model, 24, 24, 100 + i as u64);
        assert!(gap < 1e-4, "{arch}: {gap:e}");
    }
}

#[test]
fn random_model_prompt_pairs_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..10 {
        let arch = Arch::ALL[rng.gen_range(0..Arch::ALL.len())];
        let mut cfg = ModelConfig::desk(arch, 4, 32).unwrap();
        cfg.window = rng.gen_range(2..10);
        cfg.normalized_gmu = rng.gen_bool(0.5);
        let model = Model::<f64>::new(cfg, trial).unwrap();
        let gap = decode_gap(&model, rng.gen_range(1..12), rng.gen_range(1..12), trial);
        assert!(gap < 1e-8, "trial {trial} {arch}: {gap:e}");
    }
}

#[test]
fn single_token_prefill_equals_one_step_from_zero() {
    for arch in Arch::ALL {
        let model = Model::<f64>::new(ModelConfig::desk(arch, 4, 32).unwrap(), 1).unwrap();
        let (_, a) = prefill(&model, &[5]).unwrap();
        let mut st = DecodeState::new(&model);
        let b = decode_step(&model, &mut st, 5).unwrap();
        assert_eq!(a, b, "{arch}");
    }
}

#[test]
fn cross_decoder_runs_once_during_prefill() {
    let model = Model::<f32>::new(ModelConfig::desk(Arch::SambaY, 8, 64).unwrap(), 2).unwrap();
    let (state, _) = prefill(&model, &tokens(37, 259, 1)).unwrap();
    assert_eq!(state.ledger.cross_decoder_mlp_evals(), 4);
    assert_eq!(state.ledger.self_decoder_mlp_evals(), 4 * 37);
}

#[test]
fn greedy_decoding_matches_parallel_argmax() {
    let model = Model::<f32>::new(ModelConfig::desk(Arch::SambaY, 8, 64).unwrap(), 3).unwrap();
    let prompt = tokens(16, 259, 4);
    let out = generate(&model, &prompt, 24, Sampler::Greedy, 0).unwrap();
    let seq: Vec<usize> = prompt.iter().chain(&out).copied().collect();
    let full = model.forward(&seq).unwrap();
    for (i, &t) in out.iter().enumerate() {
        let r = full.row(prompt.len() - 1 + i);
        let best = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
        assert_eq!(t, best, "token {i}");
    }
}

#[test]
fn gmu_reads_are_constant_and_shared_kv_reads_affine() {
    let cfg = ModelConfig::desk(Arch::SambaY, 8, 64).unwrap();
    let kv = 2 * cfg.kv_width() as u64;
    let dh = cfg.memory_width().unwrap() as u64;
    let model = Model::<f32>::new(cfg, 5).unwrap();
    let seq = tokens(300, 259, 6);
    let mut gmu = Vec::new();
    for n in [10usize, 100, 299] {
        let (mut st, _) = prefill(&model, &seq[..n]).unwrap();
        decode_step(&model, &mut st, seq[n]).unwrap();
        let l = &st.ledger;
        gmu.push(l.step_read_by_kind(MixerKind::Gmu));
        // producer + one cross layer, each reading N + 1 cached positions
        let shared = l.last_step[4].floats_read + l.step_read_by_kind(MixerKind::Cross);
        assert_eq!(shared, 2 * kv * (n as u64 + 1));
        assert!(l.step_read_by_kind(MixerKind::Swa) <= 2 * kv * 128);
    }
    assert!(gmu.iter().all(|&g| g == 2 * dh));
}

#[test]
fn sambay_reads_half_of_yoco_in_cross_decoder() {
    let n = 1024;
    let mut read = Vec::new();
    for arch in [Arch::SambaY, Arch::SambaYoco] {
        let model = Model::<f32>::new(ModelConfig::desk(arch, 8, 64).unwrap(), 8).unwrap();
        let seq = tokens(n + 1, 259, 1);
        let (mut st, _) = prefill(&model, &seq[..n]).unwrap();
        decode_step(&model, &mut st, seq[n]).unwrap();
        read.push(st.ledger.cross_decoder_read() as f64);
    }
    let ratio = read[0] / read[1];
    assert!((0.45..=0.55).contains(&ratio), "{ratio}");
}

#[test]
fn footprint_matches_formula_and_swa_saturates() {
    for arch in Arch::ALL {
        let mut cfg = ModelConfig::desk(arch, 8, 32).unwrap();
        cfg.window = 6;
        let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let seq = tokens(12, 259, 2);
        let (mut st, _) = prefill(&model, &seq[..3]).unwrap();
        assert_eq!(st.footprint(), footprint_at(&cfg, 3).unwrap(), "{arch} prefill");
        for (i, &t) in seq[3..].iter().enumerate() {
            decode_step(&model, &mut st, t).unwrap();
            assert_eq!(st.footprint(), footprint_at(&cfg, 4 + i).unwrap(), "{arch} step {i}");
        }
    }
    let cfg = ModelConfig::desk(Arch::SambaY, 8, 128).unwrap();
    let f = footprint_at(&cfg, 32768).unwrap();
    assert_eq!(f.global_kv, 2 * 32768 * cfg.kv_width());
    assert!((f.tap as f64) / (f.global_kv as f64) < 1e-3);
    assert!(footprint_at(&cfg, 64).unwrap().swa_kv < footprint_at(&cfg, 100).unwrap().swa_kv);
    assert_eq!(footprint_at(&cfg, 128).unwrap().swa_kv, footprint_at(&cfg, 5000).unwrap().swa_kv);
}

#[test]
fn sampling_is_deterministic_and_cold_limit_is_greedy() {
    let model = Model::<f32>::new(ModelConfig::desk(Arch::SambaY, 4, 32).unwrap(), 11).unwrap();
    let prompt = tokens(8, 259, 3);
    let g1 = generate(&model, &prompt, 12, Sampler::Greedy, 1).unwrap();
    let g2 = generate(&model, &prompt, 12, Sampler::Greedy, 2).unwrap();
    assert_eq!(g1, g2);
    let cold = Sampler::TopP { temperature: 1e-6, top_p: 0.95 };
    assert_eq!(generate(&model, &prompt, 12, cold, 3).unwrap(), g1);
    let warm = Sampler::TopP { temperature: 5.0, top_p: 1.0 };
    let a = generate(&model, &prompt, 12, warm, 4).unwrap();
    assert_eq!(a, generate(&model, &prompt, 12, warm, 4).unwrap());
    assert_ne!(a, generate(&model, &prompt, 12, warm, 5).unwrap());
    assert!(generate(&model, &prompt, 0, Sampler::Greedy, 0).is_err());
}

#[test]
fn snapshot_round_trip_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    for arch in [Arch::SambaY, Arch::SambaYAA, Arch::TransformerLS, Arch::SambaYMlp] {
        let mut cfg = ModelConfig::desk(arch, 4, 32).unwrap();
        cfg.window = 4;
        let model = Model::<f32>::new(cfg, 12).unwrap();
        let seq = tokens(20, 259, 8);
        let (mut st, _) = prefill(&model, &seq[..9]).unwrap();
        decode_step(&model, &mut st, seq[9]).unwrap();
        let path = dir.path().join(arch.name().replace('+', "p"));
        st.save(&path).unwrap();
        let mut back = DecodeState::<f32>::load(&path, &model).unwrap();
        assert_eq!(back, st, "{arch}");
        for &t in &seq[10..] {
            assert_eq!(decode_step(&model, &mut st, t).unwrap(), decode_step(&model, &mut back, t).unwrap());
        }
    }
}

#[test]
fn reset_restores_zero_state_and_mismatch_is_rejected() {
    let model = Model::<f32>::new(ModelConfig::desk(Arch::SambaY, 4, 32).unwrap(), 1).unwrap();
    let (mut st, _) = prefill(&model, &[1, 2, 3]).unwrap();
    st.reset(&model);
    assert_eq!(st, DecodeState::new(&model));
    let other = Model::<f32>::new(ModelConfig::desk(Arch::SambaYoco, 4, 32).unwrap(), 1).unwrap();
    assert!(matches!(decode_step(&other, &mut st, 1), Err(Error::StateMismatch(_))));
    assert!(matches!(prefill(&model, &[]), Err(Error::Empty(_))));
    assert!(prefill(&model, &[100_000]).is_err());
    let _ = Tensor::<f32>::zeros([1]);
}
