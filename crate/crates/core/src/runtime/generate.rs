use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{decode_step, prefill, DecodeState};
use crate::arch::{MixerKind, Model};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    /// Nucleus sampling of `softmax(logits / temperature)`.
    TopP { temperature: f64, top_p: f64 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::TopP { temperature: 0.6, top_p: 0.95 }
    }
}

fn argmax<T: Float>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

impl Sampler {
    pub fn sample<T: Float>(&self, logits: &[T], rng: &mut ChaCha8Rng) -> usize {
        let (temperature, top_p) = match *self {
            Sampler::Greedy => return argmax(logits),
            Sampler::TopP { temperature, .. } if temperature <= 0.0 => return argmax(logits),
            Sampler::TopP { temperature, top_p } => (temperature, top_p),
        };
        let z: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<(usize, f64)> = z.iter().map(|v| (v - max).exp()).enumerate().collect();
        let total: f64 = probs.iter().map(|p| p.1).sum();
        probs.iter_mut().for_each(|p| p.1 /= total);
        probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut kept = 0;
        let mut mass = 0.0;
        for p in &probs {
            kept += 1;
            mass += p.1;
            if mass >= top_p {
                break;
            }
        }
        let mut u = rng.gen::<f64>() * mass;
        for p in &probs[..kept] {
            if u < p.1 {
                return p.0;
            }
            u -= p.1;
        }
        probs[kept - 1].0
    }
}

/// Prefill `prompt`, then produce `n_tokens` continuation tokens.
pub fn generate<T: Float>(
    model: &Model<T>,
    prompt: &[usize],
    n_tokens: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, mut logits) = prefill(model, prompt)?;
    let mut out = Vec::with_capacity(n_tokens);
    loop {
        let t = sampler.sample(&logits, &mut rng);
        out.push(t);
        if out.len() == n_tokens {
            return Ok(out);
        }
        logits = decode_step(model, &mut state, t)?;
    }
}

/// One measured decode step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    /// Tokens in the context before the step.
    pub position: usize,
    pub ssm_read: u64,
    pub swa_read: u64,
    pub full_read: u64,
    pub cross_read: u64,
    pub gmu_read: u64,
    pub wall_ns: u128,
}

/// Decode from the zero state, timing the steps taken at each of
/// `positions` (median over `reps` repeated steps from a cloned state).
pub fn bench<T: Float>(model: &Model<T>, positions: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size;
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    let mut state = DecodeState::new(model);
    let mut rows = Vec::new();
    for &target in &sorted {
        while state.pos < target {
            decode_step(model, &mut state, rng.gen_range(0..vocab))?;
        }
        let token = rng.gen_range(0..vocab);
        let mut times = Vec::with_capacity(reps.max(1));
        let mut probe = state.clone();
        for _ in 0..reps.max(1) {
            probe = state.clone();
            let t0 = Instant::now();
            decode_step(model, &mut probe, token)?;
            times.push(t0.elapsed().as_nanos());
        }
        times.sort_unstable();
        let l = &probe.ledger;
        rows.push(BenchRow {
            position: target,
            ssm_read: l.step_read_by_kind(MixerKind::Ssm),
            swa_read: l.step_read_by_kind(MixerKind::Swa),
            full_read: l.step_read_by_kind(MixerKind::Full),
            cross_read: l.step_read_by_kind(MixerKind::Cross),
            gmu_read: l.step_read_by_kind(MixerKind::Gmu),
            wall_ns: times[times.len() / 2],
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
