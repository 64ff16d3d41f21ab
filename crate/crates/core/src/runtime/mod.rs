//! Prefill/decode engine with exact cache and memory-I/O accounting.
//!
//! Prefill runs the self-decoder over the whole prompt, projects the shared
//! keys/values for every position from the producer layer's input stream,
//! and evaluates the cross-decoder only at the final position. Decoding then
//! advances one token at a time through cached state.

mod generate;
mod ledger;
mod snapshot;

pub use generate::{bench, generate, write_bench_csv, BenchRow, Sampler};
pub use ledger::{IoLedger, LayerIo, StepIo};

use serde::Serialize;

use crate::arch::{Block, MemorySource, Mixer, MixerKind, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{
    attention_forward, diff_attention_forward, gmu_forward, swiglu_forward, AttnMode, KvCache, SsmState,
};
use crate::tensor::{kernels, Float, Tensor};

/// Per-layer decode state.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState<T> {
    Ssm(SsmState<T>),
    /// The layer's own keys/values; SWA caches are rings of `window` slots.
    Kv(KvCache<T>),
    /// Reads (and, for the producer, appends to) the shared cache.
    SharedKv,
    /// Position-wise layers (GMU) keep no state.
    Stateless,
}

/// Everything needed to continue a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState<T> {
    pub config: ModelConfig,
    pub layers: Vec<LayerState<T>>,
    pub shared: Option<KvCache<T>>,
    /// Current memory `m_t` consumed by GMUs.
    pub tap: Option<Vec<T>>,
    /// Tokens consumed so far.
    pub pos: usize,
    pub ledger: IoLedger,
}

/// Cache sizes in floats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheFootprint {
    /// Caches that grow with the prefix: the shared KV and any unwindowed
    /// self-attention caches.
    pub global_kv: usize,
    pub swa_kv: usize,
    pub ssm_state: usize,
    pub tap: usize,
}

impl CacheFootprint {
    pub fn total(&self) -> usize {
        self.global_kv + self.swa_kv + self.ssm_state + self.tap
    }
}

/// Footprint a configuration reaches after `n` tokens, without running it.
pub fn footprint_at(cfg: &ModelConfig, n: usize) -> Result<CacheFootprint> {
    let plan = crate::arch::build_layer_plan(cfg)?;
    let kv = 2 * cfg.kv_width();
    let ssm = crate::arch::ssm_state_floats(cfg);
    let mut f = CacheFootprint::default();
    for &k in &plan.mixers {
        match k {
            MixerKind::Ssm => f.ssm_state += ssm,
            MixerKind::Swa => f.swa_kv += kv * n.min(cfg.window),
            MixerKind::Full => f.global_kv += kv * n,
            MixerKind::Cross | MixerKind::Gmu => {}
        }
    }
    f.tap = cfg.memory_width().unwrap_or(0);
    Ok(f)
}

impl<T: Float> DecodeState<T> {
    /// Zero state: empty caches, zero recurrent states, position 0.
    pub fn new(model: &Model<T>) -> Self {
        let cfg = &model.config;
        let kvw = cfg.kv_width();
        let layers = model
            .layout
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| match (&b.mixer, b.kind) {
                (Mixer::Ssm(p), _) => LayerState::Ssm(SsmState::zeros(&p.dims)),
                (_, MixerKind::Gmu) => LayerState::Stateless,
                (_, MixerKind::Cross) => LayerState::SharedKv,
                _ if model.plan.kv_producer == Some(l) => LayerState::SharedKv,
                (_, MixerKind::Swa) => LayerState::Kv(KvCache::new(kvw, kvw, Some(cfg.window))),
                _ => LayerState::Kv(KvCache::new(kvw, kvw, None)),
            })
            .collect();
        Self {
            config: cfg.clone(),
            layers,
            shared: model.plan.kv_producer.map(|_| KvCache::new(kvw, kvw, None)),
            tap: None,
            pos: 0,
            ledger: IoLedger::new(&model.plan),
        }
    }

    /// Return to the zero state.
    pub fn reset(&mut self, model: &Model<T>) {
        *self = Self::new(model);
    }

    pub fn footprint(&self) -> CacheFootprint {
        let mut f = CacheFootprint::default();
        for s in &self.layers {
            match s {
                LayerState::Ssm(st) => f.ssm_state += st.floats(),
                LayerState::Kv(c) if c.capacity.is_some() => f.swa_kv += c.floats(),
                LayerState::Kv(c) => f.global_kv += c.floats(),
                _ => {}
            }
        }
        f.global_kv += self.shared.as_ref().map_or(0, KvCache::floats);
        f.tap = self.tap.as_ref().map_or(0, Vec::len);
        f
    }

    fn check(&self, model: &Model<T>) -> Result<()> {
        if self.config != model.config || self.layers.len() != model.layout.blocks.len() {
            return Err(Error::StateMismatch("state was built for a different configuration".into()));
        }
        Ok(())
    }
}

fn row<T: Float>(v: &[T]) -> Tensor<T> {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("row shape")
}

fn embed<T: Float>(model: &Model<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let table = model.params.get(model.layout.embed);
    let (v, w) = (table.rows(), table.cols());
    if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
        return Err(Error::Config(format!("token {bad} outside vocabulary of {v}")));
    }
    let mut data = Vec::with_capacity(tokens.len() * w);
    for &t in tokens {
        data.extend_from_slice(table.row(t));
    }
    Tensor::new(vec![tokens.len(), w], data)
}

/// `h += r·y` in place.
fn residual_add<T: Float>(h: &mut [T], y: &[T], r: T) {
    for (a, &b) in h.iter_mut().zip(y) {
        *a = *a + r * b;
    }
}

fn head<T: Float>(model: &Model<T>, h: &[T]) -> Result<Vec<T>> {
    let cfg = &model.config;
    let norm = model.layout.final_norm.map(|id| model.params.get(*id));
    let hf = norm.forward(&row(h), T::lit(cfg.norm_eps))?;
    let out = model.params.get(model.layout.output_matrix());
    let logits = kernels::linear(&hf, out)?;
    let m = T::lit(cfg.logit_multiplier());
    Ok(logits.into_data().into_iter().map(|v| v * m).collect())
}

/// How a single-position block pass treats the shared-KV producer.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Pass {
    /// Decoding: the producer appends its own key/value, then attends.
    Decode,
    /// Last prompt position: the shared cache is already complete.
    PrefillLast,
}

/// Advance one position through block `l`, updating `h` in place.
fn block_step<T: Float>(
    model: &Model<T>,
    l: usize,
    h: &mut [T],
    state: &mut DecodeState<T>,
    pass: Pass,
) -> Result<()> {
    let cfg = &model.config;
    let eps = T::lit(cfg.norm_eps);
    let res = T::lit(cfg.residual_multiplier());
    let pos = state.pos;
    let b: Block<&Tensor<T>> = model.layout.blocks[l].map(|id| model.params.get(*id));
    let tap = model.plan.tap.filter(|t| t.layer == l);
    let producer = model.plan.kv_producer == Some(l);
    let kvw = 2 * cfg.kv_width() as u64;
    let a = b.mixer_norm.forward(&row(h), eps)?;
    let a = a.data();

    let (y, read, mut written) = match (&b.mixer, &mut state.layers[l]) {
        (Mixer::Ssm(p), LayerState::Ssm(st)) => {
            let n = st.floats() as u64;
            let (y, m) = p.step(a, st)?;
            if tap.is_some_and(|t| t.source == MemorySource::LastSsm) {
                state.tap = Some(m);
            }
            (y, n, n)
        }
        (Mixer::Attn { .. } | Mixer::DiffAttn { .. }, slot) => {
            let (mode, attn_tap) = match &b.mixer {
                Mixer::Attn { mode, .. } | Mixer::DiffAttn { mode, .. } => (
                    *mode,
                    tap.is_some_and(|t| {
                        matches!(t.source, MemorySource::LastAttention | MemorySource::MiddleAttention)
                    }),
                ),
                _ => unreachable!(),
            };
            let step = |cache: &mut KvCache<T>, mode: AttnMode, push: bool| -> Result<(Vec<T>, Vec<T>)> {
                match (&b.mixer, push) {
                    (Mixer::Attn { params, .. }, true) => params.step(a, pos, mode, cache),
                    (Mixer::Attn { params, .. }, false) => params.step_cross(a, pos, cache),
                    (Mixer::DiffAttn { params, .. }, true) => params.step(a, pos, mode, cache),
                    (Mixer::DiffAttn { params, .. }, false) => params.step_cross(a, pos, cache),
                    _ => unreachable!(),
                }
            };
            let (out, pre, read, written) = match slot {
                LayerState::Kv(cache) => {
                    let (o, p) = step(cache, mode, true)?;
                    (o, p, kvw * cache.len() as u64, kvw)
                }
                LayerState::SharedKv => {
                    let shared = state
                        .shared
                        .as_mut()
                        .ok_or_else(|| Error::StateMismatch("no shared KV cache".into()))?;
                    let push = producer && pass == Pass::Decode;
                    let (o, p) = step(shared, AttnMode::Full, push)?;
                    (o, p, kvw * shared.len() as u64, if push { kvw } else { 0 })
                }
                _ => return Err(Error::StateMismatch(format!("layer {l} has no attention state"))),
            };
            if attn_tap {
                state.tap = Some(pre);
            }
            (out, read, written)
        }
        (Mixer::Gmu(p), LayerState::Stateless) => {
            let m = state
                .tap
                .as_ref()
                .ok_or_else(|| Error::StateMismatch(format!("GMU at layer {l} has no memory")))?;
            let y = gmu_forward(&row(a), &row(m), p, eps)?;
            (y.into_data(), m.len() as u64, 0)
        }
        _ => return Err(Error::StateMismatch(format!("layer {l} state does not match its mixer"))),
    };
    residual_add(h, &y, res);
    let a = b.mlp_norm.forward(&row(h), eps)?;
    let (y, up) = swiglu_forward(&a, &b.mlp)?;
    if tap.is_some_and(|t| t.source == MemorySource::MlpBranch) {
        state.tap = Some(up.into_data());
    }
    residual_add(h, y.data(), res);
    if tap.is_some() {
        written += state.tap.as_ref().map_or(0, |t| t.len() as u64);
    }
    state.ledger.record_step(l, 1, read, written);
    Ok(())
}

/// Process a prompt; returns the state after it and the next-token logits.
pub fn prefill<T: Float>(model: &Model<T>, prompt: &[usize]) -> Result<(DecodeState<T>, Vec<T>)> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let cfg = &model.config;
    let eps = T::lit(cfg.norm_eps);
    let res = T::lit(cfg.residual_multiplier());
    let n = prompt.len();
    let mut state = DecodeState::new(model);
    state.ledger.begin_step();
    let self_end = model.plan.cross_start.unwrap_or(model.plan.depth());
    let mut h = embed(model, prompt)?;
    let last = |t: &Tensor<T>| t.row(t.rows() - 1).to_vec();

    for l in 0..self_end {
        let b: Block<&Tensor<T>> = model.layout.blocks[l].map(|id| model.params.get(*id));
        let tap = model.plan.tap.filter(|t| t.layer == l);
        let a = b.mixer_norm.forward(&h, eps)?;
        let mut written = 0;
        let y = match (&b.mixer, &mut state.layers[l]) {
            (Mixer::Ssm(p), LayerState::Ssm(st)) => {
                let (y, m, s) = p.prefill(&a)?;
                *st = s;
                written += st.floats() as u64;
                if tap.is_some_and(|t| t.source == MemorySource::LastSsm) {
                    state.tap = Some(last(&m));
                }
                y
            }
            (Mixer::Attn { .. } | Mixer::DiffAttn { .. }, LayerState::Kv(cache)) => {
                let r = match &b.mixer {
                    Mixer::Attn { params, mode } => attention_forward(&a, params, *mode, None)?,
                    Mixer::DiffAttn { params, mode } => diff_attention_forward(&a, params, *mode, None)?,
                    _ => unreachable!(),
                };
                let (k, v) = r.kv.as_ref().ok_or_else(|| Error::Config("self attention returned no KV".into()))?;
                *cache = KvCache::from_prefill(k, v, cache.capacity)?;
                written += cache.floats() as u64;
                if tap.is_some_and(|t| matches!(t.source, MemorySource::LastAttention | MemorySource::MiddleAttention)) {
                    state.tap = Some(last(&r.pre_o));
                }
                r.out
            }
            _ => return Err(Error::StateMismatch(format!("layer {l} cannot run in the self-decoder"))),
        };
        let hd = h.data_mut();
        residual_add(hd, y.data(), res);
        let a = b.mlp_norm.forward(&h, eps)?;
        let (y, up) = swiglu_forward(&a, &b.mlp)?;
        if tap.is_some_and(|t| t.source == MemorySource::MlpBranch) {
            state.tap = Some(last(&up));
        }
        residual_add(h.data_mut(), y.data(), res);
        if tap.is_some() {
            written += state.tap.as_ref().map_or(0, |t| t.len() as u64);
        }
        state.ledger.record_prefill(l, n as u64, written);
    }

    state.pos = n - 1;
    let mut x = last(&h);
    if let Some(p) = model.plan.kv_producer {
        // keys/values of every position from the producer's input stream
        let b: Block<&Tensor<T>> = model.layout.blocks[p].map(|id| model.params.get(*id));
        let a = b.mixer_norm.forward(&h, eps)?;
        let (k, v) = match &b.mixer {
            Mixer::Attn { params, .. } => params.project_kv(&a, false)?,
            Mixer::DiffAttn { params, .. } => params.attn.project_kv(&a, true)?,
            _ => return Err(Error::Config(format!("producer layer {p} is not attention"))),
        };
        let shared = KvCache::from_prefill(&k, &v, None)?;
        state.ledger.record_prefill(p, 0, shared.floats() as u64);
        state.shared = Some(shared);
    }
    for l in self_end..model.plan.depth() {
        block_step(model, l, &mut x, &mut state, Pass::PrefillLast)?;
    }
    state.pos = n;
    let logits = head(model, &x)?;
    Ok((state, logits))
}

/// Advance one token; returns the logits for the following token.
pub fn decode_step<T: Float>(model: &Model<T>, state: &mut DecodeState<T>, token: usize) -> Result<Vec<T>> {
    state.check(model)?;
    let mut x = embed(model, &[token])?.into_data();
    state.ledger.begin_step();
    for l in 0..model.plan.depth() {
        block_step(model, l, &mut x, state, Pass::Decode)?;
    }
    state.pos += 1;
    head(model, &x)
}
