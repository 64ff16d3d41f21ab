//! Decode-state snapshots in the named-tensor checkpoint format. Buffers are
//! stored flat; cache geometry, position and the ledger live in the
//! manifest's `meta`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecodeState, IoLedger, LayerState};
use crate::arch::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{KvCache, SsmState};
use crate::tensor::{checkpoint, Float, Tensor};

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    k_width: usize,
    v_width: usize,
    capacity: Option<usize>,
    pushed: usize,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    config: ModelConfig,
    pos: usize,
    ledger: IoLedger,
    caches: Vec<Option<CacheMeta>>,
    shared: Option<CacheMeta>,
    has_tap: bool,
}

const KIND: &str = "decode-state";

fn flat<T: Float>(v: &[T]) -> Tensor<T> {
    Tensor::new(vec![v.len()], v.to_vec()).expect("flat shape")
}

fn cache_meta<T>(c: &KvCache<T>) -> CacheMeta {
    CacheMeta {
        k_width: c.k_width,
        v_width: c.v_width,
        capacity: c.capacity,
        pushed: c.pushed,
    }
}

impl<T: Float> DecodeState<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut owned: Vec<(String, Tensor<T>)> = Vec::new();
        let mut caches = Vec::new();
        for (l, s) in self.layers.iter().enumerate() {
            let mut meta = None;
            match s {
                LayerState::Ssm(st) => {
                    owned.push((format!("layers.{l}.ssm.h"), flat(&st.h)));
                    owned.push((format!("layers.{l}.ssm.conv"), flat(&st.conv)));
                }
                LayerState::Kv(c) => {
                    owned.push((format!("layers.{l}.kv.k"), flat(&c.k)));
                    owned.push((format!("layers.{l}.kv.v"), flat(&c.v)));
                    meta = Some(cache_meta(c));
                }
                LayerState::SharedKv | LayerState::Stateless => {}
            }
            caches.push(meta);
        }
        if let Some(c) = &self.shared {
            owned.push(("shared.k".into(), flat(&c.k)));
            owned.push(("shared.v".into(), flat(&c.v)));
        }
        if let Some(t) = &self.tap {
            owned.push(("tap".into(), flat(t)));
        }
        let meta = StateMeta {
            kind: KIND.into(),
            config: self.config.clone(),
            pos: self.pos,
            ledger: self.ledger.clone(),
            caches,
            shared: self.shared.as_ref().map(cache_meta),
            has_tap: self.tap.is_some(),
        };
        let refs: Vec<(String, &Tensor<T>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = serde_json::to_value(meta).expect("state meta serialises");
        checkpoint::save(dir, &refs, meta)
    }

    /// Load a snapshot taken from a state of `model`.
    pub fn load(dir: &Path, model: &Model<T>) -> Result<Self> {
        let (tensors, meta) = checkpoint::load::<T>(dir)?;
        let meta: StateMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
            what: "decode-state manifest",
            detail: e.to_string(),
        })?;
        if meta.kind != KIND {
            return Err(Error::Format {
                what: "decode-state manifest",
                detail: format!("not a decode state ({})", meta.kind),
            });
        }
        let mut state = DecodeState::new(model);
        if meta.config != state.config {
            return Err(Error::StateMismatch("snapshot was taken with a different configuration".into()));
        }
        let mut it = tensors.into_iter();
        let mut next = |name: &str| -> Result<Vec<T>> {
            match it.next() {
                Some((n, t)) if n == name => Ok(t.into_data()),
                Some((n, _)) => Err(Error::StateMismatch(format!("expected {name}, found {n}"))),
                None => Err(Error::StateMismatch(format!("missing {name}"))),
            }
        };
        let restore = |k: Vec<T>, v: Vec<T>, m: &CacheMeta| KvCache {
            k,
            v,
            k_width: m.k_width,
            v_width: m.v_width,
            capacity: m.capacity,
            pushed: m.pushed,
        };
        for (l, s) in state.layers.iter_mut().enumerate() {
            match s {
                LayerState::Ssm(st) => {
                    let h = next(&format!("layers.{l}.ssm.h"))?;
                    let conv = next(&format!("layers.{l}.ssm.conv"))?;
                    if h.len() != st.h.len() || conv.len() != st.conv.len() {
                        return Err(Error::StateMismatch(format!("layer {l}: SSM state size")));
                    }
                    *st = SsmState { h, conv };
                }
                LayerState::Kv(_) => {
                    let k = next(&format!("layers.{l}.kv.k"))?;
                    let v = next(&format!("layers.{l}.kv.v"))?;
                    let m = meta.caches.get(l).and_then(Option::as_ref).ok_or_else(|| {
                        Error::StateMismatch(format!("layer {l}: cache geometry missing"))
                    })?;
                    *s = LayerState::Kv(restore(k, v, m));
                }
                LayerState::SharedKv | LayerState::Stateless => {}
            }
        }
        if let Some(m) = &meta.shared {
            let k = next("shared.k")?;
            let v = next("shared.v")?;
            state.shared = Some(restore(k, v, m));
        }
        if meta.has_tap {
            state.tap = Some(next("tap")?);
        }
        state.pos = meta.pos;
        state.ledger = meta.ledger;
        Ok(state)
    }
}
