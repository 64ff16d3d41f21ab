//! Semantic floats read from and written to decode caches, per layer.
//!
//! Reads count cache contents a mixer consumes (keys/values, recurrent
//! state, the GMU memory); weights are not counted. Prefill contributes
//! evaluations and writes; reads are charged per single-position pass.

use serde::{Deserialize, Serialize};

use crate::arch::{LayerPlan, MixerKind};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerIo {
    pub kind: Option<MixerKind>,
    /// Token positions the mixer was evaluated at.
    pub mixer_evals: u64,
    /// Token positions the MLP was evaluated at.
    pub mlp_evals: u64,
    pub floats_read: u64,
    pub floats_written: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepIo {
    pub floats_read: u64,
    pub floats_written: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoLedger {
    pub totals: Vec<LayerIo>,
    /// Per-layer I/O of the most recent decode step (or of the final
    /// prompt position after prefill).
    pub last_step: Vec<StepIo>,
    pub cross_start: Option<usize>,
}

impl IoLedger {
    pub fn new(plan: &LayerPlan) -> Self {
        Self {
            totals: plan
                .mixers
                .iter()
                .map(|&k| LayerIo { kind: Some(k), ..LayerIo::default() })
                .collect(),
            last_step: vec![StepIo::default(); plan.depth()],
            cross_start: plan.cross_start,
        }
    }

    pub(crate) fn begin_step(&mut self) {
        self.last_step.iter_mut().for_each(|s| *s = StepIo::default());
    }

    pub(crate) fn record_step(&mut self, layer: usize, positions: u64, read: u64, written: u64) {
        let t = &mut self.totals[layer];
        t.mixer_evals += positions;
        t.mlp_evals += positions;
        t.floats_read += read;
        t.floats_written += written;
        let s = &mut self.last_step[layer];
        s.floats_read += read;
        s.floats_written += written;
    }

    pub(crate) fn record_prefill(&mut self, layer: usize, positions: u64, written: u64) {
        let t = &mut self.totals[layer];
        t.mixer_evals += positions;
        t.mlp_evals += positions;
        t.floats_written += written;
    }

    fn cross_layers(&self) -> std::ops::Range<usize> {
        self.cross_start.unwrap_or(self.totals.len())..self.totals.len()
    }

    /// Total MLP evaluations over the cross-decoder.
    pub fn cross_decoder_mlp_evals(&self) -> u64 {
        self.cross_layers().map(|l| self.totals[l].mlp_evals).sum()
    }

    /// Total MLP evaluations over the self-decoder.
    pub fn self_decoder_mlp_evals(&self) -> u64 {
        let end = self.cross_start.unwrap_or(self.totals.len());
        self.totals[..end].iter().map(|t| t.mlp_evals).sum()
    }

    /// Floats the cross-decoder read in the last step.
    pub fn cross_decoder_read(&self) -> u64 {
        self.cross_layers().map(|l| self.last_step[l].floats_read).sum()
    }

    /// Floats read in the last step by layers of `kind`.
    pub fn step_read_by_kind(&self, kind: MixerKind) -> u64 {
        self.totals
            .iter()
            .zip(&self.last_step)
            .filter(|(t, _)| t.kind == Some(kind))
            .map(|(_, s)| s.floats_read)
            .sum()
    }
}
