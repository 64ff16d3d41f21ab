//! Desk-scale training: AdamW under a parameterization plan, synthetic
//! retrieval tasks or a byte-level text corpus, CSV loss traces,
//! checkpoints and recall evaluation.

mod optim;
mod tasks;

pub use optim::{adamw_step, clip_grad_norm, OptimState};
pub use tasks::{make_task, Episode, TaskKind, TaskSpec, END, FIRST_CONTENT, QUERY, SEP};

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scaling::{learning_rate, mup_plan, LrSchedule};
use crate::tensor::{checkpoint, Float, Graph, Tensor};

fn default_batch() -> usize {
    32
}
fn default_seq_len() -> usize {
    256
}
fn default_warmup() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Synthetic task; exactly one of `task` and `corpus` is set.
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// Newline-delimited UTF-8 text, byte-tokenized.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Window length in corpus mode.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Peak learning rate; defaults to the depth/batch rule.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_task(model: ModelConfig, task: TaskSpec, steps: usize) -> Self {
        Self {
            model,
            task: Some(task),
            corpus: None,
            steps,
            batch_size: default_batch(),
            seq_len: default_seq_len(),
            lr: None,
            warmup_fraction: default_warmup(),
            clip_norm: default_clip(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match (&self.task, &self.corpus) {
            (Some(t), None) => {
                t.validate()?;
                if t.vocab_size > self.model.vocab_size {
                    return Err(Error::Config(format!(
                        "task vocabulary {} exceeds model vocabulary {}",
                        t.vocab_size, self.model.vocab_size
                    )));
                }
            }
            (None, Some(_)) if self.model.vocab_size < FIRST_CONTENT + 256 => {
                return Err(Error::Config("corpus mode needs a vocabulary of at least 259".into()));
            }
            (None, Some(_)) => {}
            _ => return Err(Error::Config("set exactly one of `task` and `corpus`".into())),
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || self.clip_norm <= 0.0 {
            return Err(Error::Config("warmup_fraction must be in [0, 1) and clip_norm positive".into()));
        }
        Ok(())
    }

    /// Tokens per optimizer step.
    pub fn batch_tokens(&self) -> usize {
        let len = self.task.as_ref().map_or(self.seq_len, TaskSpec::episode_len);
        self.batch_size * len
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr
            .unwrap_or_else(|| learning_rate(self.model.depth as f64, self.batch_tokens() as f64))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: (self.steps as f64 * self.warmup_fraction).round() as usize,
            total_steps: self.steps,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub opt: OptimState,
    pub trace: Vec<TraceRow>,
}

/// A batch of equal-length sequences with next-token targets and weights.
struct Batch {
    tokens: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    seqs: usize,
}

impl Batch {
    fn from_sequences(seqs: &[(Vec<usize>, Vec<bool>)]) -> Self {
        let mut b = Batch { tokens: Vec::new(), targets: Vec::new(), weights: Vec::new(), seqs: seqs.len() };
        for (toks, graded) in seqs {
            for t in 0..toks.len() {
                b.tokens.push(toks[t]);
                let next = t + 1 < toks.len();
                b.targets.push(if next { toks[t + 1] } else { 0 });
                b.weights.push(if next && graded[t + 1] { 1.0 } else { 0.0 });
            }
        }
        b
    }
}

fn read_corpus(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<usize> = text
        .lines()
        .flat_map(|l| l.bytes().chain(std::iter::once(b'\n')))
        .map(|b| FIRST_CONTENT + b as usize)
        .collect();
    Ok(tokens)
}

enum Source {
    Task(TaskSpec),
    Corpus(Vec<usize>),
}

impl Source {
    fn batch(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut seqs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            match self {
                Source::Task(spec) => {
                    let e = make_task(&spec.with_seed(rng.next_u64()))?;
                    seqs.push((e.tokens, e.answer));
                }
                Source::Corpus(text) => {
                    let len = cfg.seq_len.min(text.len());
                    let start = rng.gen_range(0..=text.len() - len);
                    seqs.push((text[start..start + len].to_vec(), vec![true; len]));
                }
            }
        }
        Ok(Batch::from_sequences(&seqs))
    }
}

/// Loss and parameter gradients of `model` on one batch.
fn loss_and_grads<T: Float>(model: &Model<T>, batch: &Batch) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let out = model.forward_graph(&mut g, &vars, &batch.tokens, batch.seqs)?;
    let weights: Vec<T> = batch.weights.iter().map(|&w| T::lit(w)).collect();
    let loss = g.cross_entropy(out.logits, &batch.targets, &weights)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(&model.params.tensors)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Train from a fresh initialisation; `on_step` sees every trace row.
pub fn train<T: Float>(cfg: &TrainConfig, mut on_step: impl FnMut(&TraceRow)) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.seed)?;
    let source = match (&cfg.task, &cfg.corpus) {
        (Some(t), _) => Source::Task(t.clone()),
        (_, Some(p)) => {
            let text = read_corpus(p)?;
            if text.len() < 2 {
                return Err(Error::Empty("corpus"));
            }
            Source::Corpus(text)
        }
        _ => unreachable!("validated"),
    };
    let plan = mup_plan(&cfg.model);
    let sched = cfg.schedule();
    let peak = cfg.peak_lr();
    let mut opt = OptimState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = source.batch(cfg, &mut rng)?;
        let (loss, mut grads) = loss_and_grads(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, loss: grad_norm });
        }
        let lr = peak * sched.multiplier(step);
        adamw_step(&mut model.params, &grads, &plan, &mut opt, lr)?;
        let row = TraceRow { step, loss, lr, grad_norm };
        on_step(&row);
        trace.push(row);
    }
    Ok(TrainOutcome { model, opt, trace })
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in trace {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

const CHECKPOINT_KIND: &str = "model";

/// Save model weights with their configuration.
pub fn save_checkpoint<T: Float>(dir: &Path, model: &Model<T>, extra: serde_json::Value) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        config: model.config.clone(),
        extra,
    };
    checkpoint::save(dir, &model.named_tensors(), serde_json::to_value(meta).expect("meta serialises"))
}

pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<Model<T>> {
    let (tensors, meta) = checkpoint::load::<T>(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        what: "checkpoint manifest",
        detail: e.to_string(),
    })?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Format {
            what: "checkpoint manifest",
            detail: format!("not a model checkpoint ({})", meta.kind),
        });
    }
    Model::from_tensors(meta.config, tensors)
}

/// Exact-match accuracy with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecallEval {
    pub accuracy: f64,
    pub stderr: f64,
    pub correct: usize,
    pub episodes: usize,
}

impl RecallEval {
    pub fn from_outcomes(outcomes: &[bool]) -> Self {
        let n = outcomes.len();
        let correct = outcomes.iter().filter(|&&o| o).count();
        let p = correct as f64 / n.max(1) as f64;
        Self {
            accuracy: p,
            stderr: (p * (1.0 - p) / n.max(1) as f64).sqrt(),
            correct,
            episodes: n,
        }
    }
}

/// Whether `predicted` reproduces the episode's whole answer span.
pub fn answer_matches(episode: &Episode, predicted: &[usize]) -> bool {
    let span = episode.answer_span();
    predicted.len() == span.len() && episode.tokens[span] == *predicted
}

/// Teacher-forced greedy predictions for each answer token.
pub fn predict_answer<T: Float>(logits: &Tensor<T>, episode: &Episode) -> Vec<usize> {
    episode
        .answer_span()
        .map(|t| {
            let r = logits.row(t - 1);
            (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b })
        })
        .collect()
}

/// Exact-match recall on `n_episodes` episodes seeded from `spec.seed`.
pub fn evaluate_recall<T: Float>(model: &Model<T>, spec: &TaskSpec, n_episodes: usize) -> Result<RecallEval> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let episodes: Vec<Episode> = (0..n_episodes)
        .map(|_| make_task(&spec.with_seed(rng.next_u64())))
        .collect::<Result<_>>()?;
    let len = spec.episode_len();
    let mut outcomes = Vec::with_capacity(n_episodes);
    for chunk in episodes.chunks(16) {
        let tokens: Vec<usize> = chunk.iter().flat_map(|e| e.tokens.iter().copied()).collect();
        let (logits, _) = model.forward_with_hidden(&tokens, chunk.len())?;
        for (i, e) in chunk.iter().enumerate() {
            let rows = logits.slice_rows(i * len, len);
            outcomes.push(answer_matches(e, &predict_answer(&rows, e)));
        }
    }
    Ok(RecallEval::from_outcomes(&outcomes))
}
