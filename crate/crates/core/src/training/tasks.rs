//! Synthetic retrieval tasks. Tokens 0–2 are reserved separators; content
//! tokens are drawn from `3..vocab_size`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEP: usize = 0;
pub const QUERY: usize = 1;
pub const END: usize = 2;
pub const FIRST_CONTENT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `name SEP number END` records, then `QUERY name SEP` → number.
    PhonebookMini,
    /// `k v k v …`, then `QUERY k` → v.
    AssociativeRecall,
    /// `x₁…x_n SEP` → `x₁…x_n`.
    Copy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Records (or, for copy, the span length).
    pub n_pairs: usize,
    pub key_len: usize,
    pub value_len: usize,
    /// Upper bound on the episode length.
    pub sequence_length: usize,
    pub seed: u64,
}

/// One generated sequence; `answer[t]` marks tokens that are graded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub tokens: Vec<usize>,
    pub answer: Vec<bool>,
}

impl Episode {
    pub fn answer_span(&self) -> std::ops::Range<usize> {
        let start = self.answer.iter().position(|&a| a).unwrap_or(self.tokens.len());
        let len = self.answer.iter().filter(|&&a| a).count();
        start..start + len
    }
}

impl TaskSpec {
    pub fn associative_recall(vocab_size: usize, n_pairs: usize, sequence_length: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::AssociativeRecall,
            vocab_size,
            n_pairs,
            key_len: 1,
            value_len: 1,
            sequence_length,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Tokens one episode occupies.
    pub fn episode_len(&self) -> usize {
        let (n, k, v) = (self.n_pairs, self.key_len, self.value_len);
        match self.kind {
            TaskKind::AssociativeRecall => n * (k + v) + 1 + k + v,
            TaskKind::PhonebookMini => n * (k + v + 2) + 2 + k + v,
            TaskKind::Copy => 2 * n + 1,
        }
    }

    fn content(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT)
    }

    /// Key and value alphabets. Phonebook numbers use up to ten "digit"
    /// tokens; recall keys and values split the content range in half when
    /// both halves still hold `n_pairs` distinct entries, else share it.
    fn alphabets(&self) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (FIRST_CONTENT..self.vocab_size).collect();
        let half = all.len() / 2;
        let fits = |len: usize| (half as f64).powi(len as i32) >= self.n_pairs as f64;
        match self.kind {
            TaskKind::PhonebookMini => {
                let digits = 10.min(half);
                (all[digits..].to_vec(), all[..digits].to_vec())
            }
            TaskKind::AssociativeRecall if fits(self.key_len) && fits(self.value_len) => {
                (all[..half].to_vec(), all[half..].to_vec())
            }
            _ => (all.clone(), all),
        }
    }

    /// Whether keys and values are drawn from disjoint alphabets.
    pub fn disjoint_alphabets(&self) -> bool {
        let (k, v) = self.alphabets();
        k.iter().all(|t| !v.contains(t))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task: {m}")));
        if self.n_pairs == 0 || self.content() < 2 {
            return bad("needs at least one pair and two content tokens".into());
        }
        if self.kind != TaskKind::Copy && (self.key_len == 0 || self.value_len == 0) {
            return bad("key and value lengths must be positive".into());
        }
        if self.episode_len() > self.sequence_length {
            return bad(format!(
                "episode needs {} tokens but sequence_length is {}",
                self.episode_len(),
                self.sequence_length
            ));
        }
        if self.kind != TaskKind::Copy {
            let (keys, _) = self.alphabets();
            let space = (keys.len() as f64).powi(self.key_len as i32);
            if space < self.n_pairs as f64 {
                return bad(format!("{} distinct keys do not fit in the key alphabet", self.n_pairs));
            }
        }
        Ok(())
    }
}

fn draw_distinct(rng: &mut ChaCha8Rng, alphabet: &[usize], len: usize, n: usize) -> Vec<Vec<usize>> {
    if len == 1 && n <= alphabet.len() {
        return alphabet.choose_multiple(rng, n).map(|&t| vec![t]).collect();
    }
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(n);
    while out.len() < n {
        let c: Vec<usize> = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Generate the episode for `spec.seed`.
pub fn make_task(spec: &TaskSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tokens = Vec::with_capacity(spec.episode_len());
    let mut answer = Vec::with_capacity(spec.episode_len());
    let mut emit = |toks: &[usize], graded: bool| {
        tokens.extend_from_slice(toks);
        answer.extend(std::iter::repeat(graded).take(toks.len()));
    };
    match spec.kind {
        TaskKind::Copy => {
            let (alpha, _) = spec.alphabets();
            let x: Vec<usize> = (0..spec.n_pairs).map(|_| alpha[rng.gen_range(0..alpha.len())]).collect();
            emit(&x, false);
            emit(&[SEP], false);
            emit(&x, true);
        }
        TaskKind::AssociativeRecall | TaskKind::PhonebookMini => {
            let (ka, va) = spec.alphabets();
            let keys = draw_distinct(&mut rng, &ka, spec.key_len, spec.n_pairs);
            // values without replacement whenever the value space allows it
            let space = (va.len() as f64).powi(spec.value_len as i32);
            let values = if space >= spec.n_pairs as f64 {
                draw_distinct(&mut rng, &va, spec.value_len, spec.n_pairs)
            } else {
                (0..spec.n_pairs)
                    .map(|_| (0..spec.value_len).map(|_| va[rng.gen_range(0..va.len())]).collect())
                    .collect()
            };
            let phonebook = spec.kind == TaskKind::PhonebookMini;
            for (k, v) in keys.iter().zip(&values) {
                emit(k, false);
                if phonebook {
                    emit(&[SEP], false);
                }
                emit(v, false);
                if phonebook {
                    emit(&[END], false);
                }
            }
            let q = rng.gen_range(0..spec.n_pairs);
            emit(&[QUERY], false);
            emit(&keys[q], false);
            if phonebook {
                emit(&[SEP], false);
            }
            emit(&values[q], true);
        }
    }
    debug_assert_eq!(tokens.len(), spec.episode_len());
    Ok(Episode { tokens, answer })
}
