//! Synthetic sequence-classification tasks and an activation generator with
//! per-head statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples in the fixed held-out evaluation draw.
pub const EVAL_SAMPLES: usize = 4096;

/// Token 0 is the marker for [`TaskKind::MarkerDetection`].
pub const MARKER: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label 1 if the marker token occurs anywhere in the sequence.
    MarkerDetection,
    /// Label is whichever of tokens 0 and 1 occurs more often; other
    /// positions hold distractor tokens.
    MajorityToken,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marker-detection" | "marker" => Ok(TaskKind::MarkerDetection),
            "majority-token" | "majority" => Ok(TaskKind::MajorityToken),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::MarkerDetection => "marker-detection",
            TaskKind::MajorityToken => "majority-token",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Positives in marker detection carry between 1 and this many markers.
    pub max_markers: usize,
    pub seed: u64,
}

/// A batch of `labels.len()` sequences, row-major in `tokens`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, vocab_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let task = SyntheticTask {
            kind,
            vocab_size,
            seq_len,
            max_markers: 3,
            seed,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "{} needs a vocabulary of at least 2",
                self.kind
            )));
        }
        if self.seq_len == 0 || self.max_markers == 0 || self.max_markers > self.seq_len {
            return Err(Error::Config(format!(
                "invalid task shape: seq_len {}, max_markers {}",
                self.seq_len, self.max_markers
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        2
    }

    /// Stream of training batches for this task's seed.
    pub fn train_rng(&self) -> Rng {
        Rng::derive(self.seed, "task.train")
    }

    /// The fixed held-out draw of [`EVAL_SAMPLES`] sequences.
    pub fn eval_set(&self) -> Batch {
        self.sample(EVAL_SAMPLES, &mut Rng::derive(self.seed, "task.eval"))
    }

    /// Draws `n` sequences. Labels come in shuffled `(0, 1)` pairs, so any
    /// even-sized draw is exactly balanced.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Batch {
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        rng.shuffle(&mut labels);
        let mut tokens = Vec::with_capacity(n * self.seq_len);
        for &y in &labels {
            match self.kind {
                TaskKind::MarkerDetection => self.marker_sequence(y, rng, &mut tokens),
                TaskKind::MajorityToken => self.majority_sequence(y, rng, &mut tokens),
            }
        }
        Batch { tokens, labels }
    }

    fn marker_sequence(&self, label: usize, rng: &mut Rng, out: &mut Vec<usize>) {
        let start = out.len();
        out.extend((0..self.seq_len).map(|_| 1 + rng.below(self.vocab_size - 1)));
        if label == 1 {
            let count = 1 + rng.below(self.max_markers);
            let mut pos: Vec<usize> = (0..self.seq_len).collect();
            rng.shuffle(&mut pos);
            for &p in &pos[..count] {
                out[start + p] = MARKER;
            }
        }
    }

    fn majority_sequence(&self, label: usize, rng: &mut Rng, out: &mut Vec<usize>) {
        let n = self.seq_len;
        // signal positions: k in [1, n], split so the label token strictly wins
        let k = if self.vocab_size > 2 {
            1 + rng.below(n)
        } else {
            n
        };
        let winners = k / 2 + 1 + rng.below(k - k / 2);
        let mut seq: Vec<usize> = (0..n)
            .map(|i| {
                if i < winners {
                    label
                } else if i < k {
                    1 - label
                } else {
                    2 + rng.below(self.vocab_size - 2)
                }
            })
            .collect();
        rng.shuffle(&mut seq);
        out.extend(seq);
    }
}

/// Activations of shape `(B, heads, N, head_dim)` where head `h` is drawn
/// from `Normal(means[h], stds[h]^2)`.
pub fn generate_heterogeneous_heads(
    batch: usize,
    seq_len: usize,
    head_dim: usize,
    means: &[f64],
    stds: &[f64],
    seed: u64,
) -> Result<Tensor<f32>> {
    if means.len() != stds.len() || means.is_empty() {
        return Err(Error::Config(format!(
            "{} means for {} standard deviations",
            means.len(),
            stds.len()
        )));
    }
    if stds.iter().any(|&s| s.is_nan() || s < 0.0) {
        return Err(Error::Config(
            "standard deviations must be non-negative".into(),
        ));
    }
    let heads = means.len();
    let per_head = seq_len * head_dim;
    let mut rng = Rng::new(seed);
    Tensor::from_fn([batch, heads, seq_len, head_dim], |i| {
        let h = (i / per_head) % heads;
        rng.normal(means[h], stds[h]) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn has_marker(seq: &[usize]) -> bool {
        seq.contains(&MARKER)
    }

    #[test]
    fn marker_labels_match_content() {
        let task = SyntheticTask::new(TaskKind::MarkerDetection, 16, 16, 3).unwrap();
        let b = task.sample(500, &mut task.train_rng());
        for (seq, &y) in b.tokens.chunks(16).zip(&b.labels) {
            assert_eq!(has_marker(seq), y == 1);
        }
    }

    #[test]
    fn majority_labels_match_content() {
        for vocab in [2, 5] {
            let task = SyntheticTask::new(TaskKind::MajorityToken, vocab, 9, 4).unwrap();
            let b = task.sample(500, &mut task.train_rng());
            for (seq, &y) in b.tokens.chunks(9).zip(&b.labels) {
                let zeros = seq.iter().filter(|&&t| t == 0).count();
                let ones = seq.iter().filter(|&&t| t == 1).count();
                assert_eq!(y, usize::from(ones > zeros));
                assert_ne!(zeros, ones);
            }
        }
    }

    #[test]
    fn labels_balanced() {
        for kind in [TaskKind::MarkerDetection, TaskKind::MajorityToken] {
            let task = SyntheticTask::new(kind, 16, 16, 11).unwrap();
            let mut rng = task.train_rng();
            // odd batch sizes can tilt a draw by one sample per batch
            let mut ones = 0;
            let mut total = 0;
            for _ in 0..10 {
                let b = task.sample(999, &mut rng);
                ones += b.labels.iter().sum::<usize>();
                total += b.len();
            }
            let frac = ones as f64 / total as f64;
            assert!((frac - 0.5).abs() <= 0.02, "{kind}: {frac}");
        }
    }

    #[test]
    fn eval_set_is_fixed() {
        let task = SyntheticTask::new(TaskKind::MarkerDetection, 16, 16, 5).unwrap();
        assert_eq!(task.eval_set(), task.eval_set());
        assert_eq!(task.eval_set().len(), EVAL_SAMPLES);
        let other = SyntheticTask { seed: 6, ..task };
        assert_ne!(task.eval_set(), other.eval_set());
    }

    #[test]
    fn constant_heads_when_std_is_zero() {
        let x = generate_heterogeneous_heads(2, 3, 4, &[-3.0, 0.0, 3.0], &[0.0; 3], 1).unwrap();
        assert_eq!(x.shape(), &[2, 3, 3, 4]);
        for (i, &v) in x.data().iter().enumerate() {
            let h = (i / 12) % 3;
            assert_eq!(v, [-3.0, 0.0, 3.0][h]);
        }
    }

    #[test]
    fn head_statistics() {
        let x = generate_heterogeneous_heads(4, 32, 32, &[-3.0, 3.0], &[0.5, 2.0], 2).unwrap();
        for h in 0..2 {
            let vals: Vec<f64> = x
                .data()
                .chunks(1024)
                .enumerate()
                .filter(|(i, _)| i % 2 == h)
                .flat_map(|(_, c)| c.iter().map(|&v| v as f64))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((mean - [-3.0, 3.0][h]).abs() < 0.1);
            assert!((std - [0.5, 2.0][h]).abs() < 0.1);
        }
    }

    #[test]
    fn rejects_bad_generator_input() {
        assert!(generate_heterogeneous_heads(1, 1, 1, &[0.0], &[1.0, 1.0], 0).is_err());
        assert!(generate_heterogeneous_heads(1, 1, 1, &[0.0], &[-1.0], 0).is_err());
        assert!(SyntheticTask::new(TaskKind::MarkerDetection, 1, 16, 0).is_err());
    }
}
