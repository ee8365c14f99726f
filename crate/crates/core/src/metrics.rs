//! Generation metrics built from their definitions: corpus BLEU-4, ROUGE-n,
//! ROUGE-L, TER with greedy block-shift search, token edit distance, and the
//! approximate randomization significance test.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("hypothesis/reference counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty reference")]
    EmptyReference,
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("score lists must be non-empty and of equal length")]
    BadScoreLists,
}

/// One metric's corpus value plus per-sample values where the metric
/// defines them (BLEU-4 is corpus-level only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    pub corpus_value: f64,
    pub per_sample: Option<Vec<f64>>,
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for window in seq.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with 4-gram modified precisions, geometric mean, and
/// brevity penalty. No smoothing; any zero n-gram precision zeroes the score.
/// Range [0, 100].
pub fn bleu4_corpus<T: Eq + Hash + Clone, H: AsRef<[T]>, R: AsRef<[T]>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<f64, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if references.is_empty() || references.iter().any(|r| r.as_ref().is_empty()) {
        return Err(MetricError::EmptyReference);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let (hyp, reference) = (hyp.as_ref(), reference.as_ref());
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if total.iter().any(|&t| t == 0) || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * log_precision.exp())
}

/// ROUGE-n F1 from clipped n-gram overlap. Returns 0 when either side has
/// no n-grams.
pub fn rouge_n<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    assert!(n >= 1, "n must be at least 1");
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let hyp_total: usize = hyp_counts.values().sum();
    let ref_total: usize = ref_counts.values().sum();
    if hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let overlap: usize = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let precision = overlap as f64 / hyp_total as f64;
    let recall = overlap as f64 / ref_total as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 from longest common subsequence.
pub fn rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(hyp, reference) as f64;
    let precision = lcs / hyp.len() as f64;
    let recall = lcs / reference.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Word-level Levenshtein distance with unit costs.
pub fn token_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            let sub = diag + usize::from(x != y);
            row[j + 1] = sub.min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[b.len()]
}

/// Block shifts never move more than this many tokens at once, mirroring
/// the usual TER limit.
pub const TER_MAX_SHIFT_SIZE: usize = 10;

fn apply_shift<T: Clone>(seq: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = Vec::with_capacity(seq.len());
    rest.extend_from_slice(&seq[..start]);
    rest.extend_from_slice(&seq[start + len..]);
    let mut out = Vec::with_capacity(seq.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&seq[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Translation edit rate: (insertions + deletions + substitutions + block
/// shifts) / |reference|. Shift search is greedy: repeatedly apply the single
/// block shift that most reduces the remaining edit distance (one edit per
/// shift), until no shift lowers the total. Ties break on the first shift in
/// (start, length, destination) scan order.
pub fn ter<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let mut current: Vec<T> = hyp.to_vec();
    let mut shifts = 0usize;
    let mut dist = token_edit_distance(&current, reference);
    loop {
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for start in 0..current.len() {
            for len in 1..=TER_MAX_SHIFT_SIZE.min(current.len() - start) {
                for dest in 0..=current.len() - len {
                    if dest == start {
                        continue;
                    }
                    let candidate = apply_shift(&current, start, len, dest);
                    let d = token_edit_distance(&candidate, reference);
                    if d + 1 < dist && best.map_or(true, |(bd, ..)| d < bd) {
                        best = Some((d, start, len, dest));
                    }
                }
            }
        }
        match best {
            Some((d, start, len, dest)) => {
                current = apply_shift(&current, start, len, dest);
                shifts += 1;
                dist = d;
            }
            None => break,
        }
    }
    Ok((shifts + dist) as f64 / reference.len() as f64)
}

/// Two-sided approximate randomization test on paired per-sample scores.
///
/// The observed statistic is |mean(a) - mean(b)|; each iteration swaps each
/// pair independently with probability 1/2. Returns
/// (#{pseudo >= observed} + 1) / (iterations + 1).
pub fn approx_randomization_test(
    scores_a: &[f64],
    scores_b: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if scores_a.len() != scores_b.len() || scores_a.is_empty() {
        return Err(MetricError::BadScoreLists);
    }
    if iterations == 0 {
        return Err(MetricError::ZeroIterations);
    }
    let n = scores_a.len() as f64;
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..iterations {
        let sum: f64 = diffs
            .iter()
            .map(|&d| if rng.gen::<bool>() { -d } else { d })
            .sum();
        if (sum / n).abs() >= observed {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (iterations + 1) as f64)
}
