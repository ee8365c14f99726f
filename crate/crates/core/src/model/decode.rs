//! Greedy and beam decoding. Both are deterministic: score ties are broken
//! toward the lexicographically smaller token sequence, so beam size 1
//! reproduces greedy decoding exactly.

use super::{assemble_inputs, net, Assembled, ModelError, ModelParameters, StreamItem,
            TimedSample};
use crate::num::Scalar;
use crate::temporal::CalendarDate;
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, PAD};

/// Encoder stream plus the decoder prefix (prompt positions and BOS) for a
/// source/timestamp pair, built the same way as during training.
fn decode_skeleton<F: Scalar>(
    params: &ModelParameters<F>,
    vocab: &Vocabulary,
    source: &[TokenId],
    timestamp: CalendarDate,
) -> Result<Assembled<F>, ModelError> {
    // Assemble with a one-token dummy target, then drop it: what remains of
    // the decoder stream is exactly the generation prefix.
    let sample = TimedSample { source: source.to_vec(), target: vec![EOS], timestamp };
    let mut a = assemble_inputs(&sample, params.variant, vocab, params)?;
    a.dec.pop();
    a.targets.clear();
    a.mask.clear();
    Ok(a)
}

fn last_row_log_probs<F: Scalar>(params: &ModelParameters<F>, a: &Assembled<F>) -> Vec<F> {
    let v = params.config.vocab_size;
    let pass = net::run_forward(params, a, None);
    let t = a.dec.len() - 1;
    net::log_softmax(&pass.logits[t * v..(t + 1) * v])
}

/// PAD and BOS are never generated.
fn candidate_ids(vocab_size: usize) -> impl Iterator<Item = TokenId> {
    (0..vocab_size as TokenId).filter(|&id| id != PAD && id != BOS)
}

/// Greedy decoding; stops at EOS or after `max_new` tokens (capped by
/// `max_len`). Returns the generated tokens without EOS.
pub fn decode_greedy<F: Scalar>(
    params: &ModelParameters<F>,
    vocab: &Vocabulary,
    source: &[TokenId],
    timestamp: CalendarDate,
    max_new: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let mut a = decode_skeleton(params, vocab, source, timestamp)?;
    let budget = max_new.min(params.config.max_len.saturating_sub(a.dec.len()));
    let mut out = Vec::new();
    for _ in 0..budget {
        let logp = last_row_log_probs(params, &a);
        // Strictly-greater comparison keeps the lowest id on ties.
        let mut best = EOS;
        let mut best_lp = F::neg_infinity();
        for id in candidate_ids(params.config.vocab_size) {
            let lp = logp[id as usize];
            if lp > best_lp {
                best_lp = lp;
                best = id;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        a.dec.push(StreamItem::Token(best));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

/// `a` is better: higher score, ties toward the smaller token sequence.
fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    if a.log_prob != b.log_prob {
        return a.log_prob > b.log_prob;
    }
    a.tokens < b.tokens
}

/// Beam search with length-unnormalized log-probability scores. Finished
/// hypotheses (those that produced EOS) compete with unfinished ones at the
/// end on the same scale. Returns the generated tokens without EOS.
pub fn decode_beam<F: Scalar>(
    params: &ModelParameters<F>,
    vocab: &Vocabulary,
    source: &[TokenId],
    timestamp: CalendarDate,
    beam_size: usize,
    max_new: usize,
) -> Result<Vec<TokenId>, ModelError> {
    assert!(beam_size >= 1);
    let skeleton = decode_skeleton(params, vocab, source, timestamp)?;
    let budget = max_new.min(params.config.max_len.saturating_sub(skeleton.dec.len()));
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..budget {
        // (hypothesis, finishing) — an EOS extension finishes the hypothesis
        // but must still win one of the beam_size slots to survive.
        let mut candidates: Vec<(Hypothesis, bool)> = Vec::new();
        for hyp in &live {
            let mut a = skeleton.clone();
            a.dec.extend(hyp.tokens.iter().map(|&t| StreamItem::Token(t)));
            let logp = last_row_log_probs(params, &a);
            for id in candidate_ids(params.config.vocab_size) {
                let score = hyp.log_prob + logp[id as usize].to_f64_lossy();
                let mut tokens = hyp.tokens.clone();
                if id != EOS {
                    tokens.push(id);
                }
                candidates.push((Hypothesis { tokens, log_prob: score }, id == EOS));
            }
        }
        candidates.sort_by(|(a, _), (b, _)| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_size);
        live = Vec::new();
        for (hyp, is_finished) in candidates {
            if is_finished {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    let mut best: Option<Hypothesis> = None;
    for hyp in finished.into_iter().chain(live) {
        if best.as_ref().map_or(true, |b| better(&hyp, b)) {
            best = Some(hyp);
        }
    }
    Ok(best.map(|h| h.tokens).unwrap_or_default())
}

/// Length-unnormalized log-probability of generating `tokens` followed by
/// EOS, by teacher forcing. The same quantity beam search scores finished
/// hypotheses with.
pub fn sequence_log_prob<F: Scalar>(
    params: &ModelParameters<F>,
    vocab: &Vocabulary,
    source: &[TokenId],
    timestamp: CalendarDate,
    tokens: &[TokenId],
) -> Result<f64, ModelError> {
    let mut a = decode_skeleton(params, vocab, source, timestamp)?;
    let prefix_len = a.dec.len();
    a.dec.extend(tokens.iter().map(|&t| StreamItem::Token(t)));
    if a.dec.len() > params.config.max_len {
        return Err(ModelError::TooLong {
            stream: "decoder",
            len: a.dec.len(),
            max: params.config.max_len,
        });
    }
    let v = params.config.vocab_size;
    let pass = net::run_forward(params, &a, None);
    let mut total = 0.0;
    for (i, &tok) in tokens.iter().chain(std::iter::once(&EOS)).enumerate() {
        let t = prefix_len - 1 + i;
        let logp = net::log_softmax(&pass.logits[t * v..(t + 1) * v]);
        total += logp[tok as usize].to_f64_lossy();
    }
    Ok(total)
}
