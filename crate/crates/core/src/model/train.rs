//! Seeded training with Adam, and a central-difference gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::net;
use super::{assemble_inputs, Assembled, ModelConfig, ModelError, ModelParameters, PromptVariant,
            StreamItem, TimedSample};
use crate::num::Scalar;
use crate::seeds::derive_seed;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("no training data")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 3e-4, batch_size: 16, steps: 1000, seed: 0 }
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<(usize, f64)>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Linear prompt vectors are functions of the current parameters; refresh
/// them in a pre-assembled sample after every parameter update.
fn refresh_prompt_vectors<F: Scalar>(params: &ModelParameters<F>, assembled: &mut Assembled<F>) {
    let Some(inj) = assembled.injection else { return };
    let prompt = params
        .linear_prompt_params()
        .expect("injection present but variant has no prompt parameters");
    // Scalars in the cache were computed with the same fixed normalization
    // constants, so rebuilding from the stored timestamp is unnecessary:
    // vector_j = scalar_j * w_j.
    let stream = if inj.site_is_encoder { &mut assembled.enc } else { &mut assembled.dec };
    let ws = [&prompt.w_year, &prompt.w_month, &prompt.w_day];
    for (j, item) in stream.iter_mut().take(3).enumerate() {
        if let StreamItem::Vector(v) = item {
            for (vi, &wi) in v.iter_mut().zip(ws[j]) {
                *vi = inj.scalars[j] * wi;
            }
        }
    }
}

/// Per-sample loss and the CE gradient w.r.t. logits, already divided by the
/// masked-position count and the batch size.
fn loss_and_dlogits<F: Scalar>(
    logits: &[F],
    vocab_size: usize,
    assembled: &Assembled<F>,
    batch_size: usize,
) -> (F, Vec<F>) {
    let count = assembled.mask.iter().filter(|&&m| m).count().max(1);
    let inv = F::from_f64_lossy(1.0 / (count as f64 * batch_size as f64));
    let mut total = F::zero();
    let mut dlogits = vec![F::zero(); logits.len()];
    for (t, (&target, &m)) in assembled.targets.iter().zip(&assembled.mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[t * vocab_size..(t + 1) * vocab_size];
        let logp = net::log_softmax(row);
        total -= logp[target as usize];
        let drow = &mut dlogits[t * vocab_size..(t + 1) * vocab_size];
        for (dv, &lp) in drow.iter_mut().zip(&logp) {
            *dv = lp.exp() * inv;
        }
        drow[target as usize] -= inv;
    }
    (total / F::from_f64_lossy(count as f64), dlogits)
}

/// Mean-over-samples batch loss, accumulating parameter gradients when
/// `grads` is given. Dropout applies only when a dropout context is passed.
fn batch_pass<F: Scalar>(
    params: &ModelParameters<F>,
    batch: &[Assembled<F>],
    mut dropout: Option<(&mut ChaCha20Rng, f64)>,
    mut grads: Option<&mut [F]>,
) -> F {
    let v = params.config.vocab_size;
    let mut total = F::zero();
    for a in batch {
        let ctx = dropout.as_mut().map(|(rng, rate)| (&mut **rng, *rate));
        let pass = net::run_forward(params, a, ctx);
        let (loss, dlogits) = loss_and_dlogits(&pass.logits, v, a, batch.len());
        total += loss;
        if let Some(grads) = grads.as_deref_mut() {
            net::run_backward(params, a, &pass, &dlogits, grads);
        }
    }
    total / F::from_f64_lossy(batch.len() as f64)
}

/// Trains a freshly initialized model. Deterministic for a given
/// (config, variant, data, hyper): shuffling, dropout, and initialization
/// all derive from fixed seeds.
pub fn train<F: Scalar>(
    config: &ModelConfig,
    variant: PromptVariant,
    vocab: &Vocabulary,
    data: &[TimedSample],
    hyper: &TrainHyper,
) -> Result<(ModelParameters<F>, TrainLog), TrainError> {
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut params = ModelParameters::<F>::init(config, variant)?;
    let mut assembled: Vec<Assembled<F>> = data
        .iter()
        .map(|s| assemble_inputs(s, variant, vocab, &params))
        .collect::<Result<_, _>>()?;

    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(derive_seed(hyper.seed, "train/shuffle"));
    let mut drop_rng = ChaCha20Rng::seed_from_u64(derive_seed(hyper.seed, "train/dropout"));

    let n = params.data.len();
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut grads = vec![F::zero(); n];
    let mut order: Vec<usize> = (0..assembled.len()).collect();
    let mut cursor = order.len(); // force a shuffle on the first step
    let mut log = TrainLog::default();

    for step in 0..hyper.steps {
        // Draw the next batch, reshuffling at epoch boundaries.
        let mut batch_idx = Vec::with_capacity(hyper.batch_size.min(order.len()));
        while batch_idx.len() < hyper.batch_size.min(order.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        if params.variant.uses_linear_prompt() {
            for &i in &batch_idx {
                refresh_prompt_vectors(&params, &mut assembled[i]);
            }
        }
        let batch: Vec<Assembled<F>> =
            batch_idx.iter().map(|&i| assembled[i].clone()).collect();

        grads.fill(F::zero());
        let dropout = if config.dropout_rate > 0.0 {
            Some((&mut drop_rng, config.dropout_rate))
        } else {
            None
        };
        let loss = batch_pass(&params, &batch, dropout, Some(&mut grads));
        let loss_f64 = loss.to_f64_lossy();
        if !loss_f64.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        log.losses.push((step, loss_f64));

        // Adam.
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..n {
            let g = grads[i].to_f64_lossy();
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let upd = hyper.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            params.data[i] = F::from_f64_lossy(params.data[i].to_f64_lossy() - upd);
        }
        if !params.all_finite() {
            return Err(TrainError::Diverged { step });
        }
    }
    Ok((params, log))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_name: String,
    pub worst_offset: usize,
}

/// Compares analytic gradients with central finite differences on a random
/// coordinate subset plus every linear-prompt coordinate. Runs in f64 with
/// dropout off. Relative error uses a small floor so that coordinates with
/// genuinely tiny gradients are not dominated by floating-point noise.
pub fn grad_check(
    config: &ModelConfig,
    variant: PromptVariant,
    vocab: &Vocabulary,
    data: &[TimedSample],
    n_coords: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mut config = *config;
    config.dropout_rate = 0.0;
    let mut params = ModelParameters::<f64>::init(&config, variant)?;
    let mut assembled: Vec<Assembled<f64>> = data
        .iter()
        .map(|s| assemble_inputs(s, variant, vocab, &params))
        .collect::<Result<_, _>>()?;

    let mut grads = vec![0.0f64; params.data.len()];
    let analytic_loss = batch_pass(&params, &assembled, None, Some(&mut grads));
    assert!(analytic_loss.is_finite());

    // Coordinates: a seeded random subset plus the full prompt projection.
    let mut coords: Vec<usize> = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "grad-check"));
    for _ in 0..n_coords {
        coords.push(rng.gen_range(0..params.data.len()));
    }
    for range in params.prompt_coordinate_ranges() {
        coords.extend(range);
    }
    coords.sort_unstable();
    coords.dedup();

    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_err: 0.0,
        worst_name: String::new(),
        worst_offset: 0,
    };
    let layout = params.layout.clone();
    for c in coords {
        let orig = params.data[c];
        let mut eval = |value: f64, params: &mut ModelParameters<f64>| {
            params.data[c] = value;
            if params.variant.uses_linear_prompt() {
                for a in assembled.iter_mut() {
                    refresh_prompt_vectors(params, a);
                }
            }
            batch_pass(params, &assembled, None, None)
        };
        let plus = eval(orig + epsilon, &mut params);
        let minus = eval(orig - epsilon, &mut params);
        params.data[c] = orig;
        if params.variant.uses_linear_prompt() {
            for a in assembled.iter_mut() {
                refresh_prompt_vectors(&params, a);
            }
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[c];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_offset = c;
            report.worst_name = layout
                .names()
                .find(|n| layout.range(n).contains(&c))
                .unwrap_or("?")
                .to_string();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod batch_grad_tests {
    use super::*;
    use crate::temporal::parse_date;
    use crate::tokenizer::{build_vocab, encode};

    fn setup(date: &str) -> (ModelParameters<f64>, Vec<Assembled<f64>>) {
        let vocab = build_vocab(&["alpha beta gamma delta"], 1).unwrap();
        let mut config = ModelConfig::tiny(vocab.len(), 17);
        config.dropout_rate = 0.0;
        let params = ModelParameters::init(&config, PromptVariant::EncLinear).unwrap();
        let sample = TimedSample {
            source: encode(&vocab, "alpha beta"),
            target: encode(&vocab, "gamma delta"),
            timestamp: parse_date(date).unwrap(),
        };
        let assembled =
            vec![assemble_inputs(&sample, PromptVariant::EncLinear, &vocab, &params).unwrap()];
        (params, assembled)
    }

    #[test]
    fn zero_year_scalar_gives_exactly_zero_year_gradient() {
        // Year 2000 normalizes to a scalar of 0, so the injected year vector
        // is the zero vector and no gradient can flow into its direction.
        let (params, assembled) = setup("2000-03-15");
        let mut grads = vec![0.0; params.data.len()];
        batch_pass(&params, &assembled, None, Some(&mut grads));
        let year = params.layout.range("prompt.w_year");
        assert!(grads[year].iter().all(|&g| g == 0.0));
        let month = params.layout.range("prompt.w_month");
        assert!(grads[month].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn finite_differences_detect_a_corrupted_prompt_gradient() {
        let (mut params, mut assembled) = setup("2015-03-15");
        let mut grads = vec![0.0; params.data.len()];
        batch_pass(&params, &assembled, None, Some(&mut grads));

        let c = params.layout.range("prompt.w_year").start;
        let eps = 1e-4;
        let orig = params.data[c];
        let mut eval = |value: f64, params: &mut ModelParameters<f64>| {
            params.data[c] = value;
            for a in assembled.iter_mut() {
                refresh_prompt_vectors(params, a);
            }
            batch_pass(params, &assembled, None, None)
        };
        let numeric = (eval(orig + eps, &mut params) - eval(orig - eps, &mut params)) / (2.0 * eps);
        let rel = |analytic: f64| {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
        };
        assert!(rel(grads[c]) < 1e-4, "true gradient should pass: {}", rel(grads[c]));
        // A corrupted analytic gradient must be flagged by the same test.
        assert!(rel(grads[c] + 1.0) > 1e-4);
        assert!(rel(0.0) > 1e-4, "a silently dropped gradient must be flagged");
    }
}
