//! Experiment harness: trains every prompt variant from one master seed,
//! scores generations, runs date-perturbation sensitivity analysis, and
//! writes deterministic report directories.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    approx_randomization_test, bleu4_corpus, rouge_l, rouge_n, ter, token_edit_distance,
    MetricError,
};
use crate::model::{
    decode_beam, decode_greedy, train, ModelConfig, ModelError, ModelParameters, PromptVariant,
    TimedSample, TrainError, TrainHyper,
};
use crate::seeds::derive_seed;
use crate::temporal::{shift_date, standard_perturbations, CalendarDate};
use crate::tokenizer::{decode, TokenId, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Date(#[from] crate::temporal::DateError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad experiment config: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyData(&'static str),
}

// ---------------------------------------------------------------------------
// Experiment configuration (TOML)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, n_enc_layers: 2, n_dec_layers: 2, d_ff: 128, max_len: 64, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 16, steps: 1500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub max_new: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { beam_size: 4, max_new: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub samples: usize,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self { samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variants: Vec<String>,
    pub randomization_iters: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub perturb: PerturbSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variants: PromptVariant::ALL_DEFAULT.iter().map(|v| v.label()).collect(),
            randomization_iters: 1000,
            model: ModelSection::default(),
            train: TrainSection::default(),
            decode: DecodeSection::default(),
            perturb: PerturbSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn parsed_variants(&self) -> Result<Vec<PromptVariant>, HarnessError> {
        self.variants.iter().map(|v| PromptVariant::parse(v).map_err(HarnessError::Config)).collect()
    }

    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_enc_layers: self.model.n_enc_layers,
            n_dec_layers: self.model.n_dec_layers,
            d_ff: self.model.d_ff,
            max_len: self.model.max_len,
            dropout_rate: self.model.dropout,
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// All metrics for one hypothesis/reference set, token-level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub ter: f64,
    pub exact_match: f64,
    pub mean_edit_distance: f64,
}

/// Per-sample score vectors used by the significance test.
#[derive(Debug, Clone, Default)]
pub struct PerSampleScores {
    pub rouge_l: Vec<f64>,
    pub exact: Vec<f64>,
}

pub fn score_set(
    hyps: &[Vec<TokenId>],
    refs: &[Vec<TokenId>],
) -> Result<(Scores, PerSampleScores), HarnessError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch(hyps.len(), refs.len()).into());
    }
    if refs.is_empty() {
        return Err(HarnessError::EmptyData("references"));
    }
    let n = refs.len() as f64;
    let mut per = PerSampleScores::default();
    let (mut r1, mut r2, mut rl, mut t, mut em, mut ed) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (h, r) in hyps.iter().zip(refs) {
        r1 += rouge_n(h, r, 1);
        r2 += rouge_n(h, r, 2);
        let sample_rl = rouge_l(h, r);
        rl += sample_rl;
        t += ter(h, r)?;
        let exact = if h == r { 1.0 } else { 0.0 };
        em += exact;
        ed += token_edit_distance(h, r) as f64;
        per.rouge_l.push(sample_rl);
        per.exact.push(exact);
    }
    let scores = Scores {
        bleu4: bleu4_corpus(hyps, refs)?,
        rouge1: r1 / n,
        rouge2: r2 / n,
        rouge_l: rl / n,
        ter: t / n,
        exact_match: em / n,
        mean_edit_distance: ed / n,
    };
    Ok((scores, per))
}

// ---------------------------------------------------------------------------
// Variant matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub final_train_loss: f64,
    pub scores: Scores,
    /// Two-sided approximate-randomization p-values against the no-prompt
    /// baseline on per-sample ROUGE-L and exact match. Absent for the
    /// baseline itself.
    pub p_rouge_l_vs_none: Option<f64>,
    pub p_exact_vs_none: Option<f64>,
    #[serde(skip)]
    pub outputs: Vec<String>,
    #[serde(skip)]
    pub per_sample: PerSampleScores,
    /// The trained model, for downstream analysis (not serialized).
    #[serde(skip)]
    pub params: Option<ModelParameters<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub variants: Vec<VariantResult>,
}

fn decode_one(
    params: &ModelParameters<f64>,
    vocab: &Vocabulary,
    sample: &TimedSample,
    timestamp: CalendarDate,
    decode_cfg: &DecodeSection,
) -> Result<Vec<TokenId>, ModelError> {
    if decode_cfg.beam_size <= 1 {
        decode_greedy(params, vocab, &sample.source, timestamp, decode_cfg.max_new)
    } else {
        decode_beam(params, vocab, &sample.source, timestamp, decode_cfg.beam_size, decode_cfg.max_new)
    }
}

/// Trains one model per configured variant from the same master seed and
/// scores all of them on the test set. Fully deterministic: two calls with
/// the same inputs produce identical reports.
pub fn run_variant_matrix(
    config: &ExperimentConfig,
    vocab: &Vocabulary,
    train_data: &[TimedSample],
    test_data: &[TimedSample],
) -> Result<MatrixReport, HarnessError> {
    if train_data.is_empty() {
        return Err(HarnessError::EmptyData("train"));
    }
    if test_data.is_empty() {
        return Err(HarnessError::EmptyData("test"));
    }
    let variants = config.parsed_variants()?;
    if variants.is_empty() {
        return Err(HarnessError::Config("no variants configured".into()));
    }
    let refs: Vec<Vec<TokenId>> = test_data.iter().map(|s| s.target.clone()).collect();
    let mut results = Vec::new();
    let mut baseline: Option<PerSampleScores> = None;
    for variant in variants {
        let label = variant.label();
        let model_config =
            config.model_config(vocab.len(), derive_seed(config.seed, &format!("init/{label}")));
        let hyper = TrainHyper {
            lr: config.train.lr,
            batch_size: config.train.batch_size,
            steps: config.train.steps,
            seed: derive_seed(config.seed, &format!("train/{label}")),
        };
        let (params, log) = train::<f64>(&model_config, variant, vocab, train_data, &hyper)?;
        let mut hyps = Vec::with_capacity(test_data.len());
        for sample in test_data {
            hyps.push(decode_one(&params, vocab, sample, sample.timestamp, &config.decode)?);
        }
        let (scores, per_sample) = score_set(&hyps, &refs)?;
        let outputs: Vec<String> = hyps
            .iter()
            .map(|h| decode(vocab, h).expect("decoded ids are in range"))
            .collect();
        let (p_rouge, p_exact) = match (&baseline, variant) {
            (_, PromptVariant::None) | (None, _) => (None, None),
            (Some(base), _) => {
                let iters = config.randomization_iters;
                let p_r = approx_randomization_test(
                    &per_sample.rouge_l,
                    &base.rouge_l,
                    iters,
                    derive_seed(config.seed, &format!("ar/rouge-l/{label}")),
                )?;
                let p_e = approx_randomization_test(
                    &per_sample.exact,
                    &base.exact,
                    iters,
                    derive_seed(config.seed, &format!("ar/exact/{label}")),
                )?;
                (Some(p_r), Some(p_e))
            }
        };
        if variant == PromptVariant::None {
            baseline = Some(per_sample.clone());
        }
        results.push(VariantResult {
            variant: label,
            final_train_loss: log.losses.last().map(|&(_, l)| l).unwrap_or(f64::NAN),
            scores,
            p_rouge_l_vs_none: p_rouge,
            p_exact_vs_none: p_exact,
            outputs,
            per_sample,
            params: Some(params),
        });
    }
    Ok(MatrixReport {
        seed: config.seed,
        n_train: train_data.len(),
        n_test: test_data.len(),
        variants: results,
    })
}

// ---------------------------------------------------------------------------
// Date-perturbation sensitivity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationRow {
    pub label: String,
    pub mean_edit_distance: f64,
    pub changed_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationSample {
    pub index: usize,
    pub timestamp: CalendarDate,
    pub baseline: String,
    /// (perturbation label, decoded output, token edit distance to baseline)
    pub cells: Vec<(String, String, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub variant: String,
    pub n_samples: usize,
    pub rows: Vec<PerturbationRow>,
    pub samples: Vec<PerturbationSample>,
}

/// Decodes each test sample at its true date and at each standard date
/// perturbation (plus an identity row), and measures how much the output
/// moves. Uses the first `min(max_samples, len)` samples.
pub fn perturbation_analysis(
    params: &ModelParameters<f64>,
    vocab: &Vocabulary,
    test_data: &[TimedSample],
    max_samples: usize,
    decode_cfg: &DecodeSection,
) -> Result<PerturbationReport, HarnessError> {
    if test_data.is_empty() {
        return Err(HarnessError::EmptyData("test"));
    }
    let n = max_samples.min(test_data.len());
    let mut labels = vec![("identity".to_string(), crate::temporal::DateShift::default())];
    labels.extend(
        standard_perturbations().into_iter().map(|(l, s)| (l.to_string(), s)),
    );
    let mut samples = Vec::with_capacity(n);
    let mut sums = vec![0.0f64; labels.len()];
    let mut changed = vec![0.0f64; labels.len()];
    for (index, sample) in test_data.iter().take(n).enumerate() {
        let base_ids = decode_one(params, vocab, sample, sample.timestamp, decode_cfg)?;
        let baseline = decode(vocab, &base_ids).expect("decoded ids are in range");
        let mut cells = Vec::with_capacity(labels.len());
        for (li, (label, shift)) in labels.iter().enumerate() {
            let ts = shift_date(sample.timestamp, *shift)?;
            let ids = decode_one(params, vocab, sample, ts, decode_cfg)?;
            let dist = token_edit_distance(&ids, &base_ids);
            sums[li] += dist as f64;
            if dist > 0 {
                changed[li] += 1.0;
            }
            let text = decode(vocab, &ids).expect("decoded ids are in range");
            cells.push((label.clone(), text, dist));
        }
        samples.push(PerturbationSample { index, timestamp: sample.timestamp, baseline, cells });
    }
    let rows = labels
        .iter()
        .enumerate()
        .map(|(li, (label, _))| PerturbationRow {
            label: label.clone(),
            mean_edit_distance: sums[li] / n as f64,
            changed_fraction: changed[li] / n as f64,
        })
        .collect();
    Ok(PerturbationReport { variant: params.variant.label(), n_samples: n, rows, samples })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// One flattened CSV row per (variant, sample, perturbation-or-test-output).
fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Writes `summary.json`, `per_sample.csv`, and `report.txt` into `dir`.
/// Output is byte-deterministic for identical inputs.
pub fn emit_report(
    dir: &Path,
    config: &ExperimentConfig,
    matrix: &MatrixReport,
    perturbations: &[PerturbationReport],
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a ExperimentConfig,
        matrix: &'a MatrixReport,
        perturbations: Vec<SummaryPerturbation<'a>>,
    }
    #[derive(Serialize)]
    struct SummaryPerturbation<'a> {
        variant: &'a str,
        n_samples: usize,
        rows: &'a [PerturbationRow],
    }
    let summary = Summary {
        config,
        matrix,
        perturbations: perturbations
            .iter()
            .map(|p| SummaryPerturbation {
                variant: &p.variant,
                n_samples: p.n_samples,
                rows: &p.rows,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(dir.join("summary.json"), json.as_bytes())?;

    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("per_sample.csv"))?);
    writeln!(csv, "variant,sample,perturbation,output,edit_distance_to_baseline")?;
    for result in &matrix.variants {
        for (i, output) in result.outputs.iter().enumerate() {
            writeln!(csv, "{},{i},test,{},", result.variant, csv_escape(output))?;
        }
    }
    for report in perturbations {
        for sample in &report.samples {
            for (label, text, dist) in &sample.cells {
                writeln!(
                    csv,
                    "{},{},{label},{},{dist}",
                    report.variant,
                    sample.index,
                    csv_escape(text)
                )?;
            }
        }
    }
    csv.flush()?;

    let mut table = String::new();
    table.push_str(&format!(
        "seed {}  train {}  test {}\n\n",
        matrix.seed, matrix.n_train, matrix.n_test
    ));
    table.push_str(&format!(
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}\n",
        "variant", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L", "TER", "exact", "p(ROUGE)", "p(exact)"
    ));
    for r in &matrix.variants {
        let fmt_p = |p: Option<f64>| p.map_or("-".to_string(), |v| format!("{v:.4}"));
        table.push_str(&format!(
            "{:<14} {:>8.2} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10} {:>10}\n",
            r.variant,
            r.scores.bleu4,
            r.scores.rouge1,
            r.scores.rouge2,
            r.scores.rouge_l,
            r.scores.ter,
            r.scores.exact_match,
            fmt_p(r.p_rouge_l_vs_none),
            fmt_p(r.p_exact_vs_none),
        ));
    }
    for report in perturbations {
        table.push_str(&format!(
            "\ndate perturbation sensitivity ({}, {} samples)\n",
            report.variant, report.n_samples
        ));
        table.push_str(&format!(
            "{:<10} {:>18} {:>10}\n",
            "shift", "mean edit distance", "changed"
        ));
        for row in &report.rows {
            table.push_str(&format!(
                "{:<10} {:>18.4} {:>10.4}\n",
                row.label, row.mean_edit_distance, row.changed_fraction
            ));
        }
    }
    std::fs::write(dir.join("report.txt"), table.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::parse_date;
    use crate::tokenizer::{build_vocab, encode};

    fn toy_setup() -> (ExperimentConfig, Vocabulary, Vec<TimedSample>, Vec<TimedSample>) {
        let texts = [
            "red green blue", "one two three", "left right up down", "cat dog bird fish",
        ];
        let vocab = build_vocab(&texts, 1).unwrap();
        let mk = |s: &str, t: &str, d: &str| TimedSample {
            source: encode(&vocab, s),
            target: encode(&vocab, t),
            timestamp: parse_date(d).unwrap(),
        };
        let train_data: Vec<TimedSample> = (0..6)
            .map(|i| {
                if i % 2 == 0 {
                    mk("red green", "blue", "2010-01-15")
                } else {
                    mk("one two", "three", "2012-06-20")
                }
            })
            .collect();
        let test = vec![mk("red green", "blue", "2011-03-03"), mk("one two", "three", "2013-09-09")];
        let mut config = ExperimentConfig {
            seed: 5,
            variants: vec!["none".into(), "enc-text".into()],
            randomization_iters: 50,
            ..Default::default()
        };
        config.model = ModelSection {
            d_model: 16, n_heads: 2, n_enc_layers: 1, n_dec_layers: 1,
            d_ff: 32, max_len: 32, dropout: 0.0,
        };
        config.train = TrainSection { lr: 3e-3, batch_size: 4, steps: 30 };
        config.decode = DecodeSection { beam_size: 1, max_new: 4 };
        config.perturb = PerturbSection { samples: 2 };
        (config, vocab, train_data, test)
    }

    #[test]
    fn matrix_is_deterministic() {
        let (config, vocab, train_data, test) = toy_setup();
        let a = run_variant_matrix(&config, &vocab, &train_data, &test).unwrap();
        let b = run_variant_matrix(&config, &vocab, &train_data, &test).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.variants.len(), 2);
        assert!(a.variants[0].p_rouge_l_vs_none.is_none());
        let p = b.variants[1].p_rouge_l_vs_none.unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn perturbation_identity_row_is_exactly_zero() {
        let (config, vocab, train_data, test) = toy_setup();
        let model_config = config.model_config(vocab.len(), 1);
        let hyper = TrainHyper { lr: 3e-3, batch_size: 4, steps: 20, seed: 2 };
        let (params, _) =
            train::<f64>(&model_config, PromptVariant::EncText { template: 2 }, &vocab, &train_data, &hyper)
                .unwrap();
        let report =
            perturbation_analysis(&params, &vocab, &test, 10, &config.decode).unwrap();
        assert_eq!(report.n_samples, 2);
        assert_eq!(report.rows[0].label, "identity");
        assert_eq!(report.rows[0].mean_edit_distance, 0.0);
        assert_eq!(report.rows[0].changed_fraction, 0.0);
        assert_eq!(report.rows.len(), 7); // identity + six standard shifts
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let (config, vocab, train_data, test) = toy_setup();
        let matrix = run_variant_matrix(&config, &vocab, &train_data, &test).unwrap();
        let model_config = config.model_config(vocab.len(), 1);
        let hyper = TrainHyper { lr: 3e-3, batch_size: 4, steps: 20, seed: 2 };
        let (params, _) =
            train::<f64>(&model_config, PromptVariant::None, &vocab, &train_data, &hyper).unwrap();
        let perturb =
            perturbation_analysis(&params, &vocab, &test, 2, &config.decode).unwrap();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        emit_report(dir1.path(), &config, &matrix, &[perturb.clone()]).unwrap();
        emit_report(dir2.path(), &config, &matrix, &[perturb]).unwrap();
        for name in ["summary.json", "per_sample.csv", "report.txt"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
        // Partial files fill in defaults.
        let partial: ExperimentConfig = toml::from_str("seed = 9\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.train.steps, 10);
        assert_eq!(partial.decode.beam_size, 4);
        // Unknown keys are rejected.
        assert!(toml::from_str::<ExperimentConfig>("nonsense = 1\n").is_err());
    }
}
