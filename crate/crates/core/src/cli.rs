//! Command-line interface. Subcommands cover the full pipeline: corpus
//! construction, synthetic task generation, training, scoring, perturbation
//! analysis, and the full variant matrix. Diagnostics go to stderr; data
//! and reports go to files or stdout.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use crate::corpus::{build_corpus, read_subject_dir, SplitOptions, DEFAULT_INTERVAL_HIGH,
                    DEFAULT_INTERVAL_LOW, DEFAULT_SKIP_FIRST};
use crate::data::{read_records, write_records, CorpusRecord};
use crate::harness::{emit_report, perturbation_analysis, run_variant_matrix, score_set,
                     ExperimentConfig};
use crate::model::{load_checkpoint, save_checkpoint, train, PromptVariant, TimedSample,
                   TrainHyper};
use crate::seeds::derive_seed;
use crate::synthtask::{generate, SynthKind, SynthSpec};
use crate::temporal::parse_date;
use crate::tokenizer::{build_vocab, Vocabulary};

#[derive(Parser, Debug)]
#[command(name = "timeprompt", version, about = "Time-aware prompts for seq2seq generation")]
pub struct Cli {
    /// Master seed; overrides the seed in the experiment config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build train/dev/test splits from a directory of revision histories.
    CorpusBuild {
        /// Directory of per-subject JSONL revision files.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the split JSONL files and manifest.
        #[arg(long)]
        output: PathBuf,
        /// Time-split cutoff date (YYYY-MM-DD).
        #[arg(long)]
        cutoff: Option<String>,
        /// Downsample the same-time test split like the future split.
        #[arg(long)]
        downsample_test_same: bool,
    },
    /// Generate a synthetic timestamp-dependent task.
    SynthGen {
        /// Task name: "month" or "age".
        #[arg(long)]
        task: String,
        #[arg(long)]
        count: usize,
        /// Output JSONL file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one prompt variant and write a checkpoint.
    Train {
        /// Training data (JSONL).
        #[arg(long)]
        train: PathBuf,
        /// Prompt variant, e.g. "none", "enc-text:2", "dec-linear".
        #[arg(long)]
        variant: String,
        /// Checkpoint output path.
        #[arg(long)]
        output: PathBuf,
        /// Minimum token frequency for the vocabulary.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
    },
    /// Score a checkpoint on a test set; prints metrics as JSON.
    Score {
        #[arg(long)]
        model: PathBuf,
        /// Test data (JSONL).
        #[arg(long)]
        test: PathBuf,
    },
    /// Date-perturbation sensitivity analysis; prints a report as JSON.
    Perturb {
        #[arg(long)]
        model: PathBuf,
        /// Test data (JSONL).
        #[arg(long)]
        test: PathBuf,
        /// Cap on the number of test samples analyzed.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train and score every configured variant; writes a report directory.
    Matrix {
        /// Training data (JSONL).
        #[arg(long)]
        train: PathBuf,
        /// Test data (JSONL).
        #[arg(long)]
        test: PathBuf,
        /// Report output directory.
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_samples(path: &Path, vocab: &Vocabulary) -> anyhow::Result<Vec<TimedSample>> {
    let records = read_records(path)?;
    records
        .iter()
        .map(|r| TimedSample::from_record(r, vocab).map_err(Into::into))
        .collect()
}

/// Vocabulary over the sources and targets of a training set.
fn vocab_from_records(records: &[CorpusRecord], min_count: usize) -> anyhow::Result<Vocabulary> {
    let texts: Vec<&str> = records
        .iter()
        .flat_map(|r| [r.source.as_str(), r.target.as_str()])
        .collect();
    Ok(build_vocab(&texts, min_count)?)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::CorpusBuild { input, output, cutoff, downsample_test_same } => {
            let mut opts = SplitOptions { seed: config.seed, downsample_test_same, ..Default::default() };
            if let Some(cutoff) = cutoff {
                opts.cutoff = parse_date(&cutoff)?;
            }
            let subjects = read_subject_dir(&input)?;
            let built = build_corpus(
                &subjects,
                DEFAULT_INTERVAL_LOW,
                DEFAULT_INTERVAL_HIGH,
                DEFAULT_SKIP_FIRST,
                &opts,
            )?;
            std::fs::create_dir_all(&output)?;
            write_records(&output.join("train.jsonl"), &built.train)?;
            write_records(&output.join("dev.jsonl"), &built.dev)?;
            write_records(&output.join("test_same_time.jsonl"), &built.test_same_time)?;
            write_records(&output.join("test_future.jsonl"), &built.test_future)?;
            std::fs::write(
                output.join("manifest.json"),
                serde_json::to_string_pretty(&built.manifest)?,
            )?;
            eprintln!(
                "corpus: {} train / {} dev / {} test-same / {} test-future records; \
                 mean {:.1} attributes, {:.1} lead words",
                built.train.len(),
                built.dev.len(),
                built.test_same_time.len(),
                built.test_future.len(),
                built.stats.0,
                built.stats.1,
            );
        }
        Command::SynthGen { task, count, output } => {
            let kind = match task.as_str() {
                "month" => SynthKind::MonthResolution,
                "age" => SynthKind::Age,
                other => bail!("unknown task {other:?} (expected \"month\" or \"age\")"),
            };
            let spec = SynthSpec::new(kind, count, config.seed);
            let records = generate(&spec)?;
            write_records(&output, &records)?;
            eprintln!("wrote {} {task} records to {}", records.len(), output.display());
        }
        Command::Train { train: train_path, variant, output, min_count } => {
            let variant = PromptVariant::parse(&variant).map_err(anyhow::Error::msg)?;
            let records = read_records(&train_path)?;
            let vocab = vocab_from_records(&records, min_count)?;
            let samples: Vec<TimedSample> = records
                .iter()
                .map(|r| TimedSample::from_record(r, &vocab))
                .collect::<Result<_, _>>()?;
            let label = variant.label();
            let model_config = config
                .model_config(vocab.len(), derive_seed(config.seed, &format!("init/{label}")));
            let hyper = TrainHyper {
                lr: config.train.lr,
                batch_size: config.train.batch_size,
                steps: config.train.steps,
                seed: derive_seed(config.seed, &format!("train/{label}")),
            };
            let (params, log) = train::<f64>(&model_config, variant, &vocab, &samples, &hyper)?;
            save_checkpoint(&output, &params, &vocab)?;
            let final_loss = log.losses.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
            eprintln!(
                "trained {label} for {} steps (final loss {final_loss:.4}); checkpoint at {}",
                config.train.steps,
                output.display()
            );
        }
        Command::Score { model, test } => {
            let (params, vocab) = load_checkpoint::<f64>(&model)?;
            let samples = load_samples(&test, &vocab)?;
            let refs: Vec<Vec<_>> = samples.iter().map(|s| s.target.clone()).collect();
            let mut hyps = Vec::with_capacity(samples.len());
            for sample in &samples {
                hyps.push(crate::model::decode_beam(
                    &params,
                    &vocab,
                    &sample.source,
                    sample.timestamp,
                    config.decode.beam_size,
                    config.decode.max_new,
                )?);
            }
            let (scores, _) = score_set(&hyps, &refs)?;
            println!("{}", serde_json::to_string_pretty(&scores)?);
        }
        Command::Perturb { model, test, samples: max_samples } => {
            let (params, vocab) = load_checkpoint::<f64>(&model)?;
            let samples = load_samples(&test, &vocab)?;
            let cap = max_samples.unwrap_or(config.perturb.samples);
            let report = perturbation_analysis(&params, &vocab, &samples, cap, &config.decode)?;
            #[derive(serde::Serialize)]
            struct Out<'a> {
                variant: &'a str,
                n_samples: usize,
                rows: &'a [crate::harness::PerturbationRow],
            }
            let out = Out { variant: &report.variant, n_samples: report.n_samples, rows: &report.rows };
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Matrix { train: train_path, test, output } => {
            let train_records = read_records(&train_path)?;
            let vocab = vocab_from_records(&train_records, 1)?;
            let train_samples: Vec<TimedSample> = train_records
                .iter()
                .map(|r| TimedSample::from_record(r, &vocab))
                .collect::<Result<_, _>>()?;
            let test_samples = load_samples(&test, &vocab)?;
            let matrix = run_variant_matrix(&config, &vocab, &train_samples, &test_samples)?;
            let mut perturbations = Vec::new();
            for result in &matrix.variants {
                let params = result.params.as_ref().expect("matrix keeps trained models");
                perturbations.push(perturbation_analysis(
                    params,
                    &vocab,
                    &test_samples,
                    config.perturb.samples,
                    &config.decode,
                )?);
            }
            emit_report(&output, &config, &matrix, &perturbations)?;
            eprintln!("report written to {}", output.display());
        }
    }
    Ok(())
}
