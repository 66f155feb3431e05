//! Experiment configuration and artifact layout.
//!
//! One `uast train` invocation runs `run_self_training` once per seed and
//! writes, under `<output_dir>/seed_<s>/`:
//!
//! - `metrics.json` — stage-1 accuracies plus one record per round
//! - `pseudo_labels_round_<r>.jsonl` — one soft pseudo-label per unlabeled
//!   sample: `{index, mean, var, uncertainty}`
//! - `selection_round_<r>.jsonl` — one line per unlabeled sample with its
//!   predicted class, score and whether it was kept
//! - `basis_round_<r>.json` — the basis handed to EM that round
//! - `checkpoint.bin` — the final model
//!
//! Every byte of these files is a pure function of (config, seed).

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use uast_core::{
    evaluate_accuracy, gen_synthetic, load_csv, load_split_csv, run_self_training,
    AccuracyReport, Dataset, MlpModel, RoundConfig, RoundMetrics, SeededRng, SelectionPolicy,
    SelfTrainingReport, SplitData, SyntheticConfig,
};

/// Where the three data splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Csv {
        labeled: PathBuf,
        unlabeled: PathBuf,
        test: PathBuf,
        /// Declared class count; required when no split carries labels.
        #[serde(default)]
        class_count: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub round: RoundConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list must not be empty");
        }
        self.round.validate()?;
        Ok(())
    }

    /// Materializes the splits for one run seed. Synthetic data draws a
    /// fresh dataset per seed (derived from the dataset seed and the run
    /// seed); CSV data is shared across seeds.
    pub fn build_data(&self, run_seed: u64) -> anyhow::Result<SplitData> {
        match &self.dataset {
            DatasetSpec::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = SeededRng::derive(spec.seed, run_seed).next_u64();
                Ok(gen_synthetic(&spec)?)
            }
            DatasetSpec::Csv {
                labeled,
                unlabeled,
                test,
                class_count,
            } => Ok(load_split_csv(labeled, unlabeled, test, *class_count)?),
        }
    }
}

/// What `metrics.json` contains.
#[derive(Debug, Clone, Serialize)]
struct MetricsFile<'a> {
    stage1: Stage1Metrics,
    rounds: Vec<&'a RoundMetrics>,
}

#[derive(Debug, Clone, Serialize)]
struct Stage1Metrics {
    source_accuracy: f64,
    target_accuracy: f64,
}

/// One line of `selection_round_<r>.jsonl`.
#[derive(Debug, Serialize)]
struct SelectionLine {
    index: usize,
    predicted_class: usize,
    uncertainty: f64,
    confidence: f64,
    kept: bool,
    hard_label: Option<usize>,
    weight: Option<f64>,
}

/// Per-seed result summary returned to the caller (and printed by the CLI).
#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub stage1_source_accuracy: f64,
    pub stage1_target_accuracy: f64,
    pub final_target_accuracy: f64,
    pub output_dir: PathBuf,
}

/// Runs every seed of the experiment (optionally on parallel threads since
/// runs share no mutable state) and writes each seed's artifacts into its
/// own subdirectory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    parallel: bool,
) -> anyhow::Result<Vec<SeedSummary>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;

    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(cfg, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        })
    } else {
        cfg.seeds.iter().map(|&seed| run_seed(cfg, seed)).collect()
    }
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<SeedSummary> {
    let data = cfg.build_data(seed)?;
    let round_cfg = RoundConfig {
        seed,
        ..cfg.round.clone()
    };
    let mut rng = SeededRng::new(seed);
    let report = run_self_training(&data, &round_cfg, &mut rng)?;

    let dir = cfg.output_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_artifacts(&dir, &report)?;

    log::info!(
        "seed {seed}: stage1 target {:.4} -> final {:.4}",
        report.stage1_target_accuracy,
        report.final_target_accuracy()
    );
    Ok(SeedSummary {
        seed,
        stage1_source_accuracy: report.stage1_source_accuracy,
        stage1_target_accuracy: report.stage1_target_accuracy,
        final_target_accuracy: report.final_target_accuracy(),
        output_dir: dir,
    })
}

fn write_artifacts(dir: &Path, report: &SelfTrainingReport) -> anyhow::Result<()> {
    let metrics = MetricsFile {
        stage1: Stage1Metrics {
            source_accuracy: report.stage1_source_accuracy,
            target_accuracy: report.stage1_target_accuracy,
        },
        rounds: report.rounds.iter().map(|r| &r.metrics).collect(),
    };
    write_file(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?.as_bytes(),
    )?;

    for record in &report.rounds {
        let round = record.metrics.round;

        let mut dump = Vec::new();
        for label in &record.pseudo_labels {
            serde_json::to_writer(&mut dump, label)?;
            dump.push(b'\n');
        }
        write_file(&dir.join(format!("pseudo_labels_round_{round}.jsonl")), &dump)?;

        let kept: std::collections::BTreeMap<usize, (usize, f64)> = record
            .selection
            .kept
            .iter()
            .map(|k| (k.index, (k.label, k.weight)))
            .collect();
        let mut dump = Vec::new();
        for label in &record.pseudo_labels {
            let entry = kept.get(&label.sample_index);
            let line = SelectionLine {
                index: label.sample_index,
                predicted_class: label.predicted_class(),
                uncertainty: label.uncertainty,
                confidence: label.confidence(),
                kept: entry.is_some(),
                hard_label: entry.map(|(l, _)| *l),
                weight: entry.map(|(_, w)| *w),
            };
            serde_json::to_writer(&mut dump, &line)?;
            dump.push(b'\n');
        }
        write_file(&dir.join(format!("selection_round_{round}.jsonl")), &dump)?;

        write_file(
            &dir.join(format!("basis_round_{round}.json")),
            record.basis_init.to_json().as_bytes(),
        )?;
    }

    report.final_model.save(&dir.join("checkpoint.bin"))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    file.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads a checkpoint and a CSV split, evaluates per-class accuracy. The
/// class count comes from the checkpoint head; labels outside it are a
/// consistency error, as is a feature-dimension mismatch.
pub fn eval_report(checkpoint: &Path, data: &Path) -> anyhow::Result<AccuracyReport> {
    let model = MlpModel::load(checkpoint)?;
    let file = load_csv(data)?;
    let dataset = Dataset::new(file.features, file.labels, model.class_count())
        .context("csv labels are inconsistent with the checkpoint's class count")?;
    Ok(evaluate_accuracy(&model, &dataset)?)
}

/// Selection-policy override from the command line.
pub fn parse_policy(name: &str) -> anyhow::Result<SelectionPolicy> {
    match name {
        "variance" => Ok(SelectionPolicy::Variance),
        "confidence" => Ok(SelectionPolicy::Confidence),
        "none" => Ok(SelectionPolicy::None),
        other => bail!("unknown selection policy `{other}` (expected variance|confidence|none)"),
    }
}
