//! Hyperparameters of one self-training run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How pseudo-labeled samples are ranked and admitted into retraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Rank by scalar uncertainty (lowest kept), retrain weights 1/Var.
    Variance,
    /// Rank by mean confidence (highest kept), retrain weights all 1. This
    /// is the confidence-blind baseline.
    Confidence,
    /// Admit nothing; retraining sees only the labeled data. Budget-matched
    /// ablation arm.
    None,
}

/// How the hard label of a kept sample is produced from its soft label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardLabelMode {
    /// Draw from Categorical(mean); keeps the uncertainty encoded in the
    /// distribution.
    Sampled,
    /// Deterministic argmax; ablation flag.
    Argmax,
}

/// How latent vectors are drawn from the basis mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSampling {
    /// Ancestral: pick component k ~ Categorical(z), then add unit noise.
    Mixture,
    /// Blend the means first: sum_k z_k mu_k + noise. Comparison switch;
    /// makes the spread of the latent independent of z.
    Blended,
}

/// All knobs of one self-training run. `Default` is the configuration used
/// by the acceptance experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    /// Basis count K; `None` means two bases per class.
    pub basis_count: Option<usize>,
    /// Softmax temperature of the soft-assignment kernel.
    pub temp: f64,
    /// Mixing weight between the labeled and uncertainty terms of the head
    /// loss (1.0 = labeled only).
    pub mix_weight: f64,
    /// Weights of the reconstruction / label-gram / orthogonality terms of
    /// the basis objective.
    pub objective_weights: [f64; 3],
    /// EM iterations per round.
    pub em_iterations: usize,
    /// Monte-Carlo samples per pseudo-label distribution.
    pub mc_samples: usize,
    /// Learning rate of the pseudo-label head inside EM.
    pub head_lr: f64,
    /// Per-round fraction of each predicted class admitted into retraining;
    /// the last entry repeats when there are more rounds than entries.
    pub keep_fractions: Vec<f64>,
    /// Self-training rounds R.
    pub rounds: usize,
    /// Retraining epochs E per round.
    pub retrain_epochs: usize,
    /// Retraining learning rate.
    pub retrain_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Supervised warm-up epochs that produce the source-only model.
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    /// Gradient-descent steps refining the extracted basis.
    pub stage1_refine_steps: usize,
    pub stage1_refine_lr: f64,
    /// Floor applied to the scalar uncertainty before taking 1/Var.
    pub variance_floor: f64,
    pub selection: SelectionPolicy,
    pub hard_labels: HardLabelMode,
    pub latent_sampling: LatentSampling,
    /// Hidden layer widths of the feature extractor.
    pub hidden_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            basis_count: None,
            temp: 1.0,
            mix_weight: 0.5,
            objective_weights: [1.0, 1.0, 1.0],
            em_iterations: 10,
            mc_samples: 64,
            head_lr: 0.1,
            keep_fractions: vec![0.2, 0.4, 0.6],
            rounds: 3,
            retrain_epochs: 4,
            retrain_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 32,
            stage1_epochs: 8,
            stage1_lr: 0.05,
            stage1_refine_steps: 500,
            stage1_refine_lr: 1e-2,
            variance_floor: 1e-6,
            selection: SelectionPolicy::Variance,
            hard_labels: HardLabelMode::Sampled,
            latent_sampling: LatentSampling::Mixture,
            hidden_layers: vec![32, 32],
            seed: 0,
        }
    }
}

impl RoundConfig {
    /// Resolved basis count for a `class_count`-way problem.
    pub fn resolve_basis_count(&self, class_count: usize) -> usize {
        self.basis_count.unwrap_or(2 * class_count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.retrain_epochs < 1 {
            return Err(Error::Config("retrain_epochs must be at least 1".into()));
        }
        if self.em_iterations < 1 {
            return Err(Error::Config("em_iterations must be at least 1".into()));
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be at least 2".into()));
        }
        if !(self.temp > 0.0) {
            return Err(Error::Config(format!(
                "temp must be positive, got {}",
                self.temp
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::Config(format!(
                "mix_weight must be in [0, 1], got {}",
                self.mix_weight
            )));
        }
        if self.keep_fractions.is_empty() {
            return Err(Error::Config("keep_fractions must not be empty".into()));
        }
        for &f in &self.keep_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "keep fractions must lie in (0, 1], got {f}"
                )));
            }
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config(format!(
                "variance_floor must be positive, got {}",
                self.variance_floor
            )));
        }
        if self.objective_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(
                "objective_weights must be non-negative".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("stage1_lr", self.stage1_lr),
            ("retrain_lr", self.retrain_lr),
            ("head_lr", self.head_lr),
            ("stage1_refine_lr", self.stage1_refine_lr),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Keep fraction for 1-based round `r` (the schedule's last value
    /// repeats past its end).
    pub fn keep_fraction_for_round(&self, round: usize) -> f64 {
        debug_assert!(round >= 1);
        let idx = (round - 1).min(self.keep_fractions.len() - 1);
        self.keep_fractions[idx]
    }
}
