//! One self-training round and the multi-round driver: variance-ranked
//! class-dependent selection, hard-label sampling from the pseudo-label
//! distributions, and uncertainty-weighted retraining.

use serde::Serialize;

use crate::basis::{train_stage1, BasisSet, Stage1Result};
use crate::config::{HardLabelMode, RoundConfig, SelectionPolicy};
use crate::data::{Dataset, SplitData};
use crate::em::{run_em, LinearHead, SoftPseudoLabel};
use crate::error::{Error, Result};
use crate::model::{evaluate_accuracy, LossSpec, MlpModel, Sgd};
use crate::numerics::{DataMatrix, SeededRng};

/// A pseudo-labeled sample admitted into retraining.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeptSample {
    /// Index into the unlabeled split.
    pub index: usize,
    /// Hard label entering retraining.
    pub label: usize,
    /// Retraining weight before batch normalization.
    pub weight: f64,
}

/// Outcome of class-dependent selection over one round's pseudo-labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub kept: Vec<KeptSample>,
    pub discarded: Vec<usize>,
    /// Fraction actually kept per predicted class (0 for empty groups).
    pub keep_fraction_used: Vec<f64>,
}

impl SelectionResult {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.kept.iter().map(|k| k.index).collect()
    }
}

/// Groups pseudo-labels by predicted class and keeps the best
/// `ceil(fraction * group)` of each group: lowest scalar uncertainty under
/// the variance policy, highest mean confidence under the confidence
/// baseline. Hard labels are drawn from Categorical(mean) (or argmax under
/// the ablation flag); variance-policy weights are `1 / max(uncertainty,
/// variance_floor)`, baseline weights are 1. The `none` policy keeps
/// nothing.
pub fn select_samples(
    labels: &[SoftPseudoLabel],
    keep_fraction: f64,
    cfg: &RoundConfig,
    rng: &mut SeededRng,
) -> Result<SelectionResult> {
    if labels.is_empty() {
        return Err(Error::Contract(
            "select_samples needs at least one pseudo-label".into(),
        ));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Parameter {
            name: "keep_fraction",
            detail: format!("must lie in (0, 1], got {keep_fraction}"),
        });
    }
    let class_count = labels[0].mean.len();

    if cfg.selection == SelectionPolicy::None {
        let mut discarded: Vec<usize> = labels.iter().map(|l| l.sample_index).collect();
        discarded.sort_unstable();
        return Ok(SelectionResult {
            kept: Vec::new(),
            discarded,
            keep_fraction_used: vec![0.0; class_count],
        });
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (pos, label) in labels.iter().enumerate() {
        groups[label.predicted_class()].push(pos);
    }

    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    let mut keep_fraction_used = vec![0.0; class_count];
    for (class, group) in groups.iter().enumerate() {
        if group.is_empty() {
            log::debug!("select_samples: no samples predicted as class {class}; group skipped");
            continue;
        }
        let mut order = group.clone();
        match cfg.selection {
            SelectionPolicy::Variance => order.sort_by(|&a, &b| {
                labels[a]
                    .uncertainty
                    .total_cmp(&labels[b].uncertainty)
                    .then(labels[a].sample_index.cmp(&labels[b].sample_index))
            }),
            SelectionPolicy::Confidence => order.sort_by(|&a, &b| {
                labels[b]
                    .confidence()
                    .total_cmp(&labels[a].confidence())
                    .then(labels[a].sample_index.cmp(&labels[b].sample_index))
            }),
            SelectionPolicy::None => unreachable!(),
        }
        let keep_n = ((keep_fraction * group.len() as f64).ceil() as usize).min(group.len());
        for (rank, &pos) in order.iter().enumerate() {
            let label = &labels[pos];
            if rank < keep_n {
                let hard = match cfg.hard_labels {
                    HardLabelMode::Sampled => rng.categorical(&label.mean),
                    HardLabelMode::Argmax => label.predicted_class(),
                };
                let weight = match cfg.selection {
                    SelectionPolicy::Variance => {
                        1.0 / label.uncertainty.max(cfg.variance_floor)
                    }
                    _ => 1.0,
                };
                kept.push(KeptSample {
                    index: label.sample_index,
                    label: hard,
                    weight,
                });
            } else {
                discarded.push(label.sample_index);
            }
        }
        keep_fraction_used[class] = keep_n as f64 / group.len() as f64;
    }
    kept.sort_by_key(|k| k.index);
    discarded.sort_unstable();
    Ok(SelectionResult {
        kept,
        discarded,
        keep_fraction_used,
    })
}

/// Checks the rank-consistency invariant of a selection against the
/// pseudo-labels it was computed from: per predicted class, every kept
/// sample must rank at least as well as every discarded one under the
/// policy's score.
pub fn rank_consistency_ok(
    labels: &[SoftPseudoLabel],
    selection: &SelectionResult,
    policy: SelectionPolicy,
) -> bool {
    if policy == SelectionPolicy::None {
        return selection.kept.is_empty();
    }
    let class_count = labels.first().map_or(0, |l| l.mean.len());
    let kept: std::collections::BTreeSet<usize> = selection.kept_indices().into_iter().collect();
    for class in 0..class_count {
        let mut worst_kept = f64::NEG_INFINITY;
        let mut best_discarded = f64::INFINITY;
        for label in labels.iter().filter(|l| l.predicted_class() == class) {
            // Lower score = better under both policies.
            let score = match policy {
                SelectionPolicy::Variance => label.uncertainty,
                SelectionPolicy::Confidence => -label.confidence(),
                SelectionPolicy::None => unreachable!(),
            };
            if kept.contains(&label.sample_index) {
                worst_kept = worst_kept.max(score);
            } else {
                best_discarded = best_discarded.min(score);
            }
        }
        if worst_kept > best_discarded {
            return false;
        }
    }
    true
}

/// Retrains the model for `retrain_epochs` epochs of weighted SGD on the
/// union of the labeled data (weight 1) and the selected pseudo-labeled
/// rows, whose 1/Var weights are normalized to mean 1 over the selected
/// batch. Returns the updated model and the per-epoch mean batch loss.
pub fn retrain(
    model: &MlpModel,
    labeled: &Dataset,
    selected: &SelectionResult,
    unlabeled_features: &Dataset,
    cfg: &RoundConfig,
    rng: &mut SeededRng,
) -> Result<(MlpModel, Vec<f64>)> {
    let labeled_rows = labeled.labeled_indices();
    if labeled_rows.is_empty() {
        return Err(Error::Config("retraining needs labeled data".into()));
    }
    for k in &selected.kept {
        if k.index >= unlabeled_features.len() {
            return Err(Error::Contract(format!(
                "selected index {} outside the unlabeled split of {} rows",
                k.index,
                unlabeled_features.len()
            )));
        }
    }

    let mut features = labeled.features.select_rows(&labeled_rows)?;
    let mut labels: Vec<Option<usize>> = labeled_rows.iter().map(|&i| labeled.labels[i]).collect();
    let mut weights: Vec<f64> = vec![1.0; labeled_rows.len()];
    if !selected.kept.is_empty() {
        let kept_rows: Vec<usize> = selected.kept.iter().map(|k| k.index).collect();
        features = features.vstack(&unlabeled_features.features.select_rows(&kept_rows)?)?;
        let total: f64 = selected.kept.iter().map(|k| k.weight).sum();
        let scale = selected.kept.len() as f64 / total;
        for k in &selected.kept {
            labels.push(Some(k.label));
            weights.push(k.weight * scale);
        }
    }

    let mut model = model.clone();
    let mut optimizer = Sgd::new(cfg.retrain_lr, cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.retrain_epochs);
    for _ in 0..cfg.retrain_epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_x = features.select_rows(chunk)?;
            let batch_y: Vec<_> = chunk.iter().map(|&i| labels[i]).collect();
            let batch_w: Vec<_> = chunk.iter().map(|&i| weights[i]).collect();
            let (loss, grads) = model.backward(
                &batch_x,
                &LossSpec::WeightedNll {
                    labels: &batch_y,
                    weights: &batch_w,
                },
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "retraining loss; round aborted".into(),
                });
            }
            optimizer.step(&mut model, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
    }
    Ok((model, loss_curve))
}

/// Per-round summary written to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub target_accuracy: f64,
    pub source_accuracy: f64,
    /// Kept counts by predicted class.
    pub kept_count_per_class: Vec<usize>,
    pub mean_uncertainty_kept: f64,
    pub mean_uncertainty_discarded: f64,
    /// Mean batch loss per retraining epoch.
    pub loss_curve: Vec<f64>,
}

/// Everything one round produces.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub model: MlpModel,
    pub em_basis: BasisSet,
    pub pseudo_labels: Vec<SoftPseudoLabel>,
    pub selection: SelectionResult,
    pub metrics: RoundMetrics,
}

/// One self-training round: EM pseudo-label generation in the current
/// feature space, class-dependent selection, weighted retraining, metric
/// collection. `round` is 1-based and picks the keep fraction.
pub fn run_round(
    model: &MlpModel,
    basis: &BasisSet,
    data: &SplitData,
    cfg: &RoundConfig,
    rng: &mut SeededRng,
    round: usize,
) -> Result<RoundOutcome> {
    let stacked = data.source.features.vstack(&data.target.features)?;
    let features = model.forward(&stacked)?.features;
    let mut labels = data.source.labels.clone();
    labels.extend(std::iter::repeat(None).take(data.target.len()));
    let em_data = Dataset::new(features, labels, data.source.class_count)?;

    // The extracted basis lives on the unit feature scale; EM wants it at
    // the raw scale of the current feature space.
    let source_rows: Vec<usize> = (0..data.source.len()).collect();
    let scale = crate::basis::feature_scale(&em_data.features.select_rows(&source_rows)?);
    let em_init = BasisSet::new(basis.mu().scale(scale))?;

    let head = LinearHead::from_layer(model.head());
    let (em_state, pseudo_labels) = run_em(&em_data, &em_init, &head, cfg, rng)?;

    let keep_fraction = cfg.keep_fraction_for_round(round);
    let selection = select_samples(&pseudo_labels, keep_fraction, cfg, rng)?;

    let (retrained, loss_curve) =
        retrain(model, &data.source, &selection, &data.target, cfg, rng)?;

    let kept_set: std::collections::BTreeSet<usize> =
        selection.kept_indices().into_iter().collect();
    let mut kept_count_per_class = vec![0usize; data.source.class_count];
    let (mut kept_unc, mut disc_unc) = (0.0f64, 0.0f64);
    let (mut kept_n, mut disc_n) = (0usize, 0usize);
    for label in &pseudo_labels {
        if kept_set.contains(&label.sample_index) {
            kept_count_per_class[label.predicted_class()] += 1;
            kept_unc += label.uncertainty;
            kept_n += 1;
        } else {
            disc_unc += label.uncertainty;
            disc_n += 1;
        }
    }

    let metrics = RoundMetrics {
        round,
        target_accuracy: evaluate_accuracy(&retrained, &data.test)?.mean_class_accuracy,
        source_accuracy: evaluate_accuracy(&retrained, &data.source)?.mean_class_accuracy,
        kept_count_per_class,
        mean_uncertainty_kept: if kept_n > 0 { kept_unc / kept_n as f64 } else { 0.0 },
        mean_uncertainty_discarded: if disc_n > 0 { disc_unc / disc_n as f64 } else { 0.0 },
        loss_curve,
    };
    log::info!(
        "round {round}: target acc {:.4}, source acc {:.4}, kept {}",
        metrics.target_accuracy,
        metrics.source_accuracy,
        kept_n
    );

    Ok(RoundOutcome {
        model: retrained,
        em_basis: em_state.basis,
        pseudo_labels,
        selection,
        metrics,
    })
}

/// One round's artifacts inside a full run report.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub metrics: RoundMetrics,
    pub pseudo_labels: Vec<SoftPseudoLabel>,
    pub selection: SelectionResult,
    /// The basis handed to EM at the start of the round.
    pub basis_init: BasisSet,
}

/// Full run report: the source-only stage-1 numbers, every round's
/// artifacts, and the final model.
#[derive(Debug, Clone)]
pub struct SelfTrainingReport {
    pub stage1_source_accuracy: f64,
    pub stage1_target_accuracy: f64,
    pub init_ortho: f64,
    pub refined_ortho: f64,
    pub rounds: Vec<RoundRecord>,
    pub final_model: MlpModel,
}

impl SelfTrainingReport {
    pub fn final_target_accuracy(&self) -> f64 {
        self.rounds
            .last()
            .map_or(self.stage1_target_accuracy, |r| r.metrics.target_accuracy)
    }
}

/// The whole pipeline: stage-1 training on the labeled source, then
/// `cfg.rounds` self-training rounds under the keep-fraction schedule. The
/// basis for each later round is re-extracted by refining the stage-1
/// projection block against the current model's features.
pub fn run_self_training(
    data: &SplitData,
    cfg: &RoundConfig,
    rng: &mut SeededRng,
) -> Result<SelfTrainingReport> {
    cfg.validate()?;
    if data.source.class_count != data.target.class_count
        || data.source.class_count != data.test.class_count
    {
        return Err(Error::Config("splits disagree on class_count".into()));
    }

    let Stage1Result {
        model,
        att_weights,
        basis,
        init_ortho,
        refined_ortho,
        ..
    } = train_stage1(&data.source, cfg, rng)?;

    let stage1_source_accuracy = evaluate_accuracy(&model, &data.source)?.mean_class_accuracy;
    let stage1_target_accuracy = evaluate_accuracy(&model, &data.test)?.mean_class_accuracy;
    log::info!(
        "stage1: source acc {stage1_source_accuracy:.4}, target acc {stage1_target_accuracy:.4}"
    );

    let mut model = model;
    let mut basis = basis;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let mut round_rng = SeededRng::new(rng.next_u64());
        let outcome = run_round(&model, &basis, data, cfg, &mut round_rng, round)?;
        model = outcome.model;
        rounds.push(RoundRecord {
            metrics: outcome.metrics,
            pseudo_labels: outcome.pseudo_labels,
            selection: outcome.selection,
            basis_init: basis.clone(),
        });
        if round < cfg.rounds {
            basis = reextract_basis(&model, &att_weights, &data.source, cfg)?;
        }
    }

    Ok(SelfTrainingReport {
        stage1_source_accuracy,
        stage1_target_accuracy,
        init_ortho,
        refined_ortho,
        rounds,
        final_model: model,
    })
}

/// Refines the stage-1 projection block against the current model's feature
/// space to produce the next round's initial basis.
fn reextract_basis(
    model: &MlpModel,
    att_weights: &DataMatrix,
    source: &Dataset,
    cfg: &RoundConfig,
) -> Result<BasisSet> {
    let labeled = source.labeled_indices();
    let x = source.features.select_rows(&labeled)?;
    let features = model.forward(&x)?.features;
    let onehot = source.onehot_labels(&labeled)?;
    Ok(crate::basis::refine_from_features(&features, &onehot, att_weights, cfg)?.basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LatentSampling;
    use crate::data::{gen_synthetic, Shift, SyntheticConfig, SyntheticKind};

    fn label(index: usize, mean: Vec<f64>, uncertainty: f64) -> SoftPseudoLabel {
        let c = mean.len();
        SoftPseudoLabel {
            sample_index: index,
            mean,
            var: vec![uncertainty / c as f64; c],
            uncertainty,
        }
    }

    #[test]
    fn fraction_one_keeps_everything() {
        let labels = vec![
            label(0, vec![0.9, 0.1], 0.3),
            label(1, vec![0.2, 0.8], 0.1),
            label(2, vec![0.7, 0.3], 0.9),
        ];
        let cfg = RoundConfig::default();
        let mut rng = SeededRng::new(0);
        let sel = select_samples(&labels, 1.0, &cfg, &mut rng).unwrap();
        assert_eq!(sel.kept.len(), 3);
        assert!(sel.discarded.is_empty());
        assert!(rank_consistency_ok(&labels, &sel, cfg.selection));
    }

    #[test]
    fn lower_uncertainty_wins_within_a_class() {
        let labels = vec![
            label(0, vec![0.9, 0.1], 0.9),
            label(1, vec![0.8, 0.2], 0.1),
        ];
        let cfg = RoundConfig::default();
        let mut rng = SeededRng::new(0);
        let sel = select_samples(&labels, 0.5, &cfg, &mut rng).unwrap();
        assert_eq!(sel.kept.len(), 1);
        assert_eq!(sel.kept[0].index, 1);
        assert_eq!(sel.discarded, vec![0]);
    }

    #[test]
    fn selection_matches_exhaustive_ranking_oracle() {
        let mut rng = SeededRng::new(77);
        let mut labels = Vec::new();
        for i in 0..10 {
            let p = 0.55 + 0.4 * rng.uniform();
            let mean = if i % 2 == 0 {
                vec![p, 1.0 - p]
            } else {
                vec![1.0 - p, p]
            };
            labels.push(label(i, mean, 0.05 + rng.uniform()));
        }
        let cfg = RoundConfig {
            hard_labels: HardLabelMode::Argmax,
            ..RoundConfig::default()
        };
        let sel = select_samples(&labels, 0.4, &cfg, &mut SeededRng::new(1)).unwrap();

        // Sort-based brute force per class.
        let mut expected_kept = Vec::new();
        for class in 0..2 {
            let mut group: Vec<&SoftPseudoLabel> = labels
                .iter()
                .filter(|l| l.predicted_class() == class)
                .collect();
            group.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty));
            let keep_n = (0.4f64 * group.len() as f64).ceil() as usize;
            expected_kept.extend(group[..keep_n].iter().map(|l| l.sample_index));
        }
        expected_kept.sort_unstable();
        assert_eq!(sel.kept_indices(), expected_kept);
        assert!(rank_consistency_ok(&labels, &sel, cfg.selection));
        // ceil(0.4 * 5) = 2 per class.
        assert_eq!(sel.kept.len(), 4);
    }

    #[test]
    fn empty_class_group_is_skipped() {
        let labels = vec![
            label(0, vec![0.9, 0.1], 0.2),
            label(1, vec![0.8, 0.2], 0.4),
        ];
        let cfg = RoundConfig::default();
        let sel = select_samples(&labels, 0.5, &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(sel.keep_fraction_used[1], 0.0);
        assert_eq!(sel.kept.len(), 1);
    }

    #[test]
    fn variance_weights_follow_the_inverse_rule() {
        let labels = vec![
            label(0, vec![0.9, 0.1], 0.1),
            label(1, vec![0.9, 0.1], 0.4),
        ];
        let cfg = RoundConfig::default();
        let sel = select_samples(&labels, 1.0, &cfg, &mut SeededRng::new(0)).unwrap();
        // Var ratio 1:4 gives weight ratio 4:1 before normalization.
        let w0 = sel.kept.iter().find(|k| k.index == 0).unwrap().weight;
        let w1 = sel.kept.iter().find(|k| k.index == 1).unwrap().weight;
        assert!((w0 / w1 - 4.0).abs() < 1e-12);
        // Floor bounds the weight for vanishing variance.
        let tiny = vec![label(0, vec![0.9, 0.1], 0.0)];
        let sel = select_samples(&tiny, 1.0, &cfg, &mut SeededRng::new(0)).unwrap();
        assert!(sel.kept[0].weight <= 1.0 / cfg.variance_floor);
        assert!(sel.kept[0].weight.is_finite() && sel.kept[0].weight > 0.0);
    }

    #[test]
    fn none_policy_discards_everything() {
        let labels = vec![label(0, vec![0.9, 0.1], 0.2)];
        let cfg = RoundConfig {
            selection: SelectionPolicy::None,
            ..RoundConfig::default()
        };
        let sel = select_samples(&labels, 0.5, &cfg, &mut SeededRng::new(0)).unwrap();
        assert!(sel.kept.is_empty());
        assert_eq!(sel.discarded, vec![0]);
        assert!(rank_consistency_ok(&labels, &sel, cfg.selection));
    }

    #[test]
    fn confidence_policy_keeps_most_confident_with_unit_weights() {
        let labels = vec![
            label(0, vec![0.6, 0.4], 0.01),
            label(1, vec![0.99, 0.01], 0.5),
        ];
        let cfg = RoundConfig {
            selection: SelectionPolicy::Confidence,
            ..RoundConfig::default()
        };
        let sel = select_samples(&labels, 0.5, &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(sel.kept.len(), 1);
        assert_eq!(sel.kept[0].index, 1);
        assert_eq!(sel.kept[0].weight, 1.0);
        assert!(rank_consistency_ok(&labels, &sel, SelectionPolicy::Confidence));
    }

    fn toy_split(seed: u64) -> SplitData {
        gen_synthetic(&SyntheticConfig {
            kind: SyntheticKind::TwoMoons,
            n_source: 40,
            n_target: 40,
            n_test: Some(40),
            shift: Shift::RotationDegrees(30.0),
            noise: 0.1,
            dims: None,
            seed,
        })
        .unwrap()
    }

    fn fast_cfg() -> RoundConfig {
        RoundConfig {
            stage1_epochs: 10,
            stage1_refine_steps: 100,
            em_iterations: 2,
            mc_samples: 8,
            rounds: 1,
            retrain_epochs: 1,
            hidden_layers: vec![8, 8],
            ..RoundConfig::default()
        }
    }

    #[test]
    fn retrain_with_empty_selection_matches_supervised_fine_tuning() {
        let data = toy_split(3);
        let mut rng = SeededRng::new(1);
        let cfg = fast_cfg();
        let model = MlpModel::new(2, &cfg.hidden_layers, 2, &mut rng);

        let empty = SelectionResult {
            kept: Vec::new(),
            discarded: (0..data.target.len()).collect(),
            keep_fraction_used: vec![0.0, 0.0],
        };
        let (retrained, _) = retrain(
            &model,
            &data.source,
            &empty,
            &data.target,
            &cfg,
            &mut SeededRng::new(7),
        )
        .unwrap();

        // Reference: a plain supervised loop with the same stream.
        let mut reference = model.clone();
        let mut opt = Sgd::new(cfg.retrain_lr, cfg.momentum, cfg.weight_decay).unwrap();
        let mut rng = SeededRng::new(7);
        let mut order: Vec<usize> = (0..data.source.len()).collect();
        for _ in 0..cfg.retrain_epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let x = data.source.features.select_rows(chunk).unwrap();
                let y: Vec<_> = chunk.iter().map(|&i| data.source.labels[i]).collect();
                let w = vec![1.0; chunk.len()];
                let (_, grads) = reference
                    .backward(&x, &LossSpec::WeightedNll { labels: &y, weights: &w })
                    .unwrap();
                opt.step(&mut reference, &grads).unwrap();
            }
        }
        assert_eq!(retrained, reference);
    }

    #[test]
    fn equal_variances_normalize_to_unit_weights() {
        let data = toy_split(4);
        let cfg = fast_cfg();
        let mut rng = SeededRng::new(2);
        let model = MlpModel::new(2, &cfg.hidden_layers, 2, &mut rng);
        // Two kept samples with identical raw weights: after mean-1
        // normalization both are exactly 1, so the run must equal one with
        // the weights literally set to 1.
        let sel_a = SelectionResult {
            kept: vec![
                KeptSample { index: 0, label: 0, weight: 17.0 },
                KeptSample { index: 1, label: 1, weight: 17.0 },
            ],
            discarded: (2..data.target.len()).collect(),
            keep_fraction_used: vec![0.5, 0.5],
        };
        let sel_b = SelectionResult {
            kept: vec![
                KeptSample { index: 0, label: 0, weight: 1.0 },
                KeptSample { index: 1, label: 1, weight: 1.0 },
            ],
            ..sel_a.clone()
        };
        let (a, _) = retrain(&model, &data.source, &sel_a, &data.target, &cfg, &mut SeededRng::new(5)).unwrap();
        let (b, _) = retrain(&model, &data.source, &sel_b, &data.target, &cfg, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_round_smoke_emits_all_metric_fields() {
        let data = toy_split(5);
        let cfg = RoundConfig {
            em_iterations: 1,
            retrain_epochs: 1,
            ..fast_cfg()
        };
        let mut rng = SeededRng::new(11);
        let stage1 = train_stage1(&data.source, &cfg, &mut rng).unwrap();
        let outcome = run_round(
            &stage1.model,
            &stage1.basis,
            &data,
            &cfg,
            &mut SeededRng::new(12),
            1,
        )
        .unwrap();
        let m = &outcome.metrics;
        assert_eq!(m.round, 1);
        assert!(m.target_accuracy >= 0.0 && m.target_accuracy <= 1.0);
        assert!(m.source_accuracy >= 0.0 && m.source_accuracy <= 1.0);
        assert_eq!(m.kept_count_per_class.len(), 2);
        assert_eq!(m.loss_curve.len(), 1);
        assert!(m.mean_uncertainty_kept.is_finite());
        assert!(m.mean_uncertainty_discarded.is_finite());
        let text = serde_json::to_string(m).unwrap();
        for field in [
            "round",
            "target_accuracy",
            "source_accuracy",
            "kept_count_per_class",
            "mean_uncertainty_kept",
            "mean_uncertainty_discarded",
            "loss_curve",
        ] {
            assert!(text.contains(field), "missing {field} in {text}");
        }
    }

    #[test]
    fn run_round_is_deterministic() {
        let data = toy_split(6);
        let cfg = fast_cfg();
        let mut rng = SeededRng::new(21);
        let stage1 = train_stage1(&data.source, &cfg, &mut rng).unwrap();
        let a = run_round(&stage1.model, &stage1.basis, &data, &cfg, &mut SeededRng::new(9), 1)
            .unwrap();
        let b = run_round(&stage1.model, &stage1.basis, &data, &cfg, &mut SeededRng::new(9), 1)
            .unwrap();
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
        assert_eq!(a.model, b.model);
        assert_eq!(a.pseudo_labels, b.pseudo_labels);
    }

    #[test]
    fn kept_samples_have_lower_mean_uncertainty_than_discarded() {
        let data = toy_split(7);
        let cfg = RoundConfig {
            em_iterations: 3,
            mc_samples: 32,
            ..fast_cfg()
        };
        let mut rng = SeededRng::new(31);
        let stage1 = train_stage1(&data.source, &cfg, &mut rng).unwrap();
        let outcome = run_round(
            &stage1.model,
            &stage1.basis,
            &data,
            &cfg,
            &mut SeededRng::new(32),
            1,
        )
        .unwrap();
        assert!(
            outcome.metrics.mean_uncertainty_kept < outcome.metrics.mean_uncertainty_discarded,
            "kept {} vs discarded {}",
            outcome.metrics.mean_uncertainty_kept,
            outcome.metrics.mean_uncertainty_discarded
        );
        assert!(rank_consistency_ok(
            &outcome.pseudo_labels,
            &outcome.selection,
            cfg.selection
        ));
    }

    #[test]
    fn single_round_driver_equals_one_run_round() {
        let data = toy_split(8);
        let cfg = RoundConfig {
            rounds: 1,
            seed: 77,
            ..fast_cfg()
        };
        let mut rng = SeededRng::new(cfg.seed);
        let report = run_self_training(&data, &cfg, &mut rng).unwrap();

        let mut rng = SeededRng::new(cfg.seed);
        let stage1 = train_stage1(&data.source, &cfg, &mut rng).unwrap();
        let mut round_rng = SeededRng::new(rng.next_u64());
        let outcome =
            run_round(&stage1.model, &stage1.basis, &data, &cfg, &mut round_rng, 1).unwrap();
        assert_eq!(report.final_model, outcome.model);
        assert_eq!(report.rounds[0].metrics, outcome.metrics);
    }

    #[test]
    fn driver_applies_the_keep_fraction_schedule() {
        let data = toy_split(9);
        let cfg = RoundConfig {
            rounds: 3,
            keep_fractions: vec![0.2, 0.4, 0.6],
            latent_sampling: LatentSampling::Mixture,
            ..fast_cfg()
        };
        let mut rng = SeededRng::new(cfg.seed);
        let report = run_self_training(&data, &cfg, &mut rng).unwrap();
        assert_eq!(report.rounds.len(), 3);
        for (i, expected) in [0.2, 0.4, 0.6].iter().enumerate() {
            let record = &report.rounds[i];
            for (class, &used) in record.selection.keep_fraction_used.iter().enumerate() {
                if used == 0.0 {
                    continue; // empty group
                }
                let group = record
                    .pseudo_labels
                    .iter()
                    .filter(|l| l.predicted_class() == class)
                    .count() as f64;
                let expected_kept = (expected * group).ceil();
                assert!(
                    (used * group - expected_kept).abs() <= 1.0 + 1e-9,
                    "round {i} class {class}: kept {} expected {expected_kept}",
                    used * group
                );
            }
        }
    }
}
