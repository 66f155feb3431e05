use uast_core::*;

// Re-derive the hidden target labels the way the generator drew them.
fn target_truth(seed: u64, n: usize, noise: f64) -> Vec<usize> {
    let mut rng = SeededRng::derive(seed, 1);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let _t = rng.uniform(); // angle
        let _ = (rng.normal(), rng.normal()); // noise draws
        labels.push(i % 2);
    }
    labels
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage1_epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(40);
    let retrain_lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let ds_seed = SeededRng::derive(7, 0).next_u64();
    let data = gen_synthetic(&SyntheticConfig {
        kind: SyntheticKind::TwoMoons,
        n_source: 500, n_target: 500, n_test: None,
        shift: Shift::RotationDegrees(30.0), noise: 0.1, dims: None,
        seed: ds_seed,
    }).unwrap();
    let truth = target_truth(ds_seed, 500, 0.1);

    let cfg = RoundConfig { stage1_epochs, retrain_lr, seed: 0, ..RoundConfig::default() };
    let mut rng = SeededRng::new(cfg.seed);
    let report = run_self_training(&data, &cfg, &mut rng).unwrap();
    println!("stage1: source {:.3} target {:.3}", report.stage1_source_accuracy, report.stage1_target_accuracy);
    for r in &report.rounds {
        let labels = &r.pseudo_labels;
        // pseudo-label argmax accuracy over all target rows
        let all_correct = labels.iter().filter(|l| l.predicted_class() == truth[l.sample_index]).count();
        // kept accuracy of hard labels
        let kept = &r.selection.kept;
        let kept_hard_correct = kept.iter().filter(|k| k.label == truth[k.index]).count();
        let kept_pred_correct = kept.iter().filter(|k| {
            let l = labels.iter().find(|l| l.sample_index == k.index).unwrap();
            l.predicted_class() == truth[k.index]
        }).count();
        println!("round {}: target_acc {:.3} | pseudo argmax acc (all) {:.3} | kept {} hard-label acc {:.3} argmax acc {:.3} | mean unc kept/disc {:.4}/{:.4}",
            r.metrics.round, r.metrics.target_accuracy,
            all_correct as f64 / labels.len() as f64,
            kept.len(),
            kept_hard_correct as f64 / kept.len().max(1) as f64,
            kept_pred_correct as f64 / kept.len().max(1) as f64,
            r.metrics.mean_uncertainty_kept, r.metrics.mean_uncertainty_discarded);
    }
}
