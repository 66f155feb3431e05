use uast_core::*;

fn main() {
    let floor: f64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let n_seeds: u64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let mut acc = vec![vec![]; 4];
    for seed in 0..n_seeds {
        let data = gen_synthetic(&SyntheticConfig {
            kind: SyntheticKind::TwoMoons,
            n_source: 500, n_target: 500, n_test: None,
            shift: Shift::RotationDegrees(30.0), noise: 0.1, dims: None,
            seed: SeededRng::derive(7, seed).next_u64(),
        }).unwrap();
        for (i, policy) in [SelectionPolicy::Variance, SelectionPolicy::Confidence, SelectionPolicy::None].iter().enumerate() {
            let cfg = RoundConfig { selection: *policy, seed, stage1_epochs: 8, retrain_lr: 0.02,
                variance_floor: floor, ..RoundConfig::default() };
            let mut rng = SeededRng::new(cfg.seed);
            let report = run_self_training(&data, &cfg, &mut rng).unwrap();
            if i == 0 {
                acc[0].push(report.stage1_target_accuracy);
                if seed == 0 {
                    let sel = &report.rounds[1].selection;
                    let mut ws: Vec<f64> = sel.kept.iter().map(|k| k.weight).collect();
                    ws.sort_by(|a, b| a.total_cmp(b));
                    let total: f64 = ws.iter().sum();
                    eprintln!("round-2 weights: n={} min {:.2e} med {:.2e} max {:.2e} | top-5 share {:.2}",
                        ws.len(), ws[0], ws[ws.len()/2], ws[ws.len()-1],
                        ws.iter().rev().take(5).sum::<f64>() / total);
                }
            }
            acc[i+1].push(report.final_target_accuracy());
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &Vec<f64>| v.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("floor={floor:.0e}: src {:.3} | var {:.3} (min {:.3}) | conf {:.3} | none {:.3} || (a) {:+.1}pp (b) {:+.1}pp none {:+.1}pp",
        mean(&acc[0]), mean(&acc[1]), min(&acc[1]), mean(&acc[2]), mean(&acc[3]),
        100.0*(mean(&acc[1])-mean(&acc[0])), 100.0*(mean(&acc[1])-mean(&acc[2])), 100.0*(mean(&acc[1])-mean(&acc[3])));
}
