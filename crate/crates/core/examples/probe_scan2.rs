use uast_core::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage1_epochs: usize = args[1].parse().unwrap();
    let retrain_lr: f64 = args[2].parse().unwrap();
    let head_lr: f64 = args[3].parse().unwrap();
    let n_seeds: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    let mut acc = vec![vec![]; 4];

    for seed in 0..n_seeds {
        let data = gen_synthetic(&SyntheticConfig {
            kind: SyntheticKind::TwoMoons,
            n_source: 500, n_target: 500, n_test: None,
            shift: Shift::RotationDegrees(30.0), noise: 0.1, dims: None,
            seed: SeededRng::derive(7, seed).next_u64(),
        }).unwrap();
        let mut row = vec![];
        for (i, policy) in [SelectionPolicy::Variance, SelectionPolicy::Confidence, SelectionPolicy::None].iter().enumerate() {
            let cfg = RoundConfig { selection: *policy, seed, stage1_epochs, retrain_lr, head_lr, ..RoundConfig::default() };
            let mut rng = SeededRng::new(cfg.seed);
            let report = run_self_training(&data, &cfg, &mut rng).unwrap();
            if i == 0 { acc[0].push(report.stage1_target_accuracy); row.push(report.stage1_target_accuracy); }
            acc[i+1].push(report.final_target_accuracy());
            row.push(report.final_target_accuracy());
        }
        eprintln!("  seed {seed}: src {:.3} var {:.3} conf {:.3} none {:.3}", row[0], row[1], row[2], row[3]);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &Vec<f64>| v.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("s1e={stage1_epochs} rlr={retrain_lr} hlr={head_lr}: src {:.3} | var {:.3} (min {:.3}) | conf {:.3} | none {:.3} || (a) {:+.1}pp, (b) {:+.1}pp, none {:+.1}pp",
        mean(&acc[0]), mean(&acc[1]), min(&acc[1]), mean(&acc[2]), mean(&acc[3]),
        100.0*(mean(&acc[1])-mean(&acc[0])), 100.0*(mean(&acc[1])-mean(&acc[2])), 100.0*(mean(&acc[1])-mean(&acc[3])));
}
