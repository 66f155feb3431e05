use uast_core::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let mut acc = vec![vec![]; 4]; // src-only, variance, confidence, none

    let start = std::time::Instant::now();
    for seed in 0..n_seeds {
        let data = gen_synthetic(&SyntheticConfig {
            kind: SyntheticKind::TwoMoons,
            n_source: 500,
            n_target: 500,
            n_test: None,
            shift: Shift::RotationDegrees(30.0),
            noise: 0.1,
            dims: None,
            seed: SeededRng::derive(7, seed).next_u64(),
        }).unwrap();

        let mut results = vec![];
        for policy in [SelectionPolicy::Variance, SelectionPolicy::Confidence, SelectionPolicy::None] {
            let cfg = RoundConfig { selection: policy, seed, ..RoundConfig::default() };
            let mut rng = SeededRng::new(cfg.seed);
            let report = run_self_training(&data, &cfg, &mut rng).unwrap();
            results.push(report);
        }
        let src = results[0].stage1_target_accuracy;
        acc[0].push(src);
        for (i, r) in results.iter().enumerate() {
            acc[i+1].push(r.final_target_accuracy());
        }
        println!("seed {seed}: src-only {:.3} | variance {:.3} | confidence {:.3} | none {:.3} (src acc s1 {:.3})",
            src,
            results[0].final_target_accuracy(),
            results[1].final_target_accuracy(),
            results[2].final_target_accuracy(),
            results[0].stage1_source_accuracy);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("=== means over {n_seeds} seeds ({:.1}s) ===", start.elapsed().as_secs_f64());
    println!("source-only {:.4}", mean(&acc[0]));
    println!("variance    {:.4}  (vs src-only +{:.1}pp)", mean(&acc[1]), 100.0*(mean(&acc[1])-mean(&acc[0])));
    println!("confidence  {:.4}  (variance - confidence = {:+.1}pp)", mean(&acc[2]), 100.0*(mean(&acc[1])-mean(&acc[2])));
    println!("none        {:.4}  (variance - none = {:+.1}pp)", mean(&acc[3]), 100.0*(mean(&acc[1])-mean(&acc[3])));
}
