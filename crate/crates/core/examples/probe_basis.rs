use uast_core::*;
use uast_core::basis::feature_scale;

fn main() {
    let mut rng = SeededRng::new(500);
    let n = 64;
    let mut x = DataMatrix::zeros(n, 2);
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 2;
        let (cx, cy) = if class == 0 { (4.0, 0.0) } else { (0.0, 4.0) };
        x.set(i, 0, cx + 0.3 * rng.normal());
        x.set(i, 1, cy + 0.3 * rng.normal());
        labels.push(class);
    }
    let data = Dataset::labeled(x, labels, 2).unwrap();
    let cfg = RoundConfig {
        basis_count: Some(2),
        hidden_layers: vec![],
        stage1_epochs: 60,
        ..RoundConfig::default()
    };
    let mut rng = SeededRng::new(41);
    let result = train_stage1(&data, &cfg, &mut rng).unwrap();
    let features = result.model.forward(&data.features).unwrap().features;
    let s = feature_scale(&features);
    println!("scale {s:.3}");
    println!("att W rows: {:?}", result.att_weights.values());
    println!("refined mu: {:?}", result.basis.mu().values());
    println!("init ortho {:.4} refined {:.4}", result.init_ortho, result.refined_ortho);
    // centroids normalized
    let scaled = features.scale(1.0 / s);
    for c in 0..2 {
        let idx: Vec<usize> = (0..n).filter(|&i| data.labels[i] == Some(c)).collect();
        let mut m = [0.0f64; 2];
        for &i in &idx { m[0] += scaled.get(i,0); m[1] += scaled.get(i,1); }
        m[0] /= idx.len() as f64; m[1] /= idx.len() as f64;
        println!("centroid {c}: {m:?}");
    }
}
