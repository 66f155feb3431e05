//! Stage-1 basis extraction: supervised training of the feature extractor
//! with an orthogonality-regularized projection block, followed by gradient
//! descent on the semi-supervised basis objective. The refined basis rows
//! become the initial mixture means handed to EM.

use serde::{Deserialize, Serialize};

use crate::config::RoundConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Activation, Layer, LossSpec, MlpModel, Sgd};
use crate::numerics::{frobenius_norm, matmul, orthogonality_residual, DataMatrix, SeededRng};

/// K mean vectors of unit-covariance Gaussians. The covariance is identity
/// by construction and never stored or updated.
///
/// Bases produced by extraction are pairwise distinct (L2 distance above
/// 1e-8); transient EM updates may bring rows arbitrarily close, so
/// distinctness is checked where a basis is minted, not on every value.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    mu: DataMatrix,
}

impl BasisSet {
    pub fn new(mu: DataMatrix) -> Result<Self> {
        mu.check_finite("BasisSet::new")?;
        Ok(BasisSet { mu })
    }

    pub fn k(&self) -> usize {
        self.mu.rows()
    }

    pub fn dims(&self) -> usize {
        self.mu.cols()
    }

    pub fn mu(&self) -> &DataMatrix {
        &self.mu
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.mu.row(k)
    }

    pub fn replace_mean(&mut self, k: usize, values: &[f64]) {
        self.mu.row_mut(k).copy_from_slice(values);
    }

    /// True when every pair of bases is separated by more than 1e-8.
    pub fn pairwise_distinct(&self) -> bool {
        for i in 0..self.k() {
            for j in (i + 1)..self.k() {
                let dist: f64 = self
                    .mean(i)
                    .iter()
                    .zip(self.mean(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist <= 1e-8 {
                    return false;
                }
            }
        }
        true
    }

    pub fn to_json(&self) -> String {
        let proxy = BasisSetJson {
            k: self.k(),
            d: self.dims(),
            mu: self.mu.values().to_vec(),
        };
        serde_json::to_string(&proxy).expect("basis serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let proxy: BasisSetJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: 0,
            detail: format!("basis json: {e}"),
        })?;
        BasisSet::new(DataMatrix::new(proxy.k, proxy.d, proxy.mu)?)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisSetJson {
    k: usize,
    d: usize,
    mu: Vec<f64>,
}

/// Soft projection of samples onto the basis rows: `Z = X mu^T`, shape N x K.
pub fn att_project(x: &DataMatrix, basis: &BasisSet) -> Result<DataMatrix> {
    if x.cols() != basis.dims() {
        return Err(Error::shape(
            "att_project",
            format!("{}-d samples against {}-d basis", x.cols(), basis.dims()),
        ));
    }
    matmul(x, &basis.mu.transpose())
}

/// The three Frobenius terms of the basis objective evaluated at
/// `Z = X mu^T`:
/// reconstruction `||X - Z mu||`, label gram `||Z Z^T - Y Y^T||` and
/// orthogonality `||mu mu^T - I||`, plus their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisObjectiveReport {
    pub reconstruction: f64,
    pub label_gram: f64,
    pub ortho: f64,
    pub total: f64,
}

/// Unweighted objective report (all three terms at weight 1).
pub fn basis_objective(
    x: &DataMatrix,
    labels_onehot: &DataMatrix,
    basis: &BasisSet,
) -> Result<BasisObjectiveReport> {
    basis_objective_weighted(x, labels_onehot, basis, &[1.0, 1.0, 1.0])
}

/// Objective report with per-term weights (reconstruction, label gram,
/// orthogonality); each reported term already includes its weight so that
/// `total` is always their plain sum.
///
/// The label-gram norm is evaluated through the trace identity
/// `||Z Z^T - Y Y^T||^2 = ||Z^T Z||^2 - 2 ||Y^T Z||^2 + ||Y^T Y||^2`, which
/// sidesteps the N x N matrices.
pub fn basis_objective_weighted(
    x: &DataMatrix,
    labels_onehot: &DataMatrix,
    basis: &BasisSet,
    weights: &[f64; 3],
) -> Result<BasisObjectiveReport> {
    check_objective_shapes(x, labels_onehot)?;
    let z = att_project(x, basis)?;

    let reconstruction = weights[0] * frobenius_norm(&x.sub(&matmul(&z, basis.mu())?)?);
    let label_gram = weights[1] * label_gram_norm(&z, labels_onehot)?;
    let ortho = weights[2] * orthogonality_residual(basis.mu());

    Ok(BasisObjectiveReport {
        reconstruction,
        label_gram,
        ortho,
        total: reconstruction + label_gram + ortho,
    })
}

fn label_gram_norm(z: &DataMatrix, y: &DataMatrix) -> Result<f64> {
    let zt = z.transpose();
    let yt = y.transpose();
    let ztz = matmul(&zt, z)?;
    let ytz = matmul(&yt, z)?;
    let yty = matmul(&yt, y)?;
    let sq = frobenius_norm(&ztz).powi(2) - 2.0 * frobenius_norm(&ytz).powi(2)
        + frobenius_norm(&yty).powi(2);
    Ok(sq.max(0.0).sqrt())
}

/// Analytic gradient of the unweighted objective total with respect to mu.
pub fn basis_objective_grad(
    x: &DataMatrix,
    labels_onehot: &DataMatrix,
    basis: &BasisSet,
) -> Result<DataMatrix> {
    basis_objective_grad_weighted(x, labels_onehot, basis, &[1.0, 1.0, 1.0])
}

/// Gradient of the weighted objective. Each term is a Frobenius norm, so
/// its gradient is `grad(0.5 ||A||^2) / ||A||`; terms already at (numerical)
/// zero contribute the zero subgradient.
pub fn basis_objective_grad_weighted(
    x: &DataMatrix,
    labels_onehot: &DataMatrix,
    basis: &BasisSet,
    weights: &[f64; 3],
) -> Result<DataMatrix> {
    check_objective_shapes(x, labels_onehot)?;
    let mu = basis.mu();
    let z = att_project(x, basis)?;
    let mut grad = DataMatrix::zeros(mu.rows(), mu.cols());

    // Reconstruction: E = X - Z mu, grad(0.5 ||E||^2) = -mu (E^T X + X^T E).
    let e = x.sub(&matmul(&z, mu)?)?;
    let norm = frobenius_norm(&e);
    if weights[0] > 0.0 && norm > 1e-12 {
        let etx = matmul(&e.transpose(), x)?;
        let xte = matmul(&x.transpose(), &e)?;
        let half_sq = matmul(mu, &etx.add(&xte)?)?.scale(-1.0);
        grad = grad.add(&half_sq.scale(weights[0] / norm))?;
    }

    // Label gram: B = Z Z^T - Y Y^T, grad(0.5 ||B||^2) = 2 Z^T B X, factored
    // as 2 [(Z^T Z)(Z^T X) - (Z^T Y)(Y^T X)] to stay off N x N matrices.
    let norm = label_gram_norm(&z, labels_onehot)?;
    if weights[1] > 0.0 && norm > 1e-12 {
        let zt = z.transpose();
        let ztz = matmul(&zt, &z)?;
        let ztx = matmul(&zt, x)?;
        let zty = matmul(&zt, labels_onehot)?;
        let ytx = matmul(&labels_onehot.transpose(), x)?;
        let half_sq = matmul(&ztz, &ztx)?
            .sub(&matmul(&zty, &ytx)?)?
            .scale(2.0);
        grad = grad.add(&half_sq.scale(weights[1] / norm))?;
    }

    // Orthogonality: A = mu mu^T - I, grad(0.5 ||A||^2) = 2 A mu.
    grad = grad.add(&ortho_grad(mu)?.scale(weights[2]))?;

    grad.check_finite("basis_objective_grad")?;
    Ok(grad)
}

fn restore_pooling(model: &mut MlpModel, layer: usize, class_count: usize) {
    let weights = &mut model.layers_mut()[layer].weights;
    for row in 0..weights.rows() {
        for col in 0..weights.cols() {
            let v = if col == row % class_count { 1.0 } else { 0.0 };
            weights.set(row, col, v);
        }
    }
}

/// Gradient of `||W W^T - I||_F` with the zero subgradient at the minimum.
fn ortho_grad(w: &DataMatrix) -> Result<DataMatrix> {
    let gram = matmul(w, &w.transpose())?;
    let a = gram.sub(&DataMatrix::identity(w.rows()))?;
    let norm = frobenius_norm(&a);
    if norm <= 1e-12 {
        return Ok(DataMatrix::zeros(w.rows(), w.cols()));
    }
    Ok(matmul(&a, w)?.scale(2.0 / norm))
}

fn check_objective_shapes(x: &DataMatrix, labels_onehot: &DataMatrix) -> Result<()> {
    if labels_onehot.rows() != x.rows() {
        return Err(Error::shape(
            "basis_objective",
            format!(
                "{} label rows for {} samples",
                labels_onehot.rows(),
                x.rows()
            ),
        ));
    }
    Ok(())
}

/// Outcome of refining a basis by gradient descent on the objective.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub basis: BasisSet,
    pub steps_taken: usize,
    pub final_grad_norm: f64,
}

/// Gradient descent on the weighted objective with Armijo backtracking
/// (trial step `stage1_refine_lr`, halved until sufficient decrease), early
/// stopping when the gradient norm falls below 1e-6 or no decreasing step
/// exists. The backtracking keeps the objective monotone; a fixed step
/// diverges on the label-gram term whenever `Z Z^T` has large entries.
pub fn refine_basis(
    x: &DataMatrix,
    labels_onehot: &DataMatrix,
    init: &DataMatrix,
    cfg: &RoundConfig,
) -> Result<RefineOutcome> {
    let objective = |mu: &DataMatrix| -> Result<f64> {
        let basis = BasisSet::new(mu.clone())?;
        Ok(basis_objective_weighted(x, labels_onehot, &basis, &cfg.objective_weights)?.total)
    };
    let mut mu = init.clone();
    let mut total = objective(&mu)?;
    let mut grad_norm = f64::INFINITY;
    let mut steps = 0;
    for _ in 0..cfg.stage1_refine_steps {
        let basis = BasisSet::new(mu.clone())?;
        let grad = basis_objective_grad_weighted(x, labels_onehot, &basis, &cfg.objective_weights)?;
        grad_norm = frobenius_norm(&grad);
        if grad_norm < 1e-6 {
            break;
        }
        let mut step_size = cfg.stage1_refine_lr;
        let mut advanced = false;
        while step_size > 1e-16 {
            let candidate = mu.sub(&grad.scale(step_size))?;
            if let Ok(candidate_total) = objective(&candidate) {
                if candidate_total <= total - 1e-4 * step_size * grad_norm * grad_norm {
                    mu = candidate;
                    total = candidate_total;
                    advanced = true;
                    break;
                }
            }
            step_size *= 0.5;
        }
        if !advanced {
            break;
        }
        steps += 1;
    }
    Ok(RefineOutcome {
        basis: BasisSet::new(mu)?,
        steps_taken: steps,
        final_grad_norm: grad_norm,
    })
}

/// Mean row norm of a feature matrix; the scale on which the basis
/// objective is evaluated. Refining on `X / scale` keeps the three
/// unit-weight terms commensurate regardless of how large the extractor's
/// activations run.
pub fn feature_scale(features: &DataMatrix) -> f64 {
    let mut total = 0.0;
    for r in 0..features.rows() {
        total += features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mean = total / features.rows() as f64;
    if mean > 1e-9 {
        mean
    } else {
        1.0
    }
}

/// Everything stage 1 produces: the trained classifier, the raw projection
/// block, the refined basis and the orthogonality residuals used by the
/// halving check.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub model: MlpModel,
    /// Trained projection-block weights (K x feature dims); refinement in
    /// later rounds restarts from these.
    pub att_weights: DataMatrix,
    pub basis: BasisSet,
    /// Mean labeled-feature row norm; the basis lives in feature space
    /// divided by this.
    pub feature_scale: f64,
    /// `orthogonality_residual` of the block at random initialization.
    pub init_ortho: f64,
    /// Residual of the refined basis that is returned.
    pub refined_ortho: f64,
}

/// Per-term size normalization for refinement: the reconstruction norm
/// grows like sqrt(N), the label gram like N, the orthogonality residual
/// not at all. Refining with raw 1:1:1 weights lets the gram term dominate
/// on any non-trivial dataset, so the configured weights are divided by
/// these factors before gradient descent.
fn refine_weights(cfg: &RoundConfig, n: usize) -> [f64; 3] {
    let n = n as f64;
    [
        cfg.objective_weights[0] / n.sqrt(),
        cfg.objective_weights[1] / n,
        cfg.objective_weights[2],
    ]
}

/// Refinement entry point shared by stage 1 and the per-round re-extraction:
/// normalizes the feature scale, applies the size-normalized term weights,
/// runs the backtracking descent and gauge-fixes the result. Every term of
/// the objective depends on mu only through `mu^T mu`, which leaves row
/// order and row signs free; the gauge fix spends that freedom on positive
/// correlation with the class prototypes, which is what downstream soft
/// assignments care about.
pub(crate) fn refine_from_features(
    features: &DataMatrix,
    onehot: &DataMatrix,
    init: &DataMatrix,
    cfg: &RoundConfig,
) -> Result<RefineOutcome> {
    let scaled = features.scale(1.0 / feature_scale(features));
    let weights = refine_weights(cfg, features.rows());
    let scaled_cfg = RoundConfig {
        objective_weights: weights,
        ..cfg.clone()
    };
    let mut outcome = refine_basis(&scaled, onehot, init, &scaled_cfg)?;
    let prototypes = class_prototypes(&scaled, onehot)?;
    let aligned = align_rows_to_prototypes(outcome.basis.mu(), &prototypes);
    outcome.basis = BasisSet::new(aligned)?;
    Ok(outcome)
}

/// Per-class mean of the rows, `C x d`, from a one-hot label matrix.
fn class_prototypes(x: &DataMatrix, onehot: &DataMatrix) -> Result<DataMatrix> {
    let c = onehot.cols();
    let mut sums = DataMatrix::zeros(c, x.cols());
    let mut counts = vec![0.0f64; c];
    for r in 0..x.rows() {
        for class in 0..c {
            let w = onehot.get(r, class);
            if w > 0.0 {
                counts[class] += w;
                for j in 0..x.cols() {
                    sums.set(class, j, sums.get(class, j) + w * x.get(r, j));
                }
            }
        }
    }
    for class in 0..c {
        if counts[class] > 0.0 {
            for j in 0..x.cols() {
                sums.set(class, j, sums.get(class, j) / counts[class]);
            }
        }
    }
    Ok(sums)
}

/// Greedy permutation plus sign assignment: position k (serving class
/// k mod C) takes the unassigned row with the largest absolute cosine to
/// that class's prototype, flipped to positive correlation. Exactly
/// objective-preserving since permutations and per-row sign flips leave
/// `mu^T mu` unchanged.
fn align_rows_to_prototypes(mu: &DataMatrix, prototypes: &DataMatrix) -> DataMatrix {
    let k = mu.rows();
    let c = prototypes.rows();
    let mut taken = vec![false; k];
    let mut out = DataMatrix::zeros(k, mu.cols());
    for position in 0..k {
        let class = position % c;
        let proto = prototypes.row(class);
        let mut best: Option<(usize, f64, f64)> = None;
        for row in 0..k {
            if taken[row] {
                continue;
            }
            let dot: f64 = mu.row(row).iter().zip(proto).map(|(a, b)| a * b).sum();
            let norm: f64 = mu.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
            let score = if norm > 0.0 { dot.abs() / norm } else { 0.0 };
            if best.map_or(true, |(_, s, _)| score > s) {
                best = Some((row, score, dot));
            }
        }
        let (row, _, dot) = best.expect("at least one unassigned row");
        taken[row] = true;
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..mu.cols() {
            out.set(position, j, sign * mu.get(row, j));
        }
    }
    out
}

/// Trains the classifier on the labeled rows with the projection block in
/// the classification path: `x -> hidden layers -> features f -> z = f W^T
/// -> logits = z V + b`, minimizing the mean NLL plus `||W W^T - I||_F` on
/// the block. Because `W` carries the class gradient, its rows end up as
/// discriminative directions in feature space; they initialize gradient
/// descent on the basis objective over the extracted features. The block
/// and the small classifier fold into one standard linear head (`W^T V`) in
/// the returned model.
pub fn train_stage1(data: &Dataset, cfg: &RoundConfig, rng: &mut SeededRng) -> Result<Stage1Result> {
    cfg.validate()?;
    let k = cfg.resolve_basis_count(data.class_count);
    if k < data.class_count {
        return Err(Error::Config(format!(
            "basis count {k} is below the class count {}",
            data.class_count
        )));
    }
    let labeled = data.labeled_indices();
    if labeled.len() < k {
        return Err(Error::Config(format!(
            "{} labeled rows cannot seed {k} bases",
            labeled.len()
        )));
    }
    if !data.covers_all_classes() {
        return Err(Error::Config(
            "labeled data must cover every class".into(),
        ));
    }

    // Hidden extractor, projection block (no bias), classifier on the
    // projected coordinates. The classifier weights are a fixed class
    // pooling (row k feeds logit k mod C) so that each projection row
    // carries one class's gradient; only its bias trains. This is what
    // makes the trained rows class prototypes rather than arbitrary
    // rotations of the discriminative subspace.
    let mut layers = Vec::with_capacity(cfg.hidden_layers.len() + 2);
    let mut d_in = data.dims();
    for &width in &cfg.hidden_layers {
        layers.push(Layer::random(d_in, width, Activation::Tanh, rng));
        d_in = width;
    }
    let d_feat = d_in;
    let mut att_layer = Layer::random(d_feat, k, Activation::Identity, rng);
    att_layer.bias.iter_mut().for_each(|b| *b = 0.0);
    layers.push(att_layer);
    let mut pool = DataMatrix::zeros(k, data.class_count);
    for row in 0..k {
        pool.set(row, row % data.class_count, 1.0);
    }
    layers.push(Layer {
        weights: pool,
        bias: vec![0.0; data.class_count],
        activation: Activation::Identity,
    });
    let mut train_model = MlpModel::from_layers(layers)?;
    let att_index = cfg.hidden_layers.len();

    let init_ortho =
        orthogonality_residual(&train_model.layers()[att_index].weights.transpose());

    let x_labeled = data.features.select_rows(&labeled)?;
    let y_labeled: Vec<_> = labeled.iter().map(|&i| data.labels[i]).collect();

    let mut optimizer = Sgd::new(cfg.stage1_lr, cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for _ in 0..cfg.stage1_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_x = x_labeled.select_rows(chunk)?;
            let batch_y: Vec<_> = chunk.iter().map(|&i| y_labeled[i]).collect();
            let (_, mut grads) =
                train_model.backward(&batch_x, &LossSpec::Nll { labels: &batch_y })?;
            // Fold the orthogonality gradient into the block's gradient,
            // pin its bias at zero and freeze the pooling weights.
            let w = train_model.layers()[att_index].weights.transpose();
            let ortho = ortho_grad(&w)?.transpose();
            grads.layers[att_index].weights = grads.layers[att_index].weights.add(&ortho)?;
            grads.layers[att_index].bias.iter_mut().for_each(|g| *g = 0.0);
            grads.layers[att_index + 1]
                .weights
                .values_mut()
                .iter_mut()
                .for_each(|g| *g = 0.0);
            optimizer.step(&mut train_model, &grads)?;
            // Weight decay would erode the frozen pooling pattern.
            restore_pooling(&mut train_model, att_index + 1, data.class_count);
        }
    }

    // Fold block and classifier into a standard head: f W^T V + b.
    let att_weights = train_model.layers()[att_index].weights.transpose();
    let classifier = &train_model.layers()[att_index + 1];
    let head = Layer {
        weights: matmul(&train_model.layers()[att_index].weights, &classifier.weights)?,
        bias: classifier.bias.clone(),
        activation: Activation::Identity,
    };
    let mut folded = train_model.layers()[..att_index].to_vec();
    folded.push(head);
    let model = MlpModel::from_layers(folded)?;

    let features = model.forward(&x_labeled)?.features;
    let scale = feature_scale(&features);
    let onehot = data.onehot_labels(&labeled)?;
    let refined = refine_from_features(&features, &onehot, &att_weights, cfg)?;
    let basis = refined.basis;
    if !basis.pairwise_distinct() {
        return Err(Error::Config(
            "basis refinement collapsed two bases onto each other".into(),
        ));
    }
    let refined_ortho = orthogonality_residual(basis.mu());
    log::info!(
        "stage1: ortho residual {init_ortho:.4} -> {refined_ortho:.4} after {} refine steps",
        refined.steps_taken
    );

    Ok(Stage1Result {
        model,
        att_weights,
        basis,
        feature_scale: scale,
        init_ortho,
        refined_ortho,
    })
}
