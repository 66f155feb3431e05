//! Adapted EM for pseudo-label generation: alternate soft assignment and
//! basis updates while the linear pseudo-label head trains against a
//! combined labeled/uncertainty loss. Each unlabeled sample comes out with a
//! full class-probability distribution (mean, per-class variance, scalar
//! uncertainty) estimated by Monte-Carlo pushforward of mixture samples.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::config::{LatentSampling, RoundConfig};
use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::Layer;
use crate::numerics::{categorical_from_uniform, matmul, row_softmax, DataMatrix, SeededRng};

/// Row-stochastic soft assignment of samples to bases.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    z: DataMatrix,
}

impl Assignment {
    pub fn new(z: DataMatrix) -> Result<Self> {
        for r in 0..z.rows() {
            let mut sum = 0.0;
            for &v in z.row(r) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!(
                        "assignment entry {v} at row {r} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "assignment row {r} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Assignment { z })
    }

    pub fn matrix(&self) -> &DataMatrix {
        &self.z
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.z.row(r)
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    pub fn k(&self) -> usize {
        self.z.cols()
    }
}

/// Distribution of one sample's pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPseudoLabel {
    #[serde(rename = "index")]
    pub sample_index: usize,
    /// Monte-Carlo mean of the class probabilities, renormalized.
    pub mean: Vec<f64>,
    /// Per-class variance of the class probabilities.
    pub var: Vec<f64>,
    /// Trace of the class-probability covariance: the ranking score.
    pub uncertainty: f64,
}

impl SoftPseudoLabel {
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (c, &v) in self.mean.iter().enumerate() {
            if v > self.mean[best] {
                best = c;
            }
        }
        best
    }

    pub fn confidence(&self) -> f64 {
        self.mean[self.predicted_class()]
    }
}

/// Linear pseudo-label head: logits = x W + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: DataMatrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(weights: DataMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::shape(
                "LinearHead::new",
                format!("{} bias entries for {} outputs", bias.len(), weights.cols()),
            ));
        }
        Ok(LinearHead { weights, bias })
    }

    /// Borrows the final layer of a trained classifier as the head.
    pub fn from_layer(layer: &Layer) -> Self {
        LinearHead {
            weights: layer.weights.clone(),
            bias: layer.bias.clone(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.cols()
    }

    pub fn dims(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, x: &DataMatrix) -> Result<DataMatrix> {
        let mut out = matmul(x, &self.weights)?;
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v += self.bias[c];
            }
        }
        Ok(out)
    }

    pub fn probabilities(&self, x: &DataMatrix) -> Result<DataMatrix> {
        row_softmax(&self.logits(x)?, 1.0)
    }
}

/// Final state of one EM run.
#[derive(Debug, Clone)]
pub struct EmState {
    pub basis: BasisSet,
    pub assignment: Assignment,
    pub head: LinearHead,
    pub iteration: usize,
}

/// E step: `z = softmax(temp * X mu^T)` row-wise, the dot-product similarity
/// kernel normalized over bases.
pub fn e_step(x: &DataMatrix, basis: &BasisSet, temp: f64) -> Result<Assignment> {
    let scores = crate::basis::att_project(x, basis)?;
    Assignment::new(row_softmax(&scores, temp)?)
}

/// M step: each basis becomes the assignment-weighted mean of the samples,
/// `mu_k = sum_n z_nk x_n / sum_m z_mk`, summing over rows in ascending
/// order. A column with responsibility mass below 1e-12 is degenerate.
pub fn m_step(x: &DataMatrix, z: &Assignment) -> Result<BasisSet> {
    if z.rows() != x.rows() {
        return Err(Error::shape(
            "m_step",
            format!("{} assignment rows for {} samples", z.rows(), x.rows()),
        ));
    }
    let k = z.k();
    let d = x.cols();
    let mut mu = DataMatrix::zeros(k, d);
    for basis_idx in 0..k {
        let mut mass = 0.0;
        for n in 0..x.rows() {
            mass += z.row(n)[basis_idx];
        }
        if mass < 1e-12 {
            return Err(Error::DegenerateBasis {
                index: basis_idx,
                mass,
            });
        }
        for n in 0..x.rows() {
            let w = z.row(n)[basis_idx];
            for c in 0..d {
                mu.set(basis_idx, c, mu.get(basis_idx, c) + w * x.get(n, c));
            }
        }
        for c in 0..d {
            mu.set(basis_idx, c, mu.get(basis_idx, c) / mass);
        }
    }
    BasisSet::new(mu)
}

/// Pre-drawn randomness for `m` latent samples: one component-selection
/// uniform and one unit-normal noise row each. Sharing one `LatentDraws`
/// across different assignments couples the comparisons (same noise, same
/// selection quantiles), which the uncertainty-monotonicity checks rely on.
#[derive(Debug, Clone)]
pub struct LatentDraws {
    pub component_uniforms: Vec<f64>,
    pub noise: DataMatrix,
}

impl LatentDraws {
    pub fn generate(rng: &mut SeededRng, m: usize, dims: usize) -> Self {
        let component_uniforms = (0..m).map(|_| rng.uniform()).collect();
        let noise = rng.normal_matrix(m, dims);
        LatentDraws {
            component_uniforms,
            noise,
        }
    }

    pub fn len(&self) -> usize {
        self.component_uniforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.component_uniforms.is_empty()
    }
}

/// Latent samples for one data row given pre-drawn randomness.
///
/// `Mixture` draws ancestrally: component `k ~ Categorical(z)` by inverse
/// CDF on the stored uniform, then `x = mu_k + noise`. `Blended` instead
/// uses `x = sum_k z_k mu_k + noise`, which makes the spread independent of
/// `z`; it is kept as a comparison switch.
pub fn sample_latent_from_draws(
    z_row: &[f64],
    basis: &BasisSet,
    draws: &LatentDraws,
    mode: LatentSampling,
) -> Result<DataMatrix> {
    if z_row.len() != basis.k() {
        return Err(Error::shape(
            "sample_latent",
            format!("{} assignment weights for {} bases", z_row.len(), basis.k()),
        ));
    }
    let m = draws.len();
    let d = basis.dims();
    let mut out = DataMatrix::zeros(m, d);
    match mode {
        LatentSampling::Mixture => {
            let total: f64 = z_row.iter().sum();
            for j in 0..m {
                let k = categorical_from_uniform(z_row, total, draws.component_uniforms[j]);
                let mean = basis.mean(k);
                let row = out.row_mut(j);
                for c in 0..d {
                    row[c] = mean[c] + draws.noise.get(j, c);
                }
            }
        }
        LatentSampling::Blended => {
            let mut blended = vec![0.0; d];
            for (k, &w) in z_row.iter().enumerate() {
                for (c, b) in blended.iter_mut().enumerate() {
                    *b += w * basis.mean(k)[c];
                }
            }
            for j in 0..m {
                let row = out.row_mut(j);
                for c in 0..d {
                    row[c] = blended[c] + draws.noise.get(j, c);
                }
            }
        }
    }
    Ok(out)
}

/// Ancestral mixture sampling with fresh randomness: `m` draws of
/// `mu_k + eps`, `k ~ Categorical(z_row)`, `eps ~ N(0, I)`.
pub fn sample_latent(
    z_row: &[f64],
    basis: &BasisSet,
    rng: &mut SeededRng,
    m: usize,
) -> Result<DataMatrix> {
    if m < 1 {
        return Err(Error::Parameter {
            name: "m",
            detail: "at least one sample is required".into(),
        });
    }
    let draws = LatentDraws::generate(rng, m, basis.dims());
    sample_latent_from_draws(z_row, basis, &draws, LatentSampling::Mixture)
}

/// Monte-Carlo pushforward of pre-drawn latents through `softmax(head(x))`.
/// The mean is the renormalized average of the per-draw probability rows,
/// the variance is the per-class population variance, and the scalar
/// uncertainty is the covariance trace (the sum of the variances).
pub fn pseudo_label_from_draws(
    z_row: &[f64],
    basis: &BasisSet,
    head: &LinearHead,
    draws: &LatentDraws,
    mode: LatentSampling,
    sample_index: usize,
) -> Result<SoftPseudoLabel> {
    let latents = sample_latent_from_draws(z_row, basis, draws, mode)?;
    let probs = head.probabilities(&latents)?;
    Ok(label_from_probs(&probs, sample_index))
}

/// As [`pseudo_label_from_draws`] with fresh randomness.
pub fn pseudo_label_distribution(
    z_row: &[f64],
    basis: &BasisSet,
    head: &LinearHead,
    rng: &mut SeededRng,
    m: usize,
    sample_index: usize,
) -> Result<SoftPseudoLabel> {
    if m < 2 {
        return Err(Error::Parameter {
            name: "m",
            detail: "variance needs at least two samples".into(),
        });
    }
    let draws = LatentDraws::generate(rng, m, basis.dims());
    pseudo_label_from_draws(z_row, basis, head, &draws, LatentSampling::Mixture, sample_index)
}

fn label_from_probs(probs: &DataMatrix, sample_index: usize) -> SoftPseudoLabel {
    let m = probs.rows();
    let c = probs.cols();
    let mut mean = vec![0.0; c];
    for j in 0..m {
        for (cls, acc) in mean.iter_mut().enumerate() {
            *acc += probs.get(j, cls);
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut var = vec![0.0; c];
    for j in 0..m {
        for (cls, acc) in var.iter_mut().enumerate() {
            let diff = probs.get(j, cls) - mean[cls];
            *acc += diff * diff;
        }
    }
    for v in var.iter_mut() {
        *v /= m as f64;
    }
    let uncertainty = var.iter().sum();
    // Renormalize the mean; each row already sums to 1 so this only clears
    // accumulated rounding.
    let total: f64 = mean.iter().sum();
    for v in mean.iter_mut() {
        *v /= total;
    }
    SoftPseudoLabel {
        sample_index,
        mean,
        var,
        uncertainty,
    }
}

/// Combined pseudo-label loss over a batch: the mean cross-entropy between
/// label means and their one-hot truths over the labeled entries, plus the
/// mean scalar uncertainty over the unlabeled entries. Either mean is zero
/// when its side of the batch is empty.
pub fn combined_loss(labels: &[SoftPseudoLabel], truth: &[Label]) -> Result<f64> {
    if labels.len() != truth.len() {
        return Err(Error::shape(
            "combined_loss",
            format!("{} labels for {} truth slots", labels.len(), truth.len()),
        ));
    }
    let mut labeled_sum = 0.0;
    let mut labeled_count = 0usize;
    let mut unlabeled_sum = 0.0;
    let mut unlabeled_count = 0usize;
    for (label, t) in labels.iter().zip(truth) {
        match t {
            Some(class) => {
                if *class >= label.mean.len() {
                    return Err(Error::Contract(format!(
                        "truth class {class} outside {} classes",
                        label.mean.len()
                    )));
                }
                labeled_sum += -(label.mean[*class].max(f64::MIN_POSITIVE)).ln();
                labeled_count += 1;
            }
            None => {
                unlabeled_sum += label.uncertainty;
                unlabeled_count += 1;
            }
        }
    }
    let labeled = if labeled_count > 0 {
        labeled_sum / labeled_count as f64
    } else {
        0.0
    };
    let unlabeled = if unlabeled_count > 0 {
        unlabeled_sum / unlabeled_count as f64
    } else {
        0.0
    };
    Ok(labeled + unlabeled)
}

/// Gradient accumulator for the head parameters.
#[derive(Debug, Clone)]
pub struct HeadGradient {
    pub weights: DataMatrix,
    pub bias: Vec<f64>,
}

/// Loss and analytic gradient of the mixed head objective
/// `mix * mean_labeled CE + (1 - mix) * mean_unlabeled uncertainty`
/// over fixed latent samples (one matrix of `m` rows per data row).
/// Because the latents are fixed, this is an ordinary deterministic function
/// of the head parameters and finite differences apply directly.
pub fn head_loss_and_grad(
    latents: &[DataMatrix],
    truth: &[Label],
    head: &LinearHead,
    mix_weight: f64,
) -> Result<(f64, HeadGradient)> {
    if latents.len() != truth.len() {
        return Err(Error::shape(
            "head_loss_and_grad",
            format!("{} latent sets for {} truth slots", latents.len(), truth.len()),
        ));
    }
    let c = head.class_count();
    let labeled_count = truth.iter().filter(|t| t.is_some()).count();
    let unlabeled_count = truth.len() - labeled_count;

    let mut loss = 0.0;
    let mut grad_w = DataMatrix::zeros(head.dims(), c);
    let mut grad_b = vec![0.0; c];

    for (latent, t) in latents.iter().zip(truth) {
        let m = latent.rows();
        let probs = head.probabilities(latent)?;
        let mut mean = vec![0.0; c];
        for j in 0..m {
            for (cls, acc) in mean.iter_mut().enumerate() {
                *acc += probs.get(j, cls);
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }

        // d(term)/d(p_jc), scaled by the term's weight in the batch mean.
        let mut prob_grad = DataMatrix::zeros(m, c);
        match t {
            Some(class) => {
                let scale = mix_weight / labeled_count as f64;
                let p_mean = mean[*class].max(f64::MIN_POSITIVE);
                loss += scale * -p_mean.ln();
                let g = -scale / (m as f64 * p_mean);
                for j in 0..m {
                    prob_grad.set(j, *class, g);
                }
            }
            None => {
                let scale = (1.0 - mix_weight) / unlabeled_count as f64;
                let mut unc = 0.0;
                for cls in 0..c {
                    for j in 0..m {
                        let diff = probs.get(j, cls) - mean[cls];
                        unc += diff * diff;
                    }
                }
                unc /= m as f64;
                loss += scale * unc;
                for j in 0..m {
                    for cls in 0..c {
                        let diff = probs.get(j, cls) - mean[cls];
                        prob_grad.set(j, cls, scale * 2.0 / m as f64 * diff);
                    }
                }
            }
        }

        // Through the softmax: dF/dL_ja = p_ja (r_ja - <r_j, p_j>), then
        // through the linear map.
        let mut logit_grad = DataMatrix::zeros(m, c);
        for j in 0..m {
            let mut inner = 0.0;
            for cls in 0..c {
                inner += prob_grad.get(j, cls) * probs.get(j, cls);
            }
            for cls in 0..c {
                logit_grad.set(
                    j,
                    cls,
                    probs.get(j, cls) * (prob_grad.get(j, cls) - inner),
                );
            }
        }
        grad_w = grad_w.add(&matmul(&latent.transpose(), &logit_grad)?)?;
        for j in 0..m {
            for (cls, acc) in grad_b.iter_mut().enumerate() {
                *acc += logit_grad.get(j, cls);
            }
        }
    }

    grad_w.check_finite("head gradient")?;
    Ok((
        loss,
        HeadGradient {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}

/// Runs the adapted EM loop. Per iteration, in order: soft assignment,
/// latent sampling, pseudo-label statistics, combined loss, one head update
/// by backpropagation, then the basis update. Afterwards one more soft
/// assignment against the final basis produces the returned pseudo-labels
/// for the unlabeled rows (`sample_index` counts unlabeled rows in data
/// order).
///
/// A degenerate basis (no responsibility mass) is re-seeded at the features
/// of a random labeled row and the run continues; the event is logged.
///
/// Randomness discipline: one seed is drawn from `rng`, and every
/// (iteration, sample) pair gets its stream via `SeededRng::derive2`, so
/// results do not depend on evaluation order.
pub fn run_em(
    data: &Dataset,
    init: &BasisSet,
    head_init: &LinearHead,
    cfg: &RoundConfig,
    rng: &mut SeededRng,
) -> Result<(EmState, Vec<SoftPseudoLabel>)> {
    if init.dims() != data.dims() {
        return Err(Error::shape(
            "run_em",
            format!("{}-d basis for {}-d features", init.dims(), data.dims()),
        ));
    }
    if head_init.dims() != data.dims() || head_init.class_count() != data.class_count {
        return Err(Error::shape(
            "run_em",
            "head dimensions do not match the dataset".to_string(),
        ));
    }
    if cfg.em_iterations < 1 {
        return Err(Error::Config("em_iterations must be at least 1".into()));
    }

    let em_seed = rng.next_u64();
    let n = data.len();
    let m = cfg.mc_samples;
    let labeled = data.labeled_indices();

    let mut basis = init.clone();
    let mut head = head_init.clone();

    for t in 1..=cfg.em_iterations {
        let assignment = e_step(&data.features, &basis, cfg.temp)?;

        let mut latents = Vec::with_capacity(n);
        for i in 0..n {
            let mut sample_rng = SeededRng::derive2(em_seed, t as u64, i as u64);
            let draws = LatentDraws::generate(&mut sample_rng, m, basis.dims());
            latents.push(sample_latent_from_draws(
                assignment.row(i),
                &basis,
                &draws,
                cfg.latent_sampling,
            )?);
        }

        let (loss, grad) = head_loss_and_grad(&latents, &data.labels, &head, cfg.mix_weight)?;
        log::debug!("em iteration {t}: head loss {loss:.6}");
        head.weights = head.weights.sub(&grad.weights.scale(cfg.head_lr))?;
        for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
            *b -= cfg.head_lr * g;
        }

        basis = match m_step(&data.features, &assignment) {
            Ok(b) => b,
            Err(Error::DegenerateBasis { index, mass }) => {
                reseed_degenerate_basis(&basis, &assignment, data, &labeled, index, mass, rng)?
            }
            Err(e) => return Err(e),
        };
    }

    let final_assignment = e_step(&data.features, &basis, cfg.temp)?;
    let final_t = cfg.em_iterations as u64 + 1;
    let mut pseudo_labels = Vec::new();
    let mut unlabeled_pos = 0usize;
    for i in 0..n {
        if data.labels[i].is_none() {
            let mut sample_rng = SeededRng::derive2(em_seed, final_t, i as u64);
            let draws = LatentDraws::generate(&mut sample_rng, m, basis.dims());
            pseudo_labels.push(pseudo_label_from_draws(
                final_assignment.row(i),
                &basis,
                &head,
                &draws,
                cfg.latent_sampling,
                unlabeled_pos,
            )?);
            unlabeled_pos += 1;
        }
    }

    let state = EmState {
        basis,
        assignment: final_assignment,
        head,
        iteration: cfg.em_iterations,
    };
    Ok((state, pseudo_labels))
}

/// Replaces every degenerate basis row with the features of a random
/// labeled sample, then redoes the M step for the surviving columns.
fn reseed_degenerate_basis(
    basis: &BasisSet,
    assignment: &Assignment,
    data: &Dataset,
    labeled: &[usize],
    first_bad: usize,
    first_mass: f64,
    rng: &mut SeededRng,
) -> Result<BasisSet> {
    let k = basis.k();
    let mut masses = vec![0.0f64; k];
    for n in 0..assignment.rows() {
        for (j, mass) in masses.iter_mut().enumerate() {
            *mass += assignment.row(n)[j];
        }
    }
    log::warn!(
        "m_step: degenerate basis {first_bad} (mass {first_mass:e}); re-seeding from labeled data"
    );
    let mut mu = DataMatrix::zeros(k, basis.dims());
    for j in 0..k {
        if masses[j] < 1e-12 {
            let pick = if labeled.is_empty() {
                rng.index_below(data.len())
            } else {
                labeled[rng.index_below(labeled.len())]
            };
            for c in 0..basis.dims() {
                // Tiny jitter keeps re-seeded rows distinct from each other.
                mu.set(j, c, data.features.get(pick, c) + 1e-6 * rng.normal());
            }
        } else {
            for n in 0..assignment.rows() {
                let w = assignment.row(n)[j];
                for c in 0..basis.dims() {
                    mu.set(j, c, mu.get(j, c) + w * data.features.get(n, c));
                }
            }
            for c in 0..basis.dims() {
                mu.set(j, c, mu.get(j, c) / masses[j]);
            }
        }
    }
    BasisSet::new(mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis_from(rows: &[Vec<f64>]) -> BasisSet {
        BasisSet::new(DataMatrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn e_step_symmetric_bases_split_evenly() {
        let basis = basis_from(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let x = DataMatrix::new(1, 2, vec![0.0, 3.0]).unwrap();
        let z = e_step(&x, &basis, 1.0).unwrap();
        assert!((z.row(0)[0] - 0.5).abs() < 1e-12);
        assert!((z.row(0)[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn e_step_saturates_at_high_temperature() {
        let basis = basis_from(&[vec![2.0, 0.0], vec![-2.0, 0.0]]);
        let x = DataMatrix::new(1, 2, vec![2.0, 0.0]).unwrap();
        let z = e_step(&x, &basis, 1e3).unwrap();
        assert!(z.row(0)[0] > 1.0 - 1e-9);
    }

    #[test]
    fn e_step_matches_direct_softmax_evaluation() {
        let basis = basis_from(&[vec![1.0, -0.5], vec![0.2, 0.7]]);
        let x = DataMatrix::new(3, 2, vec![0.3, 0.4, -1.0, 0.1, 0.0, 2.0]).unwrap();
        let z = e_step(&x, &basis, 1.0).unwrap();
        for i in 0..3 {
            let s0 = x.get(i, 0) * 1.0 + x.get(i, 1) * -0.5;
            let s1 = x.get(i, 0) * 0.2 + x.get(i, 1) * 0.7;
            let max = s0.max(s1);
            let e0 = (s0 - max).exp();
            let e1 = (s1 - max).exp();
            assert!((z.row(i)[0] - e0 / (e0 + e1)).abs() < 1e-12);
            assert!((z.row(i)[1] - e1 / (e0 + e1)).abs() < 1e-12);
        }
    }

    #[test]
    fn m_step_one_hot_assignment_gives_cluster_means() {
        let x = DataMatrix::new(4, 1, vec![0.0, 2.0, 10.0, 14.0]).unwrap();
        let z = Assignment::new(
            DataMatrix::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let basis = m_step(&x, &z).unwrap();
        assert_eq!(basis.mean(0), &[1.0]);
        assert_eq!(basis.mean(1), &[12.0]);
    }

    #[test]
    fn m_step_uniform_assignment_gives_global_mean() {
        let x = DataMatrix::new(3, 2, vec![1.0, 0.0, 3.0, 6.0, 5.0, 0.0]).unwrap();
        let z = Assignment::new(DataMatrix::new(3, 2, vec![0.5; 6]).unwrap()).unwrap();
        let basis = m_step(&x, &z).unwrap();
        for k in 0..2 {
            assert!((basis.mean(k)[0] - 3.0).abs() < 1e-12);
            assert!((basis.mean(k)[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn m_step_matches_brute_force_weighted_mean_exactly() {
        let mut rng = SeededRng::new(12);
        let x = rng.normal_matrix(7, 3);
        let raw = row_softmax(&rng.normal_matrix(7, 4), 1.0).unwrap();
        let z = Assignment::new(raw.clone()).unwrap();
        let basis = m_step(&x, &z).unwrap();
        for k in 0..4 {
            let mut mass = 0.0;
            for n in 0..7 {
                mass += raw.get(n, k);
            }
            for c in 0..3 {
                let mut acc = 0.0;
                for n in 0..7 {
                    acc += raw.get(n, k) * x.get(n, c);
                }
                assert_eq!(basis.mu().get(k, c), acc / mass, "basis {k} coord {c}");
            }
        }
    }

    #[test]
    fn m_step_flags_degenerate_columns() {
        let x = DataMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let z = Assignment::new(DataMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        match m_step(&x, &z) {
            Err(Error::DegenerateBasis { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected degenerate basis, got {other:?}"),
        }
    }

    #[test]
    fn latent_with_zero_noise_is_the_selected_mean() {
        let basis = basis_from(&[vec![1.0, 2.0], vec![-3.0, 4.0]]);
        let draws = LatentDraws {
            component_uniforms: vec![0.9],
            noise: DataMatrix::zeros(1, 2),
        };
        let x = sample_latent_from_draws(&[0.0, 1.0], &basis, &draws, LatentSampling::Mixture)
            .unwrap();
        assert_eq!(x.row(0), &[-3.0, 4.0]);
    }

    #[test]
    fn latent_sample_moments_match_unit_gaussian_around_mean() {
        let basis = basis_from(&[vec![3.0, -1.0, 0.5], vec![100.0, 100.0, 100.0]]);
        let mut rng = SeededRng::new(60);
        let m = 10_000;
        let x = sample_latent(&[1.0, 0.0], &basis, &mut rng, m).unwrap();
        let d = 3;
        for c in 0..d {
            let mean: f64 = (0..m).map(|j| x.get(j, c)).sum::<f64>() / m as f64;
            let var: f64 =
                (0..m).map(|j| (x.get(j, c) - mean).powi(2)).sum::<f64>() / m as f64;
            assert!(
                (mean - basis.mean(0)[c]).abs() < 0.05 * (d as f64).sqrt(),
                "coord {c} mean {mean}"
            );
            assert!((var - 1.0).abs() < 0.1, "coord {c} var {var}");
        }
    }

    #[test]
    fn latent_between_component_variance_matches_mixture_moments() {
        // Equal-weight mixture of N(mu1, I) and N(mu2, I): total covariance
        // trace is d + 0.25 ||mu1 - mu2||^2.
        let basis = basis_from(&[vec![5.0, 0.0], vec![-5.0, 0.0]]);
        let mut rng = SeededRng::new(61);
        let m = 10_000;
        let x = sample_latent(&[0.5, 0.5], &basis, &mut rng, m).unwrap();
        let d = 2;
        let mut trace = 0.0;
        for c in 0..d {
            let mean: f64 = (0..m).map(|j| x.get(j, c)).sum::<f64>() / m as f64;
            trace += (0..m).map(|j| (x.get(j, c) - mean).powi(2)).sum::<f64>() / m as f64;
        }
        let between = trace - d as f64;
        let expect = 0.25 * 100.0;
        assert!(
            (between - expect).abs() < 0.1 * expect,
            "between-component variance {between}, expected about {expect}"
        );
    }

    #[test]
    fn zero_head_gives_uniform_mean_and_zero_variance() {
        let basis = basis_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let head = LinearHead::new(DataMatrix::zeros(2, 3), vec![0.0; 3]).unwrap();
        let mut rng = SeededRng::new(2);
        let label =
            pseudo_label_distribution(&[0.5, 0.5], &basis, &head, &mut rng, 64, 0).unwrap();
        for c in 0..3 {
            assert!((label.mean[c] - 1.0 / 3.0).abs() < 1e-12);
            assert!(label.var[c] < 1e-24);
        }
        assert!(label.uncertainty < 1e-24);
        assert!((label.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_region_gives_confident_label_with_small_uncertainty() {
        // Basis 0 deep inside class 0 for a strongly separated head; checks
        // Monte-Carlo agreement between m = 100 and m = 10000 within three
        // standard errors of the larger run.
        let basis = basis_from(&[vec![8.0, 0.0], vec![-8.0, 0.0]]);
        let head = LinearHead::new(
            DataMatrix::new(2, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        let mut rng = SeededRng::new(9);
        let small =
            pseudo_label_distribution(&[1.0, 0.0], &basis, &head, &mut rng, 100, 0).unwrap();
        let big =
            pseudo_label_distribution(&[1.0, 0.0], &basis, &head, &mut rng, 10_000, 0).unwrap();
        assert!(big.mean[0] > 0.9, "mean {:?}", big.mean);
        assert!(big.uncertainty < 0.05, "uncertainty {}", big.uncertainty);
        let se = (big.var[0] / 100.0).sqrt();
        assert!(
            (small.mean[0] - big.mean[0]).abs() <= 3.0 * se + 1e-6,
            "m=100 mean {} vs m=10000 mean {} (3 se = {})",
            small.mean[0],
            big.mean[0],
            3.0 * se
        );
    }

    #[test]
    fn spreading_assignment_across_divergent_bases_raises_uncertainty() {
        let basis = basis_from(&[vec![6.0, 0.0], vec![-6.0, 0.0]]);
        let head = LinearHead::new(
            DataMatrix::new(2, 2, vec![0.8, -0.8, 0.1, -0.1]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        let mut rng = SeededRng::new(3);
        let draws = LatentDraws::generate(&mut rng, 2_000, 2);
        let mode = LatentSampling::Mixture;
        let one_hot_a =
            pseudo_label_from_draws(&[1.0, 0.0], &basis, &head, &draws, mode, 0).unwrap();
        let one_hot_b =
            pseudo_label_from_draws(&[0.0, 1.0], &basis, &head, &draws, mode, 0).unwrap();
        let spread =
            pseudo_label_from_draws(&[0.5, 0.5], &basis, &head, &draws, mode, 0).unwrap();
        assert!(spread.uncertainty > one_hot_a.uncertainty);
        assert!(spread.uncertainty > one_hot_b.uncertainty);
    }

    #[test]
    fn combined_loss_exact_match_is_zero() {
        let labels = vec![
            SoftPseudoLabel {
                sample_index: 0,
                mean: vec![1.0, 0.0],
                var: vec![0.0, 0.0],
                uncertainty: 0.0,
            },
            SoftPseudoLabel {
                sample_index: 1,
                mean: vec![0.0, 1.0],
                var: vec![0.0, 0.0],
                uncertainty: 0.0,
            },
        ];
        let loss = combined_loss(&labels, &[Some(0), Some(1)]).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn combined_loss_zero_variance_unlabeled_is_zero() {
        let labels = vec![SoftPseudoLabel {
            sample_index: 0,
            mean: vec![0.5, 0.5],
            var: vec![0.0, 0.0],
            uncertainty: 0.0,
        }];
        assert_eq!(combined_loss(&labels, &[None]).unwrap(), 0.0);
    }

    #[test]
    fn combined_loss_matches_hand_computed_mixed_batch() {
        let mk = |mean: Vec<f64>, unc: f64| SoftPseudoLabel {
            sample_index: 0,
            mean,
            var: vec![unc, 0.0],
            uncertainty: unc,
        };
        let labels = vec![
            mk(vec![0.8, 0.2], 0.01),
            mk(vec![0.3, 0.7], 0.02),
            mk(vec![0.5, 0.5], 0.04),
            mk(vec![0.9, 0.1], 0.08),
        ];
        let truth = [Some(0), Some(1), None, None];
        let expect = ((-0.8f64.ln()) + (-0.7f64.ln())) / 2.0 + (0.04 + 0.08) / 2.0;
        let loss = combined_loss(&labels, &truth).unwrap();
        assert!((loss - expect).abs() < 1e-12);
    }

    fn small_em_dataset() -> Dataset {
        let x = DataMatrix::new(
            6,
            2,
            vec![2.0, 0.1, 2.2, -0.1, 1.9, 0.0, -2.0, 0.1, -2.1, 0.0, -1.9, -0.2],
        )
        .unwrap();
        Dataset::new(
            x,
            vec![Some(0), Some(0), None, Some(1), Some(1), None],
            2,
        )
        .unwrap()
    }

    fn small_head() -> LinearHead {
        LinearHead::new(
            DataMatrix::new(2, 2, vec![0.5, -0.5, 0.0, 0.0]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn run_em_single_iteration_frozen_head_composes_the_two_steps() {
        let data = small_em_dataset();
        let init = basis_from(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let cfg = RoundConfig {
            em_iterations: 1,
            head_lr: 1e-12, // effectively frozen
            mc_samples: 4,
            ..RoundConfig::default()
        };
        let mut rng = SeededRng::new(5);
        let (state, _) = run_em(&data, &init, &small_head(), &cfg, &mut rng).unwrap();

        let z = e_step(&data.features, &init, cfg.temp).unwrap();
        let expect = m_step(&data.features, &z).unwrap();
        assert_eq!(state.basis.mu(), expect.mu());
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn run_em_with_no_unlabeled_rows_returns_empty_list() {
        let x = DataMatrix::new(4, 2, vec![2.0, 0.0, 2.1, 0.1, -2.0, 0.0, -2.2, 0.1]).unwrap();
        let data = Dataset::labeled(x, vec![0, 0, 1, 1], 2).unwrap();
        let init = basis_from(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let cfg = RoundConfig {
            em_iterations: 2,
            mc_samples: 8,
            ..RoundConfig::default()
        };
        let mut rng = SeededRng::new(6);
        let (_, labels) = run_em(&data, &init, &small_head(), &cfg, &mut rng).unwrap();
        assert!(labels.is_empty());
    }

    #[test]
    fn run_em_is_deterministic_for_fixed_seed() {
        let data = small_em_dataset();
        let init = basis_from(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let cfg = RoundConfig {
            em_iterations: 3,
            mc_samples: 16,
            ..RoundConfig::default()
        };
        let (state_a, labels_a) =
            run_em(&data, &init, &small_head(), &cfg, &mut SeededRng::new(8)).unwrap();
        let (state_b, labels_b) =
            run_em(&data, &init, &small_head(), &cfg, &mut SeededRng::new(8)).unwrap();
        assert_eq!(labels_a, labels_b);
        assert_eq!(state_a.basis.mu(), state_b.basis.mu());
        assert_eq!(state_a.head, state_b.head);
    }

    #[test]
    fn run_em_assignment_rows_stay_stochastic() {
        let data = small_em_dataset();
        let init = basis_from(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let cfg = RoundConfig {
            em_iterations: 5,
            mc_samples: 8,
            ..RoundConfig::default()
        };
        let mut rng = SeededRng::new(10);
        let (state, _) = run_em(&data, &init, &small_head(), &cfg, &mut rng).unwrap();
        for r in 0..state.assignment.rows() {
            let sum: f64 = state.assignment.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences_on_frozen_instance() {
        let mut rng = SeededRng::new(44);
        let latents: Vec<DataMatrix> = (0..4).map(|_| rng.normal_matrix(8, 2)).collect();
        let truth = [Some(0), None, Some(1), None];
        let head = LinearHead::new(rng.normal_matrix(2, 2), vec![0.1, -0.2]).unwrap();
        let mix = 0.5;
        let (_, grad) = head_loss_and_grad(&latents, &truth, &head, mix).unwrap();

        let flat: Vec<f64> = head
            .weights
            .values()
            .iter()
            .chain(head.bias.iter())
            .copied()
            .collect();
        let at = DataMatrix::new(1, flat.len(), flat).unwrap();
        let numeric = crate::numerics::finite_diff_grad(
            &mut |p| {
                let vals = p.values();
                let w = DataMatrix::new(2, 2, vals[..4].to_vec()).unwrap();
                let probe = LinearHead::new(w, vals[4..].to_vec()).unwrap();
                head_loss_and_grad(&latents, &truth, &probe, mix).unwrap().0
            },
            &at,
            1e-5,
        )
        .unwrap();

        let analytic: Vec<f64> = grad
            .weights
            .values()
            .iter()
            .chain(grad.bias.iter())
            .copied()
            .collect();
        for (i, (&a, &n)) in analytic.iter().zip(numeric.values()).enumerate() {
            let denom = a.abs().max(n.abs());
            if denom < 1e-7 {
                assert!((a - n).abs() < 1e-7, "param {i}: {a} vs {n}");
            } else {
                assert!((a - n).abs() / denom < 1e-4, "param {i}: {a} vs {n}");
            }
        }
    }
}
