//! Correlation-based uncertainty scores and data reconstitution.
//!
//! For each classifier branch two probability vectors over the K classes are
//! compared: the **estimated** density (softmax of the branch logits) and the
//! **raw** density (a Gaussian over the integer class indices, parameterized
//! by the mean and standard deviation of the branch's pooled feature vector).
//! The uncertainty factor is `u = 1 − Pearson(p_r, p_e) ∈ [0, 2]`: zero when
//! the two densities agree perfectly, two when they anti-correlate.
//!
//! A sample's score uses its parent branch alone for Neg/GS labels and the
//! worse of the two branches for CSN labels. [`reconstitute`] runs the model
//! over its own training pool and removes every sample whose score strictly
//! exceeds a threshold — fixed samples are never removed, and evaluation
//! data never enters the function at all.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{predict, ModelParams, PredictOutput};
use crate::synthgen::{Class5, ParentLabel, ToyDataset};

/// Feature-vector spreads below this are treated as zero (degenerate rules).
const VAR_EPS: f64 = 1e-12;

/// Which classifier branch a density pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Parent,
    Child,
}

/// Both densities and the uncertainty factor for one branch of one sample.
#[derive(Debug, Clone)]
pub struct DensityPair {
    /// Softmax of the branch logits.
    pub p_e: Vec<f64>,
    /// Normalized Gaussian over class indices.
    pub p_r: Vec<f64>,
    /// `1 − Pearson(p_r, p_e)`, in `[0, 2]`.
    pub u: f64,
    pub branch: Branch,
}

/// Stable softmax of the branch logits.
pub fn estimated_density(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::validation("estimated_density needs at least one logit"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("estimated_density: non-finite logit"));
    }
    Ok(crate::hier::softmax(logits))
}

/// Gaussian density over class indices `0..k`, parameterized by the mean and
/// (population) standard deviation of the feature vector, normalized to sum
/// to one. A spread below `1e-12` degenerates to the uniform density.
pub fn raw_density(phi: &[f64], k: usize) -> Result<Vec<f64>> {
    if phi.len() < 2 {
        return Err(Error::validation(format!(
            "raw_density needs at least 2 features, got {}",
            phi.len()
        )));
    }
    if k < 2 {
        return Err(Error::validation("raw_density needs at least 2 classes"));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("raw_density: non-finite feature"));
    }
    let n = phi.len() as f64;
    let mu = phi.iter().sum::<f64>() / n;
    let var = phi.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma < VAR_EPS {
        return Ok(vec![1.0 / k as f64; k]);
    }
    // The 1/√(2π)σ prefactor cancels in the normalization.
    let dens: Vec<f64> = (0..k)
        .map(|i| {
            let z = (i as f64 - mu) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = dens.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // All mass collapsed numerically (mean far outside the index range).
        return Ok(vec![1.0 / k as f64; k]);
    }
    Ok(dens.iter().map(|d| d / total).collect())
}

/// `1 − Pearson(p_r, p_e)` across the K classes, clamped to `[0, 2]`.
/// If either vector is constant the correlation is undefined and the factor
/// is the neutral value 1.
pub fn uncertainty_factor(p_r: &[f64], p_e: &[f64]) -> Result<f64> {
    let k = p_r.len();
    if k < 2 || p_e.len() != k {
        return Err(Error::validation(format!(
            "uncertainty_factor needs two equal-length vectors of >= 2 entries, got {k} and {}",
            p_e.len()
        )));
    }
    if p_r.iter().chain(p_e).any(|v| !v.is_finite()) {
        return Err(Error::validation("uncertainty_factor: non-finite entry"));
    }
    let n = k as f64;
    let mean_r = p_r.iter().sum::<f64>() / n;
    let mean_e = p_e.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_r = 0.0;
    let mut var_e = 0.0;
    for (&r, &e) in p_r.iter().zip(p_e) {
        cov += (r - mean_r) * (e - mean_e);
        var_r += (r - mean_r) * (r - mean_r);
        var_e += (e - mean_e) * (e - mean_e);
    }
    if var_r / n < VAR_EPS * VAR_EPS || var_e / n < VAR_EPS * VAR_EPS {
        return Ok(1.0);
    }
    let pearson = cov / (var_r.sqrt() * var_e.sqrt());
    Ok((1.0 - pearson).clamp(0.0, 2.0))
}

/// Densities plus uncertainty factor for one branch.
pub fn density_pair(logits: &[f64], phi: &[f64], branch: Branch) -> Result<DensityPair> {
    let p_e = estimated_density(logits)?;
    let p_r = raw_density(phi, logits.len())?;
    let u = uncertainty_factor(&p_r, &p_e)?;
    Ok(DensityPair { p_e, p_r, u, branch })
}

/// One sample's classifier outputs, as needed for an uncertainty score.
/// Child fields are required only for CSN-labeled samples.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    pub parent_logits: Vec<f64>,
    pub phi_p: Vec<f64>,
    pub child_logits: Option<Vec<f64>>,
    pub phi_c: Option<Vec<f64>>,
}

impl From<&PredictOutput> for PredictionBundle {
    fn from(out: &PredictOutput) -> Self {
        PredictionBundle {
            parent_logits: out.parent_logits.clone(),
            phi_p: out.phi_p.clone(),
            child_logits: Some(out.child_logits.clone()),
            phi_c: Some(out.phi_c.clone()),
        }
    }
}

/// Uncertainty score of one sample: the parent branch's factor for Neg/GS
/// labels, the maximum over both branches for CSN labels.
pub fn sample_uncertainty(label: ParentLabel, bundle: &PredictionBundle) -> Result<f64> {
    let parent = density_pair(&bundle.parent_logits, &bundle.phi_p, Branch::Parent)?;
    if label != ParentLabel::Csn {
        return Ok(parent.u);
    }
    let (Some(logits), Some(phi)) = (&bundle.child_logits, &bundle.phi_c) else {
        return Err(Error::validation(
            "CSN-labeled sample needs child-branch outputs for its uncertainty score",
        ));
    };
    let child = density_pair(logits, phi, Branch::Child)?;
    Ok(parent.u.max(child.u))
}

/// Outcome summary of one reconstitution pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstitutionReport {
    pub threshold: f64,
    /// Number of removed samples (`= selected_ids.len()`).
    pub n_select: usize,
    /// Ids of the removed samples, in pool order.
    pub selected_ids: Vec<String>,
    /// Removed fraction per class name, over the pool's class counts.
    pub per_class_removed_fraction: BTreeMap<String, f64>,
    /// Fraction of removed samples whose label had been flipped by the
    /// generator's noise pass; absent when nothing was removed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_m: Option<f64>,
    /// Regular-pool size after removal.
    pub d_c_size: usize,
}

impl ReconstitutionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Scores every regular sample with the model's own predictions and removes
/// those whose uncertainty strictly exceeds `threshold`. Fixed samples are
/// kept unconditionally; the returned dataset uses the same schema as the
/// generator's output. Evaluation data is outside this function's reach by
/// construction — only the training pool goes in.
pub fn reconstitute(
    ds: &ToyDataset,
    params: &ModelParams,
    threshold: f64,
) -> Result<(ToyDataset, ReconstitutionReport)> {
    if !threshold.is_finite() {
        return Err(Error::validation("threshold must be finite"));
    }
    ds.check()?;

    let mut kept = Vec::with_capacity(ds.samples.len());
    let mut selected_ids = Vec::new();
    let mut removed_by_class: BTreeMap<String, usize> =
        Class5::ALL.iter().map(|c| (c.name().to_string(), 0)).collect();
    let mut mislabeled_selected = 0usize;

    for sample in &ds.samples {
        let out = predict(sample, params)?;
        let bundle = PredictionBundle::from(&out);
        let u = sample_uncertainty(sample.parent_label, &bundle)?;
        if u > threshold {
            selected_ids.push(sample.id.clone());
            *removed_by_class.get_mut(sample.class5().name()).expect("all keys") += 1;
            if sample.is_mislabeled {
                mislabeled_selected += 1;
            }
        } else {
            kept.push(sample.clone());
        }
    }

    let n_select = selected_ids.len();
    let per_class_removed_fraction = removed_by_class
        .iter()
        .map(|(name, &removed)| {
            let total = ds.class_counts.get(name).copied().unwrap_or(0);
            let frac = if total == 0 { 0.0 } else { removed as f64 / total as f64 };
            (name.clone(), frac)
        })
        .collect();
    let r_m = if n_select > 0 {
        Some(mislabeled_selected as f64 / n_select as f64)
    } else {
        None
    };
    let report = ReconstitutionReport {
        threshold,
        n_select,
        selected_ids,
        per_class_removed_fraction,
        r_m,
        d_c_size: kept.len(),
    };

    let mut d_c = ToyDataset {
        samples: kept,
        fixed: ds.fixed.clone(),
        class_counts: BTreeMap::new(),
        noise_rate: ds.noise_rate,
    };
    d_c.class_counts = d_c.recount();
    Ok((d_c, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier::TrainConfig;
    use crate::synthgen::{hierarchy_dataset, ClassCounts, HierarchyConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // --- estimated density ---

    #[test]
    fn equal_logits_give_uniform() {
        let p = estimated_density(&[0.7, 0.7, 0.7, 0.7]).unwrap();
        for &v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ln2_zero_gives_two_thirds_one_third() {
        let p = estimated_density(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let logits = [0.3, -1.2, 2.5];
        let a = estimated_density(&logits).unwrap();
        let b = estimated_density(&logits.map(|v| v + 1234.5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // Extreme logits stay finite thanks to max subtraction.
        let big = estimated_density(&[1e307, 1e307 - 1.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(estimated_density(&[f64::NAN, 0.0]).is_err());
        assert!(estimated_density(&[]).is_err());
    }

    // --- raw density ---

    #[test]
    fn constant_features_give_uniform() {
        let p = raw_density(&[0.4; 6], 3).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_case_mean_one_sigma_half() {
        // φ = [0.5, 1.5]: mean 1, population std 0.5 → densities ∝ (e⁻², 1, e⁻²).
        let p = raw_density(&[0.5, 1.5], 3).unwrap();
        let e2 = (-2.0f64).exp();
        let z = 1.0 + 2.0 * e2;
        assert!((p[0] - e2 / z).abs() < 1e-12);
        assert!((p[1] - 1.0 / z).abs() < 1e-12);
        assert!((p[2] - e2 / z).abs() < 1e-12);
        assert!((p[0] - 0.1065).abs() < 5e-4);
        assert!((p[1] - 0.7870).abs() < 5e-4);
    }

    #[test]
    fn symmetric_about_centered_mean() {
        // φ = [1, 3]: mean 2 = (K−1)/2 for K = 5.
        let p = raw_density(&[1.0, 3.0], 5).unwrap();
        assert_eq!(p[0], p[4]);
        assert_eq!(p[1], p[3]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raw_density_validates() {
        assert!(raw_density(&[1.0], 3).is_err());
        assert!(raw_density(&[1.0, f64::INFINITY], 3).is_err());
        assert!(raw_density(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn far_away_mean_degrades_to_uniform() {
        // Densities underflow to zero when the mean is ~1e9 indices away.
        let p = raw_density(&[1e9, 1e9 + 1.0], 3).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    // --- uncertainty factor ---

    #[test]
    fn identical_vectors_have_zero_uncertainty() {
        let p = [0.5, 0.3, 0.2];
        assert!(uncertainty_factor(&p, &p).unwrap() < 1e-12);
    }

    #[test]
    fn anti_ordered_pair_has_uncertainty_two() {
        let u = uncertainty_factor(&[0.8, 0.2], &[0.3, 0.7]).unwrap();
        assert!((u - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_gives_neutral_one() {
        let uniform = [0.25; 4];
        let varied = [0.7, 0.1, 0.1, 0.1];
        assert_eq!(uncertainty_factor(&uniform, &uniform).unwrap(), 1.0);
        assert_eq!(uncertainty_factor(&uniform, &varied).unwrap(), 1.0);
        assert_eq!(uncertainty_factor(&varied, &uniform).unwrap(), 1.0);
    }

    #[test]
    fn uncertainty_factor_validates() {
        assert!(uncertainty_factor(&[1.0], &[1.0]).is_err());
        assert!(uncertainty_factor(&[0.5, 0.5], &[0.2, 0.3, 0.5]).is_err());
        assert!(uncertainty_factor(&[f64::NAN, 0.5], &[0.5, 0.5]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        /// Pearson-derived properties: invariance under a common positive
        /// affine map, symmetry in the arguments, and invariance under a
        /// shared permutation of class indices.
        #[test]
        fn correlation_properties(
            (xs, ys) in (2usize..8).prop_flat_map(|k| {
                (
                    proptest::collection::vec(0.01f64..1.0, k),
                    proptest::collection::vec(0.01f64..1.0, k),
                )
            }),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
            rot in 0usize..8,
        ) {
            let u = uncertainty_factor(&xs, &ys).unwrap();
            prop_assert!((0.0..=2.0).contains(&u));

            let ax: Vec<f64> = xs.iter().map(|v| scale * v + shift).collect();
            let ay: Vec<f64> = ys.iter().map(|v| scale * v + shift).collect();
            let ua = uncertainty_factor(&ax, &ay).unwrap();
            prop_assert!((u - ua).abs() < 1e-6, "affine: {u} vs {ua}");

            let us = uncertainty_factor(&ys, &xs).unwrap();
            prop_assert!((u - us).abs() < 1e-12, "symmetry: {u} vs {us}");

            let k = xs.len();
            let r = rot % k;
            let px: Vec<f64> = (0..k).map(|i| xs[(i + r) % k]).collect();
            let py: Vec<f64> = (0..k).map(|i| ys[(i + r) % k]).collect();
            let up = uncertainty_factor(&px, &py).unwrap();
            prop_assert!((u - up).abs() < 1e-9, "permutation: {u} vs {up}");
        }
    }

    // --- sample uncertainty ---

    fn random_bundle(rng: &mut ChaCha8Rng, with_child: bool) -> PredictionBundle {
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        PredictionBundle {
            parent_logits: draw(rng, 3),
            phi_p: draw(rng, 5),
            child_logits: with_child.then(|| draw(rng, 3)),
            phi_c: with_child.then(|| draw(rng, 5)),
        }
    }

    #[test]
    fn csn_without_child_outputs_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bundle = random_bundle(&mut rng, false);
        let err = sample_uncertainty(ParentLabel::Csn, &bundle).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        // The same bundle is fine for a parent-only label.
        assert!(sample_uncertainty(ParentLabel::Neg, &bundle).is_ok());
    }

    #[test]
    fn matches_manual_branch_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..50 {
            let bundle = random_bundle(&mut rng, true);
            let u_parent = uncertainty_factor(
                &raw_density(&bundle.phi_p, 3).unwrap(),
                &estimated_density(&bundle.parent_logits).unwrap(),
            )
            .unwrap();
            let u_child = uncertainty_factor(
                &raw_density(bundle.phi_c.as_ref().unwrap(), 3).unwrap(),
                &estimated_density(bundle.child_logits.as_ref().unwrap()).unwrap(),
            )
            .unwrap();
            let label = match i % 3 {
                0 => ParentLabel::Neg,
                1 => ParentLabel::Gs,
                _ => ParentLabel::Csn,
            };
            let expect = if label == ParentLabel::Csn { u_parent.max(u_child) } else { u_parent };
            let got = sample_uncertainty(label, &bundle).unwrap();
            assert_eq!(got, expect, "bundle {i}");
        }
    }

    #[test]
    fn parent_labels_ignore_child_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random_bundle(&mut rng, true);
        let u1 = sample_uncertainty(ParentLabel::Gs, &a).unwrap();
        a.child_logits = Some(vec![50.0, -50.0, 0.0]);
        let u2 = sample_uncertainty(ParentLabel::Gs, &a).unwrap();
        assert_eq!(u1, u2);
    }

    // --- reconstitution ---

    fn tiny_trained() -> (ToyDataset, ModelParams) {
        let cfg = HierarchyConfig {
            counts: ClassCounts { neg: 10, gs: 6, c: 6, ss: 6, noa: 8 },
            g: 4,
            d0: 6,
            ..HierarchyConfig::default()
        };
        let ds = hierarchy_dataset(&cfg, 11, 0.1).unwrap();
        let tc = TrainConfig { epochs: 2, seed: 4, d1: 8, d2: 4, ..TrainConfig::default() };
        let (params, _) = crate::hier::train(&ds, &tc).unwrap();
        (ds, params)
    }

    #[test]
    fn threshold_at_ceiling_selects_nothing() {
        let (ds, params) = tiny_trained();
        let (d_c, report) = reconstitute(&ds, &params, 2.0).unwrap();
        assert_eq!(report.n_select, 0);
        assert!(report.selected_ids.is_empty());
        assert!(report.r_m.is_none());
        assert_eq!(d_c.samples.len(), ds.samples.len());
        assert_eq!(d_c.to_json().unwrap(), ds.to_json().unwrap());
    }

    #[test]
    fn selection_is_monotone_in_threshold() {
        let (ds, params) = tiny_trained();
        let mut previous = usize::MAX;
        for i in 0..=8 {
            let threshold = 0.25 * i as f64;
            let (d_c, report) = reconstitute(&ds, &params, threshold).unwrap();
            assert!(report.n_select <= previous, "n_select rose at {threshold}");
            previous = report.n_select;
            assert_eq!(report.n_select, report.selected_ids.len());
            assert_eq!(report.d_c_size, ds.samples.len() - report.n_select);
            assert_eq!(d_c.samples.len(), report.d_c_size);
            d_c.check().unwrap();
        }
    }

    #[test]
    fn fixed_samples_survive_total_removal() {
        let (ds, params) = tiny_trained();
        // u ≥ 0 > −1: every regular sample is selected.
        let (d_c, report) = reconstitute(&ds, &params, -1.0).unwrap();
        assert_eq!(report.n_select, ds.samples.len());
        assert!(d_c.samples.is_empty());
        assert_eq!(
            serde_json::to_string(&d_c.fixed).unwrap(),
            serde_json::to_string(&ds.fixed).unwrap()
        );
        assert_eq!(report.r_m, Some(
            ds.samples.iter().filter(|s| s.is_mislabeled).count() as f64
                / ds.samples.len() as f64
        ));
        for frac in report.per_class_removed_fraction.values() {
            assert_eq!(*frac, 1.0);
        }
    }

    #[test]
    fn report_serializes_and_counts_agree() {
        let (ds, params) = tiny_trained();
        let (d_c, report) = reconstitute(&ds, &params, 0.8).unwrap();
        let json = report.to_json().unwrap();
        let back: ReconstitutionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_select, report.n_select);
        assert_eq!(back.selected_ids, report.selected_ids);
        for (name, frac) in &report.per_class_removed_fraction {
            assert!((0.0..=1.0).contains(frac), "{name}: {frac}");
        }
        // Removed ids and kept samples partition the pool.
        let kept_ids: Vec<&str> = d_c.samples.iter().map(|s| s.id.as_str()).collect();
        for id in &report.selected_ids {
            assert!(!kept_ids.contains(&id.as_str()));
        }
        assert_eq!(kept_ids.len() + report.selected_ids.len(), ds.samples.len());
        // The reduced pool still round-trips through the dataset schema.
        let parsed = ToyDataset::from_json(&d_c.to_json().unwrap()).unwrap();
        assert_eq!(parsed.samples.len(), d_c.samples.len());
    }

    #[test]
    fn rejects_non_finite_threshold() {
        let (ds, params) = tiny_trained();
        assert!(reconstitute(&ds, &params, f64::NAN).is_err());
    }
}
