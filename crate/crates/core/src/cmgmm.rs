//! Combine-merge adaptation of a mixture model to drifted data.
//!
//! Adaptation fits a candidate mixture on the frames collected during a
//! warning zone, takes the union of the current and candidate components
//! (weighted `1 - rho` and `rho`), merges pairs that are nearly identical, and
//! optionally prunes components whose `w^2 / var^2` score is negligible.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::em::{select_k_bic, EmConfig};
use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, MixtureModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Share of total weight given to the candidate model.
    pub rho: f64,
    /// Merge pairs whose symmetric KL divergence is below this.
    pub tau_merge: f64,
    /// Prune components scoring below this fraction of the best score.
    pub tau_prune: f64,
    pub pruning_enabled: bool,
    pub em: EmConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            tau_merge: 0.1,
            tau_prune: 1e-4,
            pruning_enabled: true,
            em: EmConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rho must be in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.tau_merge > 0.0) {
            return Err(Error::InvalidConfig("tau_merge must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.tau_prune) {
            return Err(Error::InvalidConfig("tau_prune must be in [0, 1)".into()));
        }
        self.em.validate()
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Union of both component sets, current weights scaled by `1 - rho` and
/// candidate weights by `rho`.
pub fn combine(current: &MixtureModel, candidate: &MixtureModel, rho: f64) -> Result<MixtureModel> {
    check_dims(current.dim(), candidate.dim())?;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "rho must be in (0, 1), got {rho}"
        )));
    }
    let scaled = |m: &MixtureModel, s: f64| {
        m.components()
            .iter()
            .map(move |c| GaussianComponent::new(c.weight * s, c.mean.clone(), c.variances.clone()))
            .collect::<Vec<_>>()
    };
    let mut comps = scaled(current, 1.0 - rho);
    comps.extend(scaled(candidate, rho));
    MixtureModel::from_unnormalized(comps)
}

/// Moment-matching merge of two components.
pub fn merge_pair(a: &GaussianComponent, b: &GaussianComponent) -> Result<GaussianComponent> {
    check_dims(a.dim(), b.dim())?;
    let w = a.weight + b.weight;
    if !(w > 0.0) {
        return Err(Error::DegenerateMerge);
    }
    let (fa, fb) = (a.weight / w, b.weight / w);
    let mut mean = Vec::with_capacity(a.dim());
    let mut variances = Vec::with_capacity(a.dim());
    for j in 0..a.dim() {
        let m = fa * a.mean[j] + fb * b.mean[j];
        let second = fa * (a.variances[j] + a.mean[j] * a.mean[j])
            + fb * (b.variances[j] + b.mean[j] * b.mean[j]);
        mean.push(m);
        variances.push(second - m * m);
    }
    Ok(GaussianComponent::new(w, mean, variances))
}

/// Symmetric KL divergence between the unweighted Gaussians of `a` and `b`.
pub fn dissimilarity(a: &GaussianComponent, b: &GaussianComponent) -> f64 {
    let mut total = 0.0;
    for j in 0..a.dim().min(b.dim()) {
        let (va, vb) = (a.variances[j], b.variances[j]);
        let dm2 = (a.mean[j] - b.mean[j]).powi(2);
        // KL(a||b) + KL(b||a): the log terms cancel.
        total += 0.5 * (va / vb + vb / va + dm2 / vb + dm2 / va - 2.0);
    }
    total.max(0.0)
}

/// Repeatedly merges the closest pair while its dissimilarity is below
/// `tau_merge`. Ties go to the lowest `(i, j)` pair.
pub fn merge_similar(model: &MixtureModel, tau_merge: f64) -> Result<MixtureModel> {
    Ok(merge_similar_counted(model, tau_merge)?.0)
}

fn merge_similar_counted(model: &MixtureModel, tau_merge: f64) -> Result<(MixtureModel, usize)> {
    let mut comps: Vec<GaussianComponent> = model.components().to_vec();
    let n = comps.len();
    let mut dist = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            dist[i][j] = dissimilarity(&comps[i], &comps[j]);
        }
    }
    let mut alive = vec![true; n];
    let mut merges = 0;
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..n {
                if alive[j] && dist[i][j] < tau_merge && best.is_none_or(|(_, _, d)| dist[i][j] < d)
                {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        comps[i] = merge_pair(&comps[i], &comps[j])?;
        alive[j] = false;
        merges += 1;
        for m in 0..n {
            if alive[m] && m != i {
                let d = dissimilarity(&comps[i], &comps[m]);
                if m < i {
                    dist[m][i] = d;
                } else {
                    dist[i][m] = d;
                }
            }
        }
    }
    let kept: Vec<GaussianComponent> = comps
        .into_iter()
        .zip(alive)
        .filter_map(|(c, a)| a.then_some(c))
        .collect();
    Ok((MixtureModel::from_unnormalized(kept)?, merges))
}

/// Pruning score `w^2 / (mean variance)^2`.
pub fn prune_score(c: &GaussianComponent) -> f64 {
    let v = c.mean_variance();
    c.weight * c.weight / (v * v)
}

/// Drops components scoring below `tau_prune` times the best score, always
/// keeping the best one, and renormalizes the weights.
pub fn prune(model: &MixtureModel, tau_prune: f64) -> Result<MixtureModel> {
    Ok(prune_counted(model, tau_prune)?.0)
}

fn prune_counted(model: &MixtureModel, tau_prune: f64) -> Result<(MixtureModel, usize)> {
    let scores: Vec<f64> = model.components().iter().map(prune_score).collect();
    let mut top = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[top] {
            top = k;
        }
    }
    let cutoff = tau_prune * scores[top];
    let kept: Vec<GaussianComponent> = model
        .components()
        .iter()
        .zip(&scores)
        .enumerate()
        .filter(|(k, (_, &s))| *k == top || s >= cutoff)
        .map(|(_, (c, _))| c.clone())
        .collect();
    let removed = model.len() - kept.len();
    if removed == 0 {
        return Ok((model.clone(), 0));
    }
    Ok((MixtureModel::from_unnormalized(kept)?, removed))
}

/// What one adaptation did.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub model: MixtureModel,
    pub candidate_components: usize,
    pub merges: usize,
    pub pruned: usize,
}

/// Fits a candidate on `warning_frames` and folds it into `current`.
pub fn adapt(
    current: &MixtureModel,
    warning_frames: ArrayView2<'_, f64>,
    cfg: &AdaptConfig,
) -> Result<MixtureModel> {
    Ok(adapt_detailed(current, warning_frames, cfg)?.model)
}

pub fn adapt_detailed(
    current: &MixtureModel,
    warning_frames: ArrayView2<'_, f64>,
    cfg: &AdaptConfig,
) -> Result<Adaptation> {
    cfg.validate()?;
    check_dims(current.dim(), warning_frames.ncols())?;
    let candidate = select_k_bic(warning_frames, &cfg.em)?;
    let combined = combine(current, &candidate, cfg.rho)?;
    let (merged, merges) = merge_similar_counted(&combined, cfg.tau_merge)?;
    let (model, pruned) = if cfg.pruning_enabled {
        prune_counted(&merged, cfg.tau_prune)?
    } else {
        (merged, 0)
    };
    debug_assert!(model.validate().is_ok());
    Ok(Adaptation {
        model,
        candidate_components: candidate.len(),
        merges,
        pruned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::tv_divergence;
    use crate::mixture::mixture_moments;

    fn c1(w: f64, m: f64, v: f64) -> GaussianComponent {
        GaussianComponent::new(w, vec![m], vec![v])
    }

    #[test]
    fn combine_scales_and_unions() {
        let a = MixtureModel::single(vec![0.0], vec![1.0]).unwrap();
        let b = MixtureModel::single(vec![3.0], vec![1.0]).unwrap();
        let m = combine(&a, &b, 0.5).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.components()[0].weight, 0.5);
        assert_eq!(m.components()[1].weight, 0.5);
        let wide = MixtureModel::single(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            combine(&a, &wide, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn combine_then_merge_recovers_self() {
        let cur = MixtureModel::new(vec![c1(0.3, -4.0, 1.0), c1(0.7, 5.0, 2.0)]).unwrap();
        for rho in [0.1, 0.5, 0.9] {
            let back = merge_similar(&combine(&cur, &cur, rho).unwrap(), 0.1).unwrap();
            assert_eq!(back.len(), 2);
            for (x, y) in back.components().iter().zip(cur.components()) {
                assert!((x.weight - y.weight).abs() < 1e-9);
                assert!((x.mean[0] - y.mean[0]).abs() < 1e-9);
                assert!((x.variances[0] - y.variances[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn merge_identical_is_idempotent() {
        let m = merge_pair(&c1(0.5, 2.0, 3.0), &c1(0.5, 2.0, 3.0)).unwrap();
        assert_eq!(m.weight, 1.0);
        assert!((m.mean[0] - 2.0).abs() < 1e-15);
        assert!((m.variances[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn merge_matches_monte_carlo_moments() {
        let m = merge_pair(&c1(0.5, 0.0, 1.0), &c1(0.5, 2.0, 1.0)).unwrap();
        assert!((m.weight - 1.0).abs() < 1e-15);
        assert!((m.mean[0] - 1.0).abs() < 1e-15);
        assert!((m.variances[0] - 2.0).abs() < 1e-12);
        let pair = MixtureModel::new(vec![c1(0.5, 0.0, 1.0), c1(0.5, 2.0, 1.0)]).unwrap();
        let xs = pair.sample(1_000_000, 77);
        let n = xs.nrows() as f64;
        let mean = xs.column(0).sum() / n;
        let var = xs.column(0).iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((m.mean[0] - mean).abs() < 1e-2);
        assert!((m.variances[0] - var).abs() < 1e-2);
    }

    #[test]
    fn merge_preserves_pair_moments() {
        let a = GaussianComponent::new(0.2, vec![1.0, -3.0], vec![0.5, 2.0]);
        let b = GaussianComponent::new(0.35, vec![-2.0, 0.5], vec![1.5, 0.1]);
        let m = merge_pair(&a, &b).unwrap();
        let (mean, second) = mixture_moments(&[a, b]);
        let (mm, ms) = mixture_moments(&[m]);
        for j in 0..2 {
            assert!((mean[j] - mm[j]).abs() < 1e-12);
            assert!((second[j] - ms[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_zero_weight_pair_fails() {
        assert!(matches!(
            merge_pair(&c1(0.0, 0.0, 1.0), &c1(0.0, 1.0, 1.0)),
            Err(Error::DegenerateMerge)
        ));
    }

    #[test]
    fn dissimilarity_closed_form() {
        let a = c1(0.5, 0.0, 1.0);
        let b = c1(0.5, 1.0, 1.0);
        assert_eq!(dissimilarity(&a, &a), 0.0);
        assert!((dissimilarity(&a, &b) - 1.0).abs() < 1e-15);
        let c = GaussianComponent::new(0.1, vec![0.3, -1.0], vec![0.4, 2.5]);
        let d = GaussianComponent::new(0.9, vec![-0.7, 2.0], vec![1.9, 0.6]);
        assert_eq!(dissimilarity(&c, &d), dissimilarity(&d, &c));
    }

    #[test]
    fn dissimilarity_matches_numeric_integration() {
        // KL(p||q) = int p ln(p/q), by quadrature, both directions.
        let a = c1(1.0, 0.0, 1.0);
        let b = c1(1.0, 1.0, 2.0);
        let kl = |p: &GaussianComponent, q: &GaussianComponent| {
            let (lo, hi, n) = (-30.0, 30.0, 60_000);
            let h = (hi - lo) / n as f64;
            (0..=n)
                .map(|i| {
                    let x = lo + i as f64 * h;
                    let lp = p.log_pdf(&[x]);
                    lp.exp() * (lp - q.log_pdf(&[x])) * h
                })
                .sum::<f64>()
        };
        let numeric = kl(&a, &b) + kl(&b, &a);
        assert!((dissimilarity(&a, &b) - numeric).abs() < 1e-6);
    }

    #[test]
    fn merge_similar_no_op_when_far() {
        let m = MixtureModel::new(vec![c1(0.5, 0.0, 1.0), c1(0.5, 5.0, 1.0)]).unwrap();
        assert_eq!(merge_similar(&m, 0.1).unwrap(), m);
    }

    #[test]
    fn merge_similar_collapses_duplicates() {
        let m = MixtureModel::new(vec![
            c1(0.25, 0.0, 1.0),
            c1(0.5, 40.0, 1.0),
            c1(0.25, 0.0, 1.0),
        ])
        .unwrap();
        let out = merge_similar(&m, 0.1).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.moments().0[0] - m.moments().0[0]).abs() < 1e-9);
    }

    #[test]
    fn prune_examples() {
        let single = MixtureModel::single(vec![1.0], vec![2.0]).unwrap();
        assert_eq!(prune(&single, 0.5).unwrap(), single);

        let m = MixtureModel::from_unnormalized(vec![
            c1(0.6, 0.0, 1.0),
            c1(0.4, 3.0, 1.0),
            c1(1e-6, 6.0, 1.0),
        ])
        .unwrap();
        let scores: Vec<f64> = m.components().iter().map(prune_score).collect();
        assert!((scores[2] / scores[0] - (1e-6f64 / 0.6).powi(2)).abs() < 1e-20);
        let out = prune(&m, 1e-4).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.components()[0].weight - 0.6).abs() < 1e-9);
        assert!((out.components()[1].weight - 0.4).abs() < 1e-9);

        let wide = MixtureModel::from_unnormalized(vec![
            c1(1.0, 0.0, 1.0),
            c1(1.0, 3.0, 1.0),
            c1(1.0, 6.0, 1000.0),
        ])
        .unwrap();
        let out = prune(&wide, 1e-4).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.components().iter().all(|c| c.variances[0] == 1.0));
    }

    #[test]
    fn prune_identity_above_threshold() {
        let m = MixtureModel::new(vec![c1(0.5, 0.0, 1.0), c1(0.5, 1.0, 1.5)]).unwrap();
        assert_eq!(prune(&m, 1e-4).unwrap(), m);
    }

    fn blob(center: f64, n: usize, seed: u64) -> ndarray::Array2<f64> {
        MixtureModel::single(vec![center, -center], vec![1.0, 1.0])
            .unwrap()
            .sample(n, seed)
    }

    #[test]
    fn self_adaptation_stays_close() {
        let cur = MixtureModel::new(vec![
            GaussianComponent::new(0.5, vec![-3.0, 1.0], vec![1.0, 1.0]),
            GaussianComponent::new(0.5, vec![3.0, -1.0], vec![1.0, 1.0]),
        ])
        .unwrap();
        let frames = cur.sample(500, 3);
        let out = adapt(&cur, frames.view(), &AdaptConfig::default()).unwrap();
        assert!(out.len() <= cur.len() + 2, "{}", out.len());
        let a = cur.sample(2000, 10);
        let b = out.sample(2000, 11);
        let proj = |x: &ndarray::Array2<f64>| x.column(0).to_vec();
        assert!(tv_divergence(&proj(&a), &proj(&b)).unwrap() < 0.1);
    }

    #[test]
    fn adaptation_raises_likelihood_of_shifted_data() {
        let cur = MixtureModel::single(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let shifted = blob(4.0, 400, 5);
        let out = adapt(&cur, shifted.view(), &AdaptConfig::default()).unwrap();
        assert!(
            out.mean_log_density(shifted.view()).unwrap()
                > cur.mean_log_density(shifted.view()).unwrap()
        );
    }

    #[test]
    fn adaptation_accounting_without_pruning() {
        let cur = MixtureModel::single(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let shifted = blob(6.0, 300, 6);
        let cfg = AdaptConfig {
            pruning_enabled: false,
            ..AdaptConfig::default()
        };
        let a = adapt_detailed(&cur, shifted.view(), &cfg).unwrap();
        assert_eq!(a.pruned, 0);
        assert_eq!(a.model.len(), cur.len() + a.candidate_components - a.merges);
    }

    #[test]
    fn adapt_rejects_wrong_dimension() {
        let cur = MixtureModel::single(vec![0.0], vec![1.0]).unwrap();
        let frames = blob(1.0, 50, 1);
        assert!(adapt(&cur, frames.view(), &AdaptConfig::default()).is_err());
    }
}
