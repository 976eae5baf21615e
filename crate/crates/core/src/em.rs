//! Expectation-maximization for diagonal Gaussian mixtures, with BIC-based
//! choice of the component count.
//!
//! Frames are put into a canonical (lexicographic) row order before fitting, so
//! a fit depends only on the multiset of frames and the seed, never on the order
//! in which the frames arrived.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, MixtureModel, VARIANCE_FLOOR};

/// Components whose total responsibility falls below this are treated as empty.
const EMPTY_COMPONENT_MASS: f64 = 1e-10;

/// A fit is degenerate when some component carries less than two frames of
/// responsibility per free parameter (`d` means, `d` variances, one weight).
/// Thinner components fit chance clusters of a few points, with variances far
/// below the data's own, and the variance floor lets the likelihood grow
/// without bound.
fn is_degenerate(p: &Params, n: usize) -> bool {
    let min_mass = 2.0 * (2 * p.means.ncols() + 1) as f64;
    p.weights.iter().any(|w| w * (n as f64) < min_mass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
    pub k_max: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            k_max: 8,
            restarts: 3,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::InvalidConfig("em.max_iter must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("em.tol must be > 0".into()));
        }
        if self.k_max < 1 {
            return Err(Error::InvalidConfig("em.k_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// Log-likelihood history of one EM run.
#[derive(Debug, Clone)]
pub struct EmTrace {
    /// Total log-likelihood of the parameters after each iteration, starting
    /// with the seeded parameters.
    pub log_likelihood: Vec<f64>,
    /// Indices `t` such that an empty component was re-seeded between entry
    /// `t - 1` and entry `t`.
    pub reseeds: Vec<usize>,
    pub converged: bool,
}

/// Result of [`fit_em_detailed`]: the best model plus the trace of every restart.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: MixtureModel,
    pub log_likelihood: f64,
    pub traces: Vec<EmTrace>,
    /// True when every restart ended degenerate (see [`select_k_bic`]).
    pub degenerate: bool,
}

/// Fits a `k`-component mixture, keeping the best of `cfg.restarts` seeded
/// runs. Non-degenerate runs are preferred over degenerate ones regardless of
/// likelihood.
pub fn fit_em(frames: ArrayView2<'_, f64>, k: usize, cfg: &EmConfig) -> Result<MixtureModel> {
    Ok(fit_em_detailed(frames, k, cfg)?.model)
}

pub fn fit_em_detailed(frames: ArrayView2<'_, f64>, k: usize, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    check_frames(frames, k)?;
    let data = canonical_order(frames);
    fit_sorted(&data, k, cfg)
}

/// Bayesian information criterion, `p ln n - 2 LL`, for a diagonal mixture.
pub fn bic(model: &MixtureModel, frames: ArrayView2<'_, f64>) -> Result<f64> {
    if frames.nrows() == 0 {
        return Err(Error::InsufficientData(
            "bic needs at least one frame".into(),
        ));
    }
    let ll = model.mean_log_density(frames)? * frames.nrows() as f64;
    Ok(bic_from_ll(ll, model.len(), model.dim(), frames.nrows()))
}

pub fn free_parameters(k: usize, d: usize) -> usize {
    k * 2 * d + (k - 1)
}

fn bic_from_ll(ll: f64, k: usize, d: usize, n: usize) -> f64 {
    free_parameters(k, d) as f64 * (n as f64).ln() - 2.0 * ll
}

/// Fits `k = 1..=min(k_max, n)` and returns the minimum-BIC model; ties go to
/// the smaller `k`.
///
/// A `k` whose best fit is degenerate, with some component explaining fewer
/// than `2 (2d + 1)` frames, is not eligible; `k = 1` always is.
pub fn select_k_bic(frames: ArrayView2<'_, f64>, cfg: &EmConfig) -> Result<MixtureModel> {
    cfg.validate()?;
    let n = frames.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "model selection needs at least 2 frames, got {n}"
        )));
    }
    check_frames(frames, 1)?;
    let data = canonical_order(frames);
    let mut best: Option<(f64, MixtureModel)> = None;
    for k in 1..=cfg.k_max.min(n) {
        let fit = fit_sorted(&data, k, cfg)?;
        if k > 1 && fit.degenerate {
            continue;
        }
        let score = bic_from_ll(fit.log_likelihood, k, data.ncols(), n);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, fit.model));
        }
    }
    Ok(best.expect("k range is non-empty").1)
}

/// Runs EM starting from `init` instead of seeded parameters.
pub fn refine_em(
    frames: ArrayView2<'_, f64>,
    init: &MixtureModel,
    cfg: &EmConfig,
) -> Result<EmFit> {
    cfg.validate()?;
    check_frames(frames, init.len())?;
    if frames.ncols() != init.dim() {
        return Err(Error::DimensionMismatch {
            expected: init.dim(),
            found: frames.ncols(),
        });
    }
    let data = canonical_order(frames);
    let k = init.len();
    let d = init.dim();
    let mut params = Params {
        weights: init.components().iter().map(|c| c.weight).collect(),
        means: Array2::zeros((k, d)),
        vars: Array2::zeros((k, d)),
    };
    for (c, comp) in init.components().iter().enumerate() {
        for j in 0..d {
            params.means[[c, j]] = comp.mean[j];
            params.vars[[c, j]] = comp.variances[j];
        }
    }
    let global_var = column_variances(&data);
    let (p, ll, trace) = iterate(&data, params, &global_var, cfg);
    Ok(EmFit {
        model: params_to_model(&p)?,
        log_likelihood: ll,
        traces: vec![trace],
        degenerate: is_degenerate(&p, data.nrows()),
    })
}

fn params_to_model(p: &Params) -> Result<MixtureModel> {
    let comps = (0..p.weights.len())
        .map(|c| {
            GaussianComponent::new(
                p.weights[c],
                p.means.row(c).to_vec(),
                p.vars.row(c).to_vec(),
            )
        })
        .collect();
    MixtureModel::from_unnormalized(comps)
}

fn check_frames(frames: ArrayView2<'_, f64>, k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if frames.nrows() < k {
        return Err(Error::InsufficientData(format!(
            "{} frames cannot support {k} components",
            frames.nrows()
        )));
    }
    if frames.ncols() == 0 {
        return Err(Error::InsufficientData(
            "frames have zero dimensions".into(),
        ));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::RejectedInput("non-finite frame value".into()));
    }
    Ok(())
}

fn canonical_order(frames: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut idx: Vec<usize> = (0..frames.nrows()).collect();
    idx.sort_by(|&a, &b| {
        frames
            .row(a)
            .iter()
            .zip(frames.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    frames.select(Axis(0), &idx)
}

struct Params {
    weights: Vec<f64>,
    means: Array2<f64>,
    vars: Array2<f64>,
}

fn fit_sorted(data: &Array2<f64>, k: usize, cfg: &EmConfig) -> Result<EmFit> {
    // Ranked by (non-degenerate, log-likelihood); earlier restarts win ties.
    let mut best: Option<(bool, f64, Params)> = None;
    let mut traces = Vec::with_capacity(cfg.restarts.max(1));
    for r in 0..cfg.restarts.max(1) {
        let (params, ll, trace) = run_once(data, k, cfg, r as u64);
        traces.push(trace);
        let ok = !is_degenerate(&params, data.nrows());
        let better = match &best {
            None => true,
            Some((b_ok, b_ll, _)) => (ok, ll) > (*b_ok, *b_ll),
        };
        if better {
            best = Some((ok, ll, params));
        }
    }
    let (ok, ll, p) = best.expect("at least one restart");
    Ok(EmFit {
        model: params_to_model(&p)?,
        log_likelihood: ll,
        traces,
        degenerate: !ok,
    })
}

fn restart_seed(seed: u64, restart: u64) -> u64 {
    seed ^ restart.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run_once(data: &Array2<f64>, k: usize, cfg: &EmConfig, restart: u64) -> (Params, f64, EmTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, restart));
    let global_var = column_variances(data);
    let params = seed_params(data, k, &global_var, &mut rng);
    iterate(data, params, &global_var, cfg)
}

fn iterate(
    data: &Array2<f64>,
    mut params: Params,
    global_var: &[f64],
    cfg: &EmConfig,
) -> (Params, f64, EmTrace) {
    let (n, k) = (data.nrows(), params.weights.len());

    let mut resp = vec![0.0; n * k];
    let mut point_ll = vec![0.0; n];
    let mut trace = EmTrace {
        log_likelihood: Vec::new(),
        reseeds: Vec::new(),
        converged: false,
    };

    let mut ll = e_step(data, &params, &mut resp, &mut point_ll);
    trace.log_likelihood.push(ll);
    for _ in 0..cfg.max_iter {
        let reseeded = m_step(data, &mut params, &resp, &point_ll, global_var);
        let next = e_step(data, &params, &mut resp, &mut point_ll);
        trace.log_likelihood.push(next);
        if reseeded {
            trace.reseeds.push(trace.log_likelihood.len() - 1);
        }
        let change = (next - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        ll = next;
        if !reseeded && change < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    (params, ll, trace)
}

fn column_variances(data: &Array2<f64>) -> Vec<f64> {
    let n = data.nrows() as f64;
    data.columns()
        .into_iter()
        .map(|col| {
            let m = col.sum() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            v.max(VARIANCE_FLOOR)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by one hard assignment to set weights and variances.
fn seed_params<R: Rng>(data: &Array2<f64>, k: usize, global_var: &[f64], rng: &mut R) -> Params {
    let (n, d) = data.dim();
    let row = |i: usize| data.row(i).to_slice().expect("standard layout").to_vec();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(&row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if u < acc && w > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave u past the last cumulative value.
            chosen.unwrap_or_else(|| farthest(&dist))
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick);
        for (i, di) in dist.iter_mut().enumerate() {
            let nd = sq_dist(data.row(i).to_slice().unwrap(), &c);
            if nd < *di {
                *di = nd;
            }
        }
        centers.push(c);
    }

    let mut counts = vec![0usize; k];
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut sq = Array2::<f64>::zeros((k, d));
    for i in 0..n {
        let x = data.row(i);
        let xs = x.to_slice().unwrap();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let dd = sq_dist(xs, center);
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        counts[best] += 1;
        for j in 0..d {
            sums[[best, j]] += xs[j];
            sq[[best, j]] += xs[j] * xs[j];
        }
    }
    let mut means = Array2::<f64>::zeros((k, d));
    let mut vars = Array2::<f64>::zeros((k, d));
    let mut weights = vec![0.0; k];
    for c in 0..k {
        weights[c] = counts[c].max(1) as f64;
        for j in 0..d {
            means[[c, j]] = centers[c][j];
            vars[[c, j]] = if counts[c] >= 2 {
                let m = sums[[c, j]] / counts[c] as f64;
                (sq[[c, j]] / counts[c] as f64 - m * m).max(VARIANCE_FLOOR)
            } else {
                global_var[j]
            };
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Params {
        weights,
        means,
        vars,
    }
}

fn farthest(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

/// Fills responsibilities (row-major `n x k`) and per-frame
/// log-likelihoods; returns the total log-likelihood.
fn e_step(data: &Array2<f64>, p: &Params, resp: &mut [f64], point_ll: &mut [f64]) -> f64 {
    let d = data.ncols();
    let k = p.weights.len();
    let xs = data.as_slice().expect("standard layout");
    let means = p.means.as_slice().expect("standard layout");
    let norms: Vec<f64> = (0..k)
        .map(|c| {
            p.weights[c].ln()
                - 0.5
                    * (d as f64 * std::f64::consts::TAU.ln()
                        + p.vars.row(c).iter().map(|v| v.ln()).sum::<f64>())
        })
        .collect();
    let inv: Vec<f64> = p.vars.iter().map(|v| 1.0 / v).collect();
    let mut total = 0.0;
    for (i, (x, r)) in xs.chunks_exact(d).zip(resp.chunks_exact_mut(k)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            let mu = &means[c * d..(c + 1) * d];
            let iv = &inv[c * d..(c + 1) * d];
            let mut quad = 0.0;
            for j in 0..d {
                let diff = x[j] - mu[j];
                quad += diff * diff * iv[j];
            }
            let t = norms[c] - 0.5 * quad;
            r[c] = t;
            max = max.max(t);
        }
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in r.iter_mut() {
            *v /= s;
        }
        let lse = max + s.ln();
        point_ll[i] = lse;
        total += lse;
    }
    total
}

/// Returns true when an empty component had to be re-seeded.
fn m_step(
    data: &Array2<f64>,
    p: &mut Params,
    resp: &[f64],
    point_ll: &[f64],
    global_var: &[f64],
) -> bool {
    let (n, d) = data.dim();
    let k = p.weights.len();
    let xs = data.as_slice().expect("standard layout");
    let mut reseeded = false;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for c in 0..k {
        let nk: f64 = resp.iter().skip(c).step_by(k).sum();
        if nk < EMPTY_COMPONENT_MASS {
            // Re-seed at the worst-explained frame (lowest index on ties).
            let mut worst = 0;
            for i in 1..n {
                if point_ll[i] < point_ll[worst] {
                    worst = i;
                }
            }
            p.means.row_mut(c).assign(&data.row(worst));
            for j in 0..d {
                p.vars[[c, j]] = global_var[j];
            }
            p.weights[c] = 1.0 / n as f64;
            reseeded = true;
            continue;
        }
        mean.iter_mut().for_each(|m| *m = 0.0);
        for (x, r) in xs.chunks_exact(d).zip(resp.chunks_exact(k)) {
            let w = r[c];
            for j in 0..d {
                mean[j] += w * x[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        var.iter_mut().for_each(|v| *v = 0.0);
        for (x, r) in xs.chunks_exact(d).zip(resp.chunks_exact(k)) {
            let w = r[c];
            for j in 0..d {
                let diff = x[j] - mean[j];
                var[j] += w * diff * diff;
            }
        }
        for j in 0..d {
            p.means[[c, j]] = mean[j];
            p.vars[[c, j]] = (var[j] / nk).max(VARIANCE_FLOOR);
        }
        p.weights[c] = nk / n as f64;
    }
    let total: f64 = p.weights.iter().sum();
    p.weights.iter_mut().for_each(|w| *w /= total);
    reseeded
}
