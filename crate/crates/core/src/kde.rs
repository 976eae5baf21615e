//! One-dimensional Gaussian kernel density estimation and bounded divergences
//! between two sample windows.
//!
//! Divergences are computed on a shared 256-point grid anchored to the pooled
//! sample range. Each grid point stands for the cell around it and carries the
//! exact kernel mass of that cell, so narrow kernels on a coarse grid are not
//! lost between grid points.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::std_normal_pdf;

pub const BANDWIDTH_FLOOR: f64 = 1e-6;
pub const GRID_POINTS: usize = 256;
/// Grid margin beyond the pooled sample range, in bandwidths.
pub const GRID_MARGIN: f64 = 3.0;

// Normal tail mass beyond 9 sd is below 1e-18.
const TAIL_CUTOFF: f64 = 9.0;

/// Silverman's rule of thumb, `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
///
/// When the IQR is zero but the standard deviation is not, the standard
/// deviation alone is used. The result is floored at [`BANDWIDTH_FLOOR`].
pub fn bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "bandwidth needs at least 2 samples, got {n}"
        )));
    }
    Ok(raw_bandwidth(samples).max(BANDWIDTH_FLOOR))
}

fn raw_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let robust = iqr / 1.34;
    let spread = if robust > 0.0 { sd.min(robust) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Uniform ascending grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl UniformGrid {
    /// `len` points from `lo` to `hi` inclusive.
    pub fn spanning(lo: f64, hi: f64, len: usize) -> Result<Self> {
        if len < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::RejectedInput(format!(
                "grid needs lo < hi and at least 2 points (lo={lo}, hi={hi}, len={len})"
            )));
        }
        Ok(Self {
            start: lo,
            step: (hi - lo) / (len - 1) as f64,
            len,
        })
    }

    pub fn point(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.point(i)).collect()
    }
}

/// A density sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub step: f64,
}

impl DensityCurve {
    /// Riemann mass, `sum values * step`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.step
    }
}

/// Evaluates `f(g) = 1/(n h) sum_i K((g - x_i) / h)` with a Gaussian kernel.
pub fn kde_eval(samples: &[f64], h: f64, grid: &UniformGrid) -> Result<DensityCurve> {
    if samples.is_empty() {
        return Err(Error::InsufficientData(
            "kde needs at least one sample".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(Error::RejectedInput(format!(
            "bandwidth must be > 0, got {h}"
        )));
    }
    let scale = 1.0 / (samples.len() as f64 * h);
    let grid_pts = grid.points();
    let values = grid_pts
        .iter()
        .map(|&g| {
            scale
                * samples
                    .iter()
                    .map(|&x| std_normal_pdf((g - x) / h))
                    .sum::<f64>()
        })
        .collect();
    Ok(DensityCurve {
        grid: grid_pts,
        values,
        step: grid.step,
    })
}

/// KDE on its own construction grid: Silverman bandwidth, 256 points over the
/// sample range widened by three bandwidths on each side.
pub fn kde_curve(samples: &[f64]) -> Result<DensityCurve> {
    let h = bandwidth(samples)?;
    let (lo, hi) = range(samples);
    let grid = UniformGrid::spanning(lo - GRID_MARGIN * h, hi + GRID_MARGIN * h, GRID_POINTS)?;
    kde_eval(samples, h, &grid)
}

/// Measure of variation between two sample windows, bounded in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// Half the L1 distance between the two densities.
    TotalVariation,
    /// Squared Hellinger distance, `1 - sum sqrt(p q)`.
    #[default]
    Hellinger,
}

impl Divergence {
    pub fn between(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Divergence::TotalVariation => tv_divergence(a, b),
            Divergence::Hellinger => hellinger_divergence(a, b),
        }
    }
}

/// Total variation distance between the KDEs of two windows.
pub fn tv_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    let (pa, pb) = shared_cell_masses(a, b)?;
    let tv = 0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

/// Squared Hellinger distance between the KDEs of two windows.
pub fn hellinger_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    let (pa, pb) = shared_cell_masses(a, b)?;
    let h2 = 0.5
        * pa.iter()
            .zip(&pb)
            .map(|(x, y)| {
                let d = x.sqrt() - y.sqrt();
                d * d
            })
            .sum::<f64>();
    Ok(h2.clamp(0.0, 1.0))
}

fn range(samples: &[f64]) -> (f64, f64) {
    samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Normalized per-cell kernel masses of both windows on their shared grid.
fn shared_cell_masses(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "divergence needs at least 2 samples per window, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::RejectedInput("non-finite sample in window".into()));
    }
    let ha = bandwidth(a)?;
    let hb = bandwidth(b)?;
    let h_max = ha.max(hb);
    let (lo_a, hi_a) = range(a);
    let (lo_b, hi_b) = range(b);
    let lo = lo_a.min(lo_b) - GRID_MARGIN * h_max;
    let hi = hi_a.max(hi_b) + GRID_MARGIN * h_max;
    let grid = UniformGrid::spanning(lo, hi, GRID_POINTS)?;
    Ok((cell_masses(a, ha, &grid), cell_masses(b, hb, &grid)))
}

/// Kernel mass falling in each grid cell `[g - step/2, g + step/2)`,
/// renormalized to sum to one.
fn cell_masses(samples: &[f64], h: f64, grid: &UniformGrid) -> Vec<f64> {
    let cells = grid.len;
    let first_edge = grid.start - 0.5 * grid.step;
    let mut mass = vec![0.0; cells];
    // Tail masses at each edge: lower tail for z < 0, upper tail for z >= 0.
    let mut tails = vec![0.0; cells + 1];
    for &x in samples {
        let lo_z = (first_edge - x) / h;
        let dz = grid.step / h;
        // Only edges with |z| <= cutoff carry mass differences worth computing.
        let i0 = (((-TAIL_CUTOFF - lo_z) / dz).floor().max(0.0) as usize).min(cells);
        let i1 = (((TAIL_CUTOFF - lo_z) / dz).ceil().max(0.0) as usize).min(cells);
        for i in i0..=i1 {
            let z = lo_z + i as f64 * dz;
            tails[i] = 0.5 * libm::erfc(z.abs() / SQRT_2);
        }
        for c in i0..i1.min(cells) {
            let za = lo_z + c as f64 * dz;
            let zb = za + dz;
            let m = if zb <= 0.0 {
                tails[c + 1] - tails[c]
            } else if za >= 0.0 {
                tails[c] - tails[c + 1]
            } else {
                1.0 - tails[c] - tails[c + 1]
            };
            mass[c] += m.max(0.0);
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter_mut().for_each(|m| *m /= total);
    }
    mass
}
