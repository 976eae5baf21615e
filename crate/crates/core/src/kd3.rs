//! Windowed kernel-density drift detector.
//!
//! The first `window` monitored values after a reset form a fixed reference
//! window; later values slide through a current window of the same length.
//! Once both are full, every update compares the two densities and classifies
//! the step as stable, warning (`beta < d <= alpha`) or drift (`d > alpha`).
//!
//! The detector also collects adaptation material. When a warning zone opens
//! (the first non-stable step after a stable one or after a reset), the buffer
//! is seeded with the newest payloads of the current window, just enough to
//! reach `min_adapt_frames`, so a drift that fires at once can still adapt.
//! Every further non-stable step appends its own payload. A stable step
//! empties the buffer. The buffer therefore grows with the length of the
//! warning zone, which widens as the gap between `alpha` and `beta` grows.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::Divergence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Kd3Config {
    /// Drift margin.
    pub alpha: f64,
    /// Warning margin.
    pub beta: f64,
    /// Window length in monitored points.
    pub window: usize,
    /// Maximum number of buffered payload frames.
    pub buffer_cap: usize,
    /// Minimum buffered frames for a drift to trigger adaptation.
    pub min_adapt_frames: usize,
    pub divergence: Divergence,
    pub scope: DetectorScope,
}

/// Which monitored values a classifier's detectors see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorScope {
    /// One detector per scene, fed only that scene's instances.
    #[default]
    PerScene,
    /// One detector fed every instance; a drift adapts each scene with enough
    /// buffered frames.
    Shared,
}

impl Default for Kd3Config {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.001,
            window: 45,
            buffer_cap: 500,
            min_adapt_frames: 30,
            divergence: Divergence::default(),
            scope: DetectorScope::default(),
        }
    }
}

impl Kd3Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta && self.beta < self.alpha && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta < alpha <= 1, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.window < 2 {
            return Err(Error::InvalidConfig("kd3.window must be >= 2".into()));
        }
        Ok(())
    }

    fn classify(&self, d: f64) -> SignalKind {
        if d > self.alpha {
            SignalKind::Drift
        } else if d > self.beta {
            SignalKind::Warning
        } else {
            SignalKind::Stable
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Stable,
    Warning,
    Drift,
}

/// Outcome of one detector update. `divergence` is `None` while the windows
/// are still filling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub kind: SignalKind,
    pub divergence: Option<f64>,
}

impl Signal {
    pub fn is_drift(&self) -> bool {
        self.kind == SignalKind::Drift
    }
}

/// Per-class detector state; serializable for checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    config: Kd3Config,
    reference: Vec<f64>,
    current: VecDeque<f64>,
    /// Payloads of the values in `current`, oldest first.
    current_payloads: VecDeque<Vec<Vec<f64>>>,
    warning_buffer: VecDeque<Vec<f64>>,
    in_warning_zone: bool,
    steps_since_reset: usize,
    last_divergence: Option<f64>,
    dim: Option<usize>,
}

impl DetectorState {
    pub fn new(config: Kd3Config) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            reference: Vec::new(),
            current: VecDeque::new(),
            current_payloads: VecDeque::new(),
            warning_buffer: VecDeque::new(),
            in_warning_zone: false,
            steps_since_reset: 0,
            last_divergence: None,
            dim: None,
        })
    }

    pub fn config(&self) -> &Kd3Config {
        &self.config
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn current(&self) -> impl Iterator<Item = f64> + '_ {
        self.current.iter().copied()
    }

    pub fn steps_since_reset(&self) -> usize {
        self.steps_since_reset
    }

    pub fn last_divergence(&self) -> Option<f64> {
        self.last_divergence
    }

    /// Number of frames currently buffered.
    pub fn buffered_frames(&self) -> usize {
        self.warning_buffer.len()
    }

    /// Feeds one monitored value with the frames it was computed from.
    ///
    /// Non-finite values and payloads of inconsistent dimension are rejected
    /// without touching the state.
    pub fn update(&mut self, value: f64, payload: ArrayView2<'_, f64>) -> Result<Signal> {
        if !value.is_finite() {
            return Err(Error::RejectedInput(format!(
                "monitored value must be finite, got {value}"
            )));
        }
        if payload.nrows() > 0 {
            if let Some(d) = self.dim {
                if payload.ncols() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: payload.ncols(),
                    });
                }
            }
        }
        let rows: Vec<Vec<f64>> = payload.rows().into_iter().map(|r| r.to_vec()).collect();
        if !rows.is_empty() {
            self.dim = Some(payload.ncols());
        }

        let w = self.config.window;
        self.steps_since_reset += 1;
        if self.reference.len() < w {
            self.reference.push(value);
        } else {
            self.current.push_back(value);
            self.current_payloads.push_back(rows);
            if self.current.len() > w {
                self.current.pop_front();
                self.current_payloads.pop_front();
            }
        }
        if self.steps_since_reset < 2 * w {
            return Ok(Signal {
                kind: SignalKind::Stable,
                divergence: None,
            });
        }
        let current: Vec<f64> = self.current.iter().copied().collect();
        let d = self.config.divergence.between(&self.reference, &current)?;
        Ok(self.apply_divergence(d))
    }

    /// Classifies `d` and updates the warning buffer, using the payload of the
    /// most recent value in the current window.
    fn apply_divergence(&mut self, d: f64) -> Signal {
        self.last_divergence = Some(d);
        let kind = self.config.classify(d);
        match kind {
            SignalKind::Stable => {
                self.warning_buffer.clear();
                self.in_warning_zone = false;
            }
            SignalKind::Warning | SignalKind::Drift => {
                if self.in_warning_zone {
                    if let Some(latest) = self.current_payloads.back() {
                        let latest = latest.clone();
                        self.push_frames(latest);
                    }
                } else {
                    let mut taken = 0;
                    let mut start = self.current_payloads.len();
                    while start > 0 && (taken == 0 || taken < self.config.min_adapt_frames) {
                        start -= 1;
                        taken += self.current_payloads[start].len();
                    }
                    let seed: Vec<Vec<f64>> = self
                        .current_payloads
                        .range(start..)
                        .flatten()
                        .cloned()
                        .collect();
                    self.push_frames(seed);
                    self.in_warning_zone = true;
                }
            }
        }
        Signal {
            kind,
            divergence: Some(d),
        }
    }

    fn push_frames(&mut self, frames: Vec<Vec<f64>>) {
        for f in frames {
            self.warning_buffer.push_back(f);
            if self.warning_buffer.len() > self.config.buffer_cap {
                self.warning_buffer.pop_front();
            }
        }
    }

    /// Drains the buffered frames, oldest first.
    pub fn take_warning_data(&mut self) -> Array2<f64> {
        let d = self.dim.unwrap_or(0);
        let n = self.warning_buffer.len();
        let flat: Vec<f64> = self.warning_buffer.drain(..).flatten().collect();
        Array2::from_shape_vec((n, d), flat).expect("buffered frames share one dimension")
    }

    /// Clears both windows and the buffer; the next `window` values form the
    /// new reference.
    pub fn reset(&mut self) {
        self.reference.clear();
        self.current.clear();
        self.current_payloads.clear();
        self.warning_buffer.clear();
        self.in_warning_zone = false;
        self.steps_since_reset = 0;
        self.last_divergence = None;
    }
}
