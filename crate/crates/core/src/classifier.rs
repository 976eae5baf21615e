//! Per-scene mixture classifier with drift detection and adaptation.
//!
//! [`ClassifierState::process`] runs one prequential step: predict, reveal the
//! label, feed a detector with the instance's mean frame log-likelihood under
//! the true scene's model, and adapt on drift. By default every scene has its
//! own detector and only the true scene's model can change in a step. With
//! [`DetectorScope::Shared`] one detector watches all scenes; its buffered
//! frames remember their scene, and a drift adapts every scene that buffered
//! at least `min_adapt_frames` of them.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cmgmm::{adapt_detailed, AdaptConfig};
use crate::em::{select_k_bic, EmConfig};
use crate::error::{Error, Result};
use crate::kd3::{DetectorScope, DetectorState, Kd3Config, Signal, SignalKind};
use crate::mixture::MixtureModel;

/// One labeled stream element: a block of feature frames and its scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub label: String,
    pub frames: Array2<f64>,
}

impl Instance {
    pub fn new(id: u64, label: impl Into<String>, frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::RejectedInput(format!("instance {id} has no frames")));
        }
        Ok(Self {
            id,
            label: label.into(),
            frames,
        })
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Result of one test-then-train step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub id: u64,
    pub predicted: String,
    pub correct: bool,
    pub signal: Signal,
    /// Scenes whose models were adapted in this step, in name order.
    pub adapted: Vec<String>,
}

/// Models and detectors keyed by scene name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    models: BTreeMap<String, MixtureModel>,
    /// Per-scene detectors; empty under a shared scope.
    detectors: BTreeMap<String, DetectorState>,
    shared: Option<DetectorState>,
    adapt_cfg: AdaptConfig,
    kd3_cfg: Kd3Config,
    adaptation_log: Vec<(u64, String)>,
}

impl ClassifierState {
    /// Fits one BIC-selected model per scene from its training frames.
    pub fn train_initial(
        training: &BTreeMap<String, Array2<f64>>,
        em: &EmConfig,
        adapt_cfg: AdaptConfig,
        kd3_cfg: Kd3Config,
    ) -> Result<Self> {
        adapt_cfg.validate()?;
        kd3_cfg.validate()?;
        if training.is_empty() {
            return Err(Error::InsufficientData("no scenes to train".into()));
        }
        let mut dim = None;
        let mut models = BTreeMap::new();
        for (scene, frames) in training {
            if frames.nrows() < 2 {
                return Err(Error::InsufficientData(format!(
                    "scene `{scene}` has {} training frames, need at least 2",
                    frames.nrows()
                )));
            }
            match dim {
                None => dim = Some(frames.ncols()),
                Some(d) if d != frames.ncols() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: frames.ncols(),
                    })
                }
                _ => {}
            }
            models.insert(scene.clone(), select_k_bic(frames.view(), em)?);
        }
        Self::from_models(models, adapt_cfg, kd3_cfg)
    }

    /// Builds a state from existing models.
    pub fn from_models(
        models: BTreeMap<String, MixtureModel>,
        adapt_cfg: AdaptConfig,
        kd3_cfg: Kd3Config,
    ) -> Result<Self> {
        adapt_cfg.validate()?;
        kd3_cfg.validate()?;
        let mut detectors = BTreeMap::new();
        let mut shared = None;
        match kd3_cfg.scope {
            DetectorScope::PerScene => {
                for scene in models.keys() {
                    detectors.insert(scene.clone(), DetectorState::new(kd3_cfg.clone())?);
                }
            }
            DetectorScope::Shared => shared = Some(DetectorState::new(kd3_cfg.clone())?),
        }
        Ok(Self {
            models,
            detectors,
            shared,
            adapt_cfg,
            kd3_cfg,
            adaptation_log: Vec::new(),
        })
    }

    pub fn models(&self) -> &BTreeMap<String, MixtureModel> {
        &self.models
    }

    /// Per-scene detectors; empty under a shared scope.
    pub fn detectors(&self) -> &BTreeMap<String, DetectorState> {
        &self.detectors
    }

    pub fn shared_detector(&self) -> Option<&DetectorState> {
        self.shared.as_ref()
    }

    pub fn adaptation_log(&self) -> &[(u64, String)] {
        &self.adaptation_log
    }

    pub fn component_counts(&self) -> BTreeMap<String, usize> {
        self.models
            .iter()
            .map(|(k, m)| (k.clone(), m.len()))
            .collect()
    }

    fn dim(&self) -> usize {
        self.models.values().next().map_or(0, |m| m.dim())
    }

    /// Mean frame log-likelihood under every scene model, in scene-name order.
    pub fn scores(&self, frames: ArrayView2<'_, f64>) -> Result<Vec<(String, f64)>> {
        self.models
            .iter()
            .map(|(scene, m)| Ok((scene.clone(), m.mean_log_density(frames)?)))
            .collect()
    }

    /// Highest-scoring scene; ties go to the first scene name.
    pub fn predict(&self, frames: ArrayView2<'_, f64>) -> Result<(String, Vec<(String, f64)>)> {
        let scores = self.scores(frames)?;
        let mut best = 0;
        for (i, (_, s)) in scores.iter().enumerate() {
            if *s > scores[best].1 {
                best = i;
            }
        }
        Ok((scores[best].0.clone(), scores))
    }

    /// One prequential step. The prediction uses the models as they were
    /// before this instance.
    pub fn process(&mut self, instance: &Instance) -> Result<StepOutcome> {
        if instance.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: instance.dim(),
            });
        }
        if !self.models.contains_key(&instance.label) {
            return Err(Error::UnknownLabel(instance.label.clone()));
        }
        let (predicted, scores) = self.predict(instance.frames.view())?;
        let correct = predicted == instance.label;
        let monitored = scores
            .iter()
            .find(|(s, _)| *s == instance.label)
            .map(|(_, v)| *v)
            .expect("label checked above");

        let (signal, buffered) = match self.shared.as_mut() {
            None => {
                let detector = self
                    .detectors
                    .get_mut(&instance.label)
                    .expect("models and detectors share keys");
                let signal = detector.update(monitored, instance.frames.view())?;
                let mut buffered = Vec::new();
                if signal.kind == SignalKind::Drift {
                    buffered.push((instance.label.clone(), detector.take_warning_data()));
                    detector.reset();
                }
                (signal, buffered)
            }
            Some(detector) => {
                // The last column carries the scene's index so a drift can
                // route the buffered frames back to their scenes.
                let scene = self
                    .models
                    .keys()
                    .position(|k| *k == instance.label)
                    .expect("label checked above");
                let mut tagged =
                    Array2::from_elem((instance.frames.nrows(), instance.dim() + 1), scene as f64);
                tagged
                    .slice_mut(s![.., ..instance.dim()])
                    .assign(&instance.frames);
                let signal = detector.update(monitored, tagged.view())?;
                let mut buffered = Vec::new();
                if signal.kind == SignalKind::Drift {
                    let data = detector.take_warning_data();
                    detector.reset();
                    buffered = split_by_scene(&data, self.models.keys());
                }
                (signal, buffered)
            }
        };
        let mut adapted = Vec::new();
        for (scene, data) in buffered {
            if data.nrows() >= self.kd3_cfg.min_adapt_frames {
                self.adapt_scene(&scene, &data, instance.id)?;
                adapted.push(scene);
            }
        }
        Ok(StepOutcome {
            id: instance.id,
            predicted,
            correct,
            signal,
            adapted,
        })
    }

    fn adapt_scene(&mut self, scene: &str, data: &Array2<f64>, id: u64) -> Result<()> {
        let mut cfg = self.adapt_cfg.clone();
        cfg.em.seed = cfg.em.seed.wrapping_add(self.adaptation_log.len() as u64);
        let outcome = adapt_detailed(&self.models[scene], data.view(), &cfg)?;
        self.models.insert(scene.to_string(), outcome.model);
        self.adaptation_log.push((id, scene.to_string()));
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(s)?;
        let consistent = match state.kd3_cfg.scope {
            DetectorScope::PerScene => {
                state.shared.is_none() && state.models.keys().eq(state.detectors.keys())
            }
            DetectorScope::Shared => state.shared.is_some() && state.detectors.is_empty(),
        };
        if !consistent {
            return Err(Error::RejectedInput(
                "checkpoint detectors do not match its scenes and detector scope".into(),
            ));
        }
        Ok(state)
    }
}

/// Splits scene-tagged frames into per-scene blocks, in scene-name order,
/// dropping the tag column.
fn split_by_scene<'a>(
    tagged: &Array2<f64>,
    scenes: impl Iterator<Item = &'a String>,
) -> Vec<(String, Array2<f64>)> {
    let d = tagged.ncols().saturating_sub(1);
    scenes
        .enumerate()
        .filter_map(|(idx, scene)| {
            let rows: Vec<f64> = tagged
                .rows()
                .into_iter()
                .filter(|r| r[d] == idx as f64)
                .flat_map(|r| r.iter().take(d).copied().collect::<Vec<_>>())
                .collect();
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() / d;
            Some((
                scene.clone(),
                Array2::from_shape_vec((n, d), rows).expect("rows have d columns"),
            ))
        })
        .collect()
}
