//! Synthetic concept-drift streams in feature space.
//!
//! Every scene has a base mixture. Drift overlays "event" components on it:
//! an active event with gain `g` becomes a mixture component of weight `g`,
//! and the base components share the remaining weight. Drift types decide how
//! events come and go over the scene's timeline; placement scenarios decide
//! where events are drawn from.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Instance;
use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, MixtureModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DriftType {
    A,
    B,
    C1,
    C2,
}

impl DriftType {
    pub const ALL: [DriftType; 4] = [DriftType::A, DriftType::B, DriftType::C1, DriftType::C2];

    /// Default drift points as fractions of each scene's timeline.
    pub fn default_drift_points(self) -> Vec<f64> {
        match self {
            DriftType::A => vec![0.25, 0.5, 0.75],
            // Three stacked events could outweigh the base at the default gains.
            DriftType::B => vec![1.0 / 3.0, 2.0 / 3.0],
            DriftType::C1 | DriftType::C2 => (1..8).map(|k| k as f64 / 8.0).collect(),
        }
    }
}

impl fmt::Display for DriftType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftType::A => "A",
            DriftType::B => "B",
            DriftType::C1 => "C1",
            DriftType::C2 => "C2",
        })
    }
}

impl FromStr for DriftType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(DriftType::A),
            "B" => Ok(DriftType::B),
            "C1" => Ok(DriftType::C1),
            "C2" => Ok(DriftType::C2),
            _ => Err(Error::Spec(format!("unknown drift type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Scene-specific events, assigned in order.
    T1,
    /// Events drawn at random from a per-scene pool.
    T2,
    /// Events drawn at random from pools shared by groups of scenes.
    T3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::T1, Scenario::T2, Scenario::T3];
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::T1 => "T1",
            Scenario::T2 => "T2",
            Scenario::T3 => "T3",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T1" => Ok(Scenario::T1),
            "T2" => Ok(Scenario::T2),
            "T3" => Ok(Scenario::T3),
            _ => Err(Error::Spec(format!("unknown scenario `{s}`"))),
        }
    }
}

pub const POOL_SIZE: usize = 5;
pub const GROUPS: usize = 3;
const BOX: f64 = 5.0;

/// Declarative description of a drift stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftStreamSpec {
    pub drift_type: DriftType,
    pub scenario: Scenario,
    pub n_scenes: usize,
    pub n_instances: usize,
    pub frames_per_instance: usize,
    pub dim: usize,
    /// Inclusive range of event mixture weights.
    pub event_gain_range: [f64; 2],
    /// Fractions of each scene's timeline; `None` picks the drift type's default.
    pub drift_points: Option<Vec<f64>>,
    /// Distance from an event's mean to the base component it is anchored at.
    pub event_offset: f64,
    pub seed: u64,
}

impl Default for DriftStreamSpec {
    fn default() -> Self {
        Self {
            drift_type: DriftType::A,
            scenario: Scenario::T1,
            n_scenes: 15,
            n_instances: 12_000,
            frames_per_instance: 20,
            dim: 8,
            event_gain_range: [0.2, 0.4],
            drift_points: None,
            event_offset: 3.0,
            seed: 0,
        }
    }
}

impl DriftStreamSpec {
    pub fn drift_points(&self) -> Vec<f64> {
        self.drift_points
            .clone()
            .unwrap_or_else(|| self.drift_type.default_drift_points())
    }

    pub fn per_scene(&self) -> usize {
        self.n_instances / self.n_scenes.max(1)
    }

    pub fn scene_names(&self) -> Vec<String> {
        (0..self.n_scenes).map(|s| format!("scene{s:02}")).collect()
    }

    /// Events the schedule activates over the whole timeline.
    pub fn events_needed(&self) -> usize {
        let n = self.drift_points().len();
        match self.drift_type {
            DriftType::A | DriftType::B => n,
            DriftType::C1 => n.min(1),
            DriftType::C2 => n.min(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.n_instances == 0 {
            return Err(Error::Spec(
                "need at least one scene and one instance".into(),
            ));
        }
        if self.n_instances % self.n_scenes != 0 {
            return Err(Error::Spec(format!(
                "{} instances cannot be split equally over {} scenes",
                self.n_instances, self.n_scenes
            )));
        }
        if self.frames_per_instance == 0 || self.dim == 0 {
            return Err(Error::Spec(
                "frames_per_instance and dim must be >= 1".into(),
            ));
        }
        let [lo, hi] = self.event_gain_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Spec(format!(
                "event_gain_range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
            )));
        }
        let points = self.drift_points();
        let mut prev = 0.0;
        for &p in &points {
            if !(p > prev && p < 1.0) {
                return Err(Error::Spec(
                    "drift_points must be strictly increasing in (0, 1)".into(),
                ));
            }
            prev = p;
        }
        let stacked = match self.drift_type {
            DriftType::A | DriftType::C1 => self.events_needed().min(1),
            DriftType::B | DriftType::C2 => self.events_needed(),
        };
        if stacked as f64 * hi >= 1.0 {
            return Err(Error::Spec(format!(
                "{stacked} stacked events with gain up to {hi} leave no weight for the base"
            )));
        }
        let pool = match self.scenario {
            Scenario::T1 => usize::MAX,
            Scenario::T2 | Scenario::T3 => POOL_SIZE,
        };
        if self.events_needed() > pool {
            return Err(Error::Spec(format!(
                "schedule needs {} events but pools hold {pool}",
                self.events_needed()
            )));
        }
        if !(self.event_offset >= 0.0) {
            return Err(Error::Spec("event_offset must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// An event component with its gain for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Index into the event table of [`Concepts`].
    pub id: usize,
    pub gain: f64,
}

/// Base mixtures and event pools for every scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Concepts {
    pub bases: Vec<MixtureModel>,
    /// Every event component, weight unused.
    pub events: Vec<GaussianComponent>,
    /// Per-scene pool of event ids.
    pub pools: Vec<Vec<usize>>,
    /// Per-scene events in schedule order (`e_1, e_2, ...`) with their gains.
    pub assigned: Vec<Vec<Event>>,
}

fn uniform_vec<R: Rng>(rng: &mut R, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_base<R: Rng>(rng: &mut R, d: usize) -> Result<MixtureModel> {
    let k = rng.random_range(2..=4);
    let comps = (0..k)
        .map(|_| {
            GaussianComponent::new(
                rng.random_range(0.5..1.5),
                uniform_vec(rng, d, -BOX, BOX),
                uniform_vec(rng, d, 0.5, 1.5),
            )
        })
        .collect();
    MixtureModel::from_unnormalized(comps)
}

/// An event anchored at a random component of `anchor`, displaced by
/// `offset` in a random direction.
fn random_event<R: Rng>(rng: &mut R, anchor: &MixtureModel, offset: f64) -> GaussianComponent {
    let d = anchor.dim();
    let base = &anchor.components()[rng.random_range(0..anchor.len())];
    let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mean = base
        .mean
        .iter()
        .zip(&dir)
        .map(|(m, u)| m + offset * u / norm)
        .collect();
    GaussianComponent::new(1.0, mean, uniform_vec(rng, d, 0.5, 1.5))
}

/// Draws base mixtures and event pools.
pub fn build_concepts(spec: &DriftStreamSpec) -> Result<Concepts> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let bases = (0..spec.n_scenes)
        .map(|_| random_base(&mut rng, d))
        .collect::<Result<Vec<_>>>()?;
    let needed = spec.events_needed();
    let mut events = Vec::new();
    let mut pools = Vec::with_capacity(spec.n_scenes);
    match spec.scenario {
        Scenario::T1 => {
            for base in &bases {
                let ids: Vec<usize> = (0..needed).map(|i| events.len() + i).collect();
                for _ in 0..needed {
                    events.push(random_event(&mut rng, base, spec.event_offset));
                }
                pools.push(ids);
            }
        }
        Scenario::T2 => {
            for base in &bases {
                let ids: Vec<usize> = (0..POOL_SIZE).map(|i| events.len() + i).collect();
                for _ in 0..POOL_SIZE {
                    events.push(random_event(&mut rng, base, spec.event_offset));
                }
                pools.push(ids);
            }
        }
        Scenario::T3 => {
            let mut group_pools = Vec::with_capacity(GROUPS);
            for g in 0..GROUPS {
                let members: Vec<usize> = (0..spec.n_scenes)
                    .filter(|&s| group_of(s, spec.n_scenes) == g)
                    .collect();
                let ids: Vec<usize> = (0..POOL_SIZE).map(|i| events.len() + i).collect();
                for _ in 0..POOL_SIZE {
                    // Shared events sit near a random member scene.
                    let anchor = if members.is_empty() {
                        &bases[rng.random_range(0..bases.len())]
                    } else {
                        &bases[members[rng.random_range(0..members.len())]]
                    };
                    events.push(random_event(&mut rng, anchor, spec.event_offset));
                }
                group_pools.push(ids);
            }
            for s in 0..spec.n_scenes {
                pools.push(group_pools[group_of(s, spec.n_scenes)].clone());
            }
        }
    }
    let [lo, hi] = spec.event_gain_range;
    let mut assigned = Vec::with_capacity(spec.n_scenes);
    for pool in &pools {
        let chosen: Vec<usize> = match spec.scenario {
            Scenario::T1 => pool[..needed].to_vec(),
            Scenario::T2 | Scenario::T3 => {
                let mut p = pool.clone();
                p.shuffle(&mut rng);
                p.truncate(needed);
                p
            }
        };
        assigned.push(
            chosen
                .into_iter()
                .map(|id| Event {
                    id,
                    gain: if hi > lo {
                        rng.random_range(lo..=hi)
                    } else {
                        lo
                    },
                })
                .collect(),
        );
    }
    Ok(Concepts {
        bases,
        events,
        pools,
        assigned,
    })
}

fn group_of(scene: usize, n_scenes: usize) -> usize {
    scene * GROUPS / n_scenes.max(1)
}

/// Active event slots (indices into a scene's assigned events) per interval.
fn active_slots(drift_type: DriftType, interval: usize) -> Vec<usize> {
    match drift_type {
        DriftType::A => {
            if interval == 0 {
                vec![]
            } else {
                vec![interval - 1]
            }
        }
        DriftType::B => (0..interval).collect(),
        DriftType::C1 => {
            if interval % 2 == 1 {
                vec![0]
            } else {
                vec![]
            }
        }
        DriftType::C2 => match interval {
            0 => vec![],
            i if i % 2 == 1 => vec![0],
            _ => vec![0, 1],
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Appear,
    Replace,
    Stack,
    Recur,
}

/// One stretch of a scene's timeline with a fixed concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    /// Per-scene instance indices `[start, end)`.
    pub start: usize,
    pub end: usize,
    /// Active event ids.
    pub events: Vec<usize>,
}

/// Per-scene sequence of concept intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTimeline {
    pub scenes: Vec<Vec<Interval>>,
}

/// Lays out the intervals for every scene.
pub fn schedule_drift(spec: &DriftStreamSpec, concepts: &Concepts) -> Result<ConceptTimeline> {
    spec.validate()?;
    let per = spec.per_scene();
    let points = spec.drift_points();
    let mut bounds: Vec<usize> = vec![0];
    bounds.extend(points.iter().map(|p| (p * per as f64).round() as usize));
    bounds.push(per);
    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for s in 0..spec.n_scenes {
        let assigned = &concepts.assigned[s];
        let mut intervals = Vec::with_capacity(bounds.len() - 1);
        for (i, w) in bounds.windows(2).enumerate() {
            let slots = active_slots(spec.drift_type, i);
            let mut events = Vec::with_capacity(slots.len());
            for slot in slots {
                let ev = assigned.get(slot).ok_or_else(|| {
                    Error::Spec(format!(
                        "scene {s} needs event slot {slot} but has only {}",
                        assigned.len()
                    ))
                })?;
                events.push(ev.id);
            }
            intervals.push(Interval {
                start: w[0],
                end: w[1],
                events,
            });
        }
        scenes.push(intervals);
    }
    Ok(ConceptTimeline { scenes })
}

/// The mixture a scene samples from while `events` are active.
pub fn concept_mixture(
    concepts: &Concepts,
    scene: usize,
    events: &[usize],
) -> Result<MixtureModel> {
    let gains: Vec<(usize, f64)> = events
        .iter()
        .map(|id| {
            concepts.assigned[scene]
                .iter()
                .find(|e| e.id == *id)
                .map(|e| (*id, e.gain))
                .ok_or_else(|| Error::Spec(format!("event {id} is not assigned to scene {scene}")))
        })
        .collect::<Result<_>>()?;
    let event_mass: f64 = gains.iter().map(|(_, g)| g).sum();
    let mut comps: Vec<GaussianComponent> = concepts.bases[scene]
        .components()
        .iter()
        .map(|c| {
            GaussianComponent::new(
                c.weight * (1.0 - event_mass),
                c.mean.clone(),
                c.variances.clone(),
            )
        })
        .collect();
    for (id, g) in gains {
        let e = &concepts.events[id];
        comps.push(GaussianComponent::new(
            g,
            e.mean.clone(),
            e.variances.clone(),
        ));
    }
    MixtureModel::from_unnormalized(comps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAnnotation {
    pub scene: String,
    /// Global index of the first instance of the new concept.
    pub at: u64,
    pub kind: TransitionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub drifts: Vec<DriftAnnotation>,
}

#[derive(Debug, Clone)]
pub struct GeneratedStream {
    pub spec: DriftStreamSpec,
    pub instances: Vec<Instance>,
    pub annotations: Annotations,
    pub timeline: ConceptTimeline,
    pub concepts: Concepts,
}

fn transition_kind(drift_type: DriftType, interval: usize) -> TransitionKind {
    match (drift_type, interval) {
        (_, 1) => TransitionKind::Appear,
        (DriftType::A, _) => TransitionKind::Replace,
        (DriftType::B, _) => TransitionKind::Stack,
        (DriftType::C2, 2) => TransitionKind::Stack,
        _ => TransitionKind::Recur,
    }
}

fn instance_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Generates the stream: scenes interleaved round-robin, frames drawn from
/// each scene's active concept.
pub fn generate(spec: &DriftStreamSpec) -> Result<GeneratedStream> {
    let concepts = build_concepts(spec)?;
    let timeline = schedule_drift(spec, &concepts)?;
    let names = spec.scene_names();
    let per = spec.per_scene();
    let n_scenes = spec.n_scenes;

    let mut mixtures: Vec<Vec<MixtureModel>> = Vec::with_capacity(n_scenes);
    for (s, intervals) in timeline.scenes.iter().enumerate() {
        mixtures.push(
            intervals
                .iter()
                .map(|iv| concept_mixture(&concepts, s, &iv.events))
                .collect::<Result<_>>()?,
        );
    }

    let mut instances = Vec::with_capacity(spec.n_instances);
    let mut cursor = vec![0usize; n_scenes];
    for local in 0..per {
        for s in 0..n_scenes {
            let intervals = &timeline.scenes[s];
            while intervals[cursor[s]].end <= local {
                cursor[s] += 1;
            }
            let global = (local * n_scenes + s) as u64;
            let frames = mixtures[s][cursor[s]]
                .sample(spec.frames_per_instance, instance_seed(spec.seed, global));
            instances.push(Instance::new(global, names[s].clone(), frames)?);
        }
    }

    let mut drifts = Vec::new();
    for (s, intervals) in timeline.scenes.iter().enumerate() {
        for (i, iv) in intervals.iter().enumerate().skip(1) {
            if iv.start >= iv.end {
                continue;
            }
            drifts.push(DriftAnnotation {
                scene: names[s].clone(),
                at: (iv.start * n_scenes + s) as u64,
                kind: transition_kind(spec.drift_type, i),
            });
        }
    }
    drifts.sort_by_key(|d| d.at);

    Ok(GeneratedStream {
        spec: spec.clone(),
        instances,
        annotations: Annotations { drifts },
        timeline,
        concepts,
    })
}

impl GeneratedStream {
    /// Checks interval partitions, class balance and annotation consistency.
    pub fn check(&self) -> Result<()> {
        let per = self.spec.per_scene();
        for (s, intervals) in self.timeline.scenes.iter().enumerate() {
            let mut expect = 0;
            for iv in intervals {
                if iv.start != expect || iv.end < iv.start {
                    return Err(Error::Spec(format!("scene {s} intervals do not partition")));
                }
                for id in &iv.events {
                    if !self.concepts.pools[s].contains(id) {
                        return Err(Error::Spec(format!(
                            "scene {s} uses event {id} outside its pool"
                        )));
                    }
                }
                expect = iv.end;
            }
            if expect != per {
                return Err(Error::Spec(format!(
                    "scene {s} timeline ends at {expect}, not {per}"
                )));
            }
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(inst.label.as_str()).or_default() += 1;
        }
        if counts.len() != self.spec.n_scenes || counts.values().any(|&c| c != per) {
            return Err(Error::Spec("scenes are not equally represented".into()));
        }
        let expected: usize = self
            .timeline
            .scenes
            .iter()
            .map(|iv| iv.iter().skip(1).filter(|i| i.start < i.end).count())
            .sum();
        if expected != self.annotations.drifts.len() {
            return Err(Error::Spec("annotations disagree with timeline".into()));
        }
        for a in &self.annotations.drifts {
            let inst = self
                .instances
                .get(a.at as usize)
                .ok_or_else(|| Error::Spec(format!("annotation at {} is out of range", a.at)))?;
            if inst.label != a.scene {
                return Err(Error::Spec(format!(
                    "annotation at {} names the wrong scene",
                    a.at
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    i: u64,
    label: String,
    frames: Vec<Vec<f64>>,
}

/// Writes instances as JSON lines `{"i", "label", "frames"}`.
pub fn write_jsonl<W: Write>(instances: &[Instance], mut out: W) -> Result<()> {
    for inst in instances {
        let rec = Record {
            i: inst.id,
            label: inst.label.clone(),
            frames: inst.frames.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON-lines instances. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Instance>> {
    let mut instances = Vec::new();
    let mut dim = None;
    for (n, line) in input.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let rows = rec.frames.len();
        let cols = rec.frames.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(parse("instance has no frames".into()));
        }
        if rec.frames.iter().any(|f| f.len() != cols) {
            return Err(parse("frames have unequal lengths".into()));
        }
        if *dim.get_or_insert(cols) != cols {
            return Err(parse(format!(
                "frame dimension {cols} differs from earlier records ({})",
                dim.unwrap_or(0)
            )));
        }
        let flat: Vec<f64> = rec.frames.into_iter().flatten().collect();
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(parse("non-finite feature value".into()));
        }
        let frames =
            Array2::from_shape_vec((rows, cols), flat).map_err(|e| parse(e.to_string()))?;
        instances.push(Instance::new(rec.i, rec.label, frames)?);
    }
    Ok(instances)
}

pub fn save_jsonl(instances: &[Instance], path: &Path) -> Result<()> {
    write_jsonl(instances, BufWriter::new(File::create(path)?))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Instance>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

impl Annotations {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl DriftStreamSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::tv_divergence;

    fn spec(drift_type: DriftType, scenario: Scenario) -> DriftStreamSpec {
        DriftStreamSpec {
            drift_type,
            scenario,
            n_instances: 1500,
            seed: 42,
            ..DriftStreamSpec::default()
        }
    }

    #[test]
    fn t1_pools_are_disjoint() {
        let c = build_concepts(&spec(DriftType::A, Scenario::T1)).unwrap();
        for a in 0..c.pools.len() {
            for b in (a + 1)..c.pools.len() {
                assert!(c.pools[a].iter().all(|e| !c.pools[b].contains(e)));
            }
        }
    }

    #[test]
    fn t3_scenes_share_group_pools() {
        let c = build_concepts(&spec(DriftType::C1, Scenario::T3)).unwrap();
        assert_eq!(c.pools[0], c.pools[4]);
        assert_ne!(c.pools[0], c.pools[5]);
        assert_eq!(c.pools.iter().filter(|p| **p == c.pools[0]).count(), 5);
        // Over enough seeds some pair in a group activates the same event.
        let shared = (0..20).any(|seed| {
            let c = build_concepts(&DriftStreamSpec {
                seed,
                ..spec(DriftType::C1, Scenario::T3)
            })
            .unwrap();
            (0..5).any(|a| (0..5).any(|b| a != b && c.assigned[a][0].id == c.assigned[b][0].id))
        });
        assert!(shared);
    }

    #[test]
    fn concepts_are_deterministic() {
        let s = spec(DriftType::B, Scenario::T2);
        assert_eq!(build_concepts(&s).unwrap(), build_concepts(&s).unwrap());
    }

    #[test]
    fn base_shapes() {
        let c = build_concepts(&spec(DriftType::A, Scenario::T1)).unwrap();
        for b in &c.bases {
            assert!((2..=4).contains(&b.len()));
            for comp in b.components() {
                assert!(comp.mean.iter().all(|m| (-5.0..5.0).contains(m)));
                assert!(comp.variances.iter().all(|v| (0.5..1.5).contains(v)));
            }
        }
    }

    #[test]
    fn replacement_schedule() {
        let s = spec(DriftType::A, Scenario::T1);
        let c = build_concepts(&s).unwrap();
        let t = schedule_drift(&s, &c).unwrap();
        for intervals in &t.scenes {
            let e1 = c.assigned[0].len();
            assert!(e1 >= 1);
            let first = intervals[1].events[0];
            let holding: Vec<_> = intervals
                .iter()
                .filter(|i| i.events.contains(&first))
                .collect();
            assert_eq!(holding.len(), 1);
            assert!(intervals.iter().all(|i| i.events.len() <= 1));
        }
    }

    #[test]
    fn recurring_schedule() {
        let s = DriftStreamSpec {
            drift_points: Some(vec![0.25, 0.5, 0.75]),
            ..spec(DriftType::C1, Scenario::T2)
        };
        let c = build_concepts(&s).unwrap();
        let t = schedule_drift(&s, &c).unwrap();
        for iv in &t.scenes {
            assert_eq!(iv[1].events, iv[3].events);
            assert_eq!(iv[0].events, iv[2].events);
            assert!(!iv[1].events.is_empty());
        }
    }

    #[test]
    fn stacking_schedule() {
        for dt in [DriftType::B, DriftType::C2] {
            let s = spec(dt, Scenario::T1);
            let c = build_concepts(&s).unwrap();
            let t = schedule_drift(&s, &c).unwrap();
            for iv in &t.scenes {
                if dt == DriftType::B {
                    assert!(iv
                        .windows(2)
                        .all(|w| w[0].events.len() <= w[1].events.len()));
                } else {
                    assert_eq!(iv[2].events.len(), 2);
                    assert_eq!(iv[3].events, iv[1].events);
                    assert_eq!(iv[4].events, iv[2].events);
                }
            }
        }
    }

    #[test]
    fn pools_too_small_is_a_spec_error() {
        let s = DriftStreamSpec {
            drift_points: Some(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            event_gain_range: [0.05, 0.1],
            ..spec(DriftType::A, Scenario::T2)
        };
        assert!(matches!(build_concepts(&s), Err(Error::Spec(_))));
        let s = DriftStreamSpec {
            drift_points: Some(vec![0.25, 0.5, 0.75]),
            ..spec(DriftType::B, Scenario::T1)
        };
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(DriftType::A, Scenario::T1);
        s.n_instances = 1501;
        assert!(s.validate().is_err());
        let mut s = spec(DriftType::A, Scenario::T1);
        s.drift_points = Some(vec![0.5, 0.4]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn equal_class_distribution() {
        let g = generate(&DriftStreamSpec {
            n_instances: 12_000,
            frames_per_instance: 2,
            ..DriftStreamSpec::default()
        })
        .unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for i in &g.instances {
            *counts.entry(&i.label).or_default() += 1;
        }
        assert_eq!(counts.len(), 15);
        assert!(counts.values().all(|&c| c == 800));
        g.check().unwrap();
    }

    #[test]
    fn every_type_and_scenario_passes_checks() {
        for dt in DriftType::ALL {
            for sc in Scenario::ALL {
                let g = generate(&DriftStreamSpec {
                    frames_per_instance: 3,
                    ..spec(dt, sc)
                })
                .unwrap();
                g.check().unwrap();
                for (s, intervals) in g.timeline.scenes.iter().enumerate() {
                    for iv in intervals {
                        for e in &iv.events {
                            let gain = g.concepts.assigned[s]
                                .iter()
                                .find(|x| x.id == *e)
                                .unwrap()
                                .gain;
                            assert!((0.2..=0.4).contains(&gain));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn recurrences_use_identical_mixtures() {
        let s = spec(DriftType::C1, Scenario::T1);
        let c = build_concepts(&s).unwrap();
        let t = schedule_drift(&s, &c).unwrap();
        for (scene, iv) in t.scenes.iter().enumerate() {
            let a = concept_mixture(&c, scene, &iv[1].events).unwrap();
            let b = concept_mixture(&c, scene, &iv[3].events).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pre_drift_data_is_stationary() {
        let g = generate(&DriftStreamSpec {
            n_instances: 15 * 800,
            ..spec(DriftType::A, Scenario::T1)
        })
        .unwrap();
        // The first concept of every scene spans 200 instances; compare 10
        // instances (200 values) from each half.
        let column = |range: std::ops::Range<usize>| -> Vec<f64> {
            g.instances
                .iter()
                .filter(|i| i.label == "scene00")
                .skip(range.start)
                .take(range.len())
                .flat_map(|i| i.frames.column(0).to_vec())
                .collect()
        };
        let first = column(0..10);
        let second = column(100..110);
        assert!(tv_divergence(&first, &second).unwrap() < 0.15);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(DriftType::C2, Scenario::T3);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.annotations, b.annotations);
    }

    #[test]
    fn annotation_kinds() {
        let g = generate(&DriftStreamSpec {
            frames_per_instance: 1,
            ..spec(DriftType::C2, Scenario::T1)
        })
        .unwrap();
        let kinds: Vec<TransitionKind> = g
            .annotations
            .drifts
            .iter()
            .filter(|d| d.scene == "scene00")
            .map(|d| d.kind)
            .collect();
        assert_eq!(kinds[0], TransitionKind::Appear);
        assert_eq!(kinds[1], TransitionKind::Stack);
        assert!(kinds[2..].iter().all(|k| *k == TransitionKind::Recur));
    }

    #[test]
    fn jsonl_round_trip() {
        let g = generate(&DriftStreamSpec {
            frames_per_instance: 3,
            ..spec(DriftType::A, Scenario::T1)
        })
        .unwrap();
        let mut buf = Vec::new();
        write_jsonl(&g.instances, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, g.instances);
        let mut again = Vec::new();
        write_jsonl(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let text = "{\"i\":0,\"label\":\"a\",\"frames\":[[1.0,2.0]]}\n\n{\"i\":1,\"label\":\"a\",\"frames\":[[1.0]]}\n";
        match read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match read_jsonl("not json\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let ragged = "{\"i\":0,\"label\":\"a\",\"frames\":[[1.0,2.0],[1.0]]}";
        assert!(matches!(
            read_jsonl(ragged.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(DriftType::C2, Scenario::T3);
        assert_eq!(
            DriftStreamSpec::from_json(&s.to_json().unwrap()).unwrap(),
            s
        );
        let partial = DriftStreamSpec::from_json(r#"{"drift_type":"B","seed":3}"#).unwrap();
        assert_eq!(partial.n_scenes, 15);
        assert_eq!(partial.drift_type, DriftType::B);
    }
}
