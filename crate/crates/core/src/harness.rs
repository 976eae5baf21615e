//! Prequential evaluation, hyperparameter sweeps and report output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierState, Instance};
use crate::cmgmm::AdaptConfig;
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::kd3::Kd3Config;
use crate::streamgen::{DriftType, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub kd3: Kd3Config,
    pub adapt: AdaptConfig,
    /// Settings for the initial per-scene fits.
    pub em: EmConfig,
    /// Instances per evaluation batch.
    pub batch: usize,
    /// Share of each scene's instances used for initial training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kd3: Kd3Config::default(),
            adapt: AdaptConfig::default(),
            em: EmConfig::default(),
            batch: 100,
            train_fraction: 0.1,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 0.5), got {}",
                self.train_fraction
            )));
        }
        self.kd3.validate()?;
        self.adapt.validate()?;
        self.em.validate()
    }

    /// The configuration with every EM seed derived from `seed`.
    fn seeded(&self) -> Self {
        let mut cfg = self.clone();
        cfg.em.seed = self.seed;
        cfg.adapt.em.seed = self.seed.wrapping_add(1);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    /// Id of the instance whose step triggered the adaptation.
    pub id: u64,
    pub scene: String,
    /// Index of the evaluation batch the step belongs to.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrequentialReport {
    pub config: RunConfig,
    pub train_instances: usize,
    pub eval_instances: usize,
    pub mean_accuracy: f64,
    pub window_accuracy: Vec<f64>,
    /// Instances in each window; all equal `batch` except possibly the last.
    pub window_sizes: Vec<usize>,
    pub adaptations_total: usize,
    pub adaptations_per_scene: BTreeMap<String, usize>,
    pub adaptations: Vec<AdaptationRecord>,
    pub components_e1: BTreeMap<String, usize>,
    pub components_en: BTreeMap<String, usize>,
    /// Not serialized so that reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl PrequentialReport {
    pub fn mean_e1(&self) -> f64 {
        mean(self.components_e1.values())
    }

    pub fn mean_en(&self) -> f64 {
        mean(self.components_en.values())
    }

    /// Adaptation events per window.
    pub fn window_adaptations(&self) -> Vec<usize> {
        let mut counts = vec![0; self.window_accuracy.len()];
        for a in &self.adaptations {
            counts[a.batch] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn mean<'a>(xs: impl ExactSizeIterator<Item = &'a usize>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.map(|&x| x as f64).sum::<f64>() / n as f64
}

/// Splits off the first `train_fraction` of every scene's instances.
///
/// Returns the per-scene training frames and the remaining instances in
/// stream order.
pub fn split_training(
    stream: &[Instance],
    train_fraction: f64,
) -> Result<(BTreeMap<String, Array2<f64>>, Vec<&Instance>)> {
    let mut per_scene: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in stream {
        *per_scene.entry(inst.label.as_str()).or_default() += 1;
    }
    let quota: BTreeMap<&str, usize> = per_scene
        .iter()
        .map(|(k, &n)| (*k, (train_fraction * n as f64).round() as usize))
        .collect();
    if let Some((scene, _)) = quota.iter().find(|(_, &q)| q == 0) {
        return Err(Error::InsufficientData(format!(
            "scene `{scene}` has no training instances at train_fraction {train_fraction}"
        )));
    }
    let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
    let mut train_blocks: BTreeMap<String, Vec<ArrayView2<'_, f64>>> = BTreeMap::new();
    let mut eval = Vec::new();
    for inst in stream {
        let t = taken.entry(inst.label.as_str()).or_default();
        if *t < quota[inst.label.as_str()] {
            *t += 1;
            train_blocks
                .entry(inst.label.clone())
                .or_default()
                .push(inst.frames.view());
        } else {
            eval.push(inst);
        }
    }
    let mut training = BTreeMap::new();
    for (scene, blocks) in train_blocks {
        let frames = concatenate(Axis(0), &blocks).map_err(|_| Error::DimensionMismatch {
            expected: blocks[0].ncols(),
            found: blocks
                .iter()
                .map(|b| b.ncols())
                .find(|&c| c != blocks[0].ncols())
                .unwrap_or(0),
        })?;
        training.insert(scene, frames);
    }
    Ok((training, eval))
}

/// Trains on each scene's prefix, then runs test-then-train over the rest.
pub fn run_prequential(stream: &[Instance], cfg: &RunConfig) -> Result<PrequentialReport> {
    let started = Instant::now();
    cfg.validate()?;
    let cfg = cfg.seeded();
    let (training, eval) = split_training(stream, cfg.train_fraction)?;
    if eval.len() < 2 * cfg.batch {
        return Err(Error::InsufficientData(format!(
            "need at least {} evaluation instances for two batches, got {}",
            2 * cfg.batch,
            eval.len()
        )));
    }
    let mut state =
        ClassifierState::train_initial(&training, &cfg.em, cfg.adapt.clone(), cfg.kd3.clone())?;
    let components_e1 = state.component_counts();

    let n_windows = eval.len().div_ceil(cfg.batch);
    let mut hits = vec![0usize; n_windows];
    let mut window_sizes = vec![0usize; n_windows];
    let mut adaptations = Vec::new();
    let mut adaptations_per_scene: BTreeMap<String, usize> =
        training.keys().map(|k| (k.clone(), 0)).collect();
    for (i, inst) in eval.iter().enumerate() {
        let b = i / cfg.batch;
        let out = state.process(inst)?;
        window_sizes[b] += 1;
        hits[b] += usize::from(out.correct);
        for scene in out.adapted {
            *adaptations_per_scene.entry(scene.clone()).or_default() += 1;
            adaptations.push(AdaptationRecord {
                id: inst.id,
                scene,
                batch: b,
            });
        }
    }
    let total_hits: usize = hits.iter().sum();
    Ok(PrequentialReport {
        train_instances: stream.len() - eval.len(),
        eval_instances: eval.len(),
        mean_accuracy: total_hits as f64 / eval.len() as f64,
        window_accuracy: hits
            .iter()
            .zip(&window_sizes)
            .map(|(&h, &n)| h as f64 / n as f64)
            .collect(),
        window_sizes,
        adaptations_total: adaptations.len(),
        adaptations_per_scene,
        adaptations,
        components_e1,
        components_en: state.component_counts(),
        config: cfg,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// A named stream with optional provenance, as fed to [`sweep`].
#[derive(Debug, Clone)]
pub struct SweepStream {
    pub name: String,
    pub drift_type: Option<DriftType>,
    pub scenario: Option<Scenario>,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    On,
    Off,
    Both,
}

impl PruneMode {
    fn values(self) -> Vec<bool> {
        match self {
            PruneMode::On => vec![true],
            PruneMode::Off => vec![false],
            PruneMode::Both => vec![true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub windows: Vec<usize>,
    pub prune: PruneMode,
    /// Base seeds; every row derives its own seed from one of them.
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.alphas.len()
            * self.betas.len()
            * self.windows.len()
            * self.prune.values().len()
            * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identity of one sweep row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub stream: String,
    pub drift_type: Option<DriftType>,
    pub scenario: Option<Scenario>,
    pub alpha: f64,
    pub beta: f64,
    pub window: usize,
    pub pruning: bool,
    pub base_seed: u64,
}

impl RowKey {
    /// Seed of this row: a hash of the key, so rows are decorrelated but
    /// reproducible.
    pub fn run_seed(&self) -> u64 {
        let text = format!(
            "{}|{:?}|{:?}|{}|{}|{}|{}|{}",
            self.stream,
            self.drift_type,
            self.scenario,
            self.alpha,
            self.beta,
            self.window,
            self.pruning,
            self.base_seed
        );
        let digest = Sha256::digest(text.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub key: RowKey,
    pub outcome: std::result::Result<PrequentialReport, String>,
}

/// Runs every stream at every grid point in parallel. A failing row records
/// its error and does not stop the others.
pub fn sweep(streams: &[SweepStream], grid: &SweepGrid, base: &RunConfig) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || streams.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep grid and stream set must be non-empty".into(),
        ));
    }
    let mut jobs = Vec::with_capacity(grid.len() * streams.len());
    for (si, s) in streams.iter().enumerate() {
        for &alpha in &grid.alphas {
            for &beta in &grid.betas {
                for &window in &grid.windows {
                    for pruning in grid.prune.values() {
                        for &base_seed in &grid.seeds {
                            jobs.push((
                                si,
                                RowKey {
                                    stream: s.name.clone(),
                                    drift_type: s.drift_type,
                                    scenario: s.scenario,
                                    alpha,
                                    beta,
                                    window,
                                    pruning,
                                    base_seed,
                                },
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(si, key)| {
            let mut cfg = base.clone();
            cfg.kd3.alpha = key.alpha;
            cfg.kd3.beta = key.beta;
            cfg.kd3.window = key.window;
            cfg.adapt.pruning_enabled = key.pruning;
            cfg.seed = key.run_seed();
            let outcome = run_prequential(&streams[si].instances, &cfg).map_err(|e| e.to_string());
            SweepRow { key, outcome }
        })
        .collect())
}

fn opt_label<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(String::new, T::to_string)
}

#[derive(Serialize)]
struct LongRow<'a> {
    stream: &'a str,
    drift_type: String,
    scenario: String,
    alpha: f64,
    beta: f64,
    window: usize,
    pruning: bool,
    base_seed: u64,
    run_seed: u64,
    mean_accuracy: Option<f64>,
    adaptations: Option<usize>,
    mean_e1: Option<f64>,
    mean_en: Option<f64>,
    error: Option<&'a str>,
}

/// One CSV line per sweep row.
pub fn write_rows_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        let k = &row.key;
        let ok = row.outcome.as_ref().ok();
        w.serialize(LongRow {
            stream: &k.stream,
            drift_type: opt_label(&k.drift_type),
            scenario: opt_label(&k.scenario),
            alpha: k.alpha,
            beta: k.beta,
            window: k.window,
            pruning: k.pruning,
            base_seed: k.base_seed,
            run_seed: k.run_seed(),
            mean_accuracy: ok.map(|r| r.mean_accuracy),
            adaptations: ok.map(|r| r.adaptations_total),
            mean_e1: ok.map(PrequentialReport::mean_e1),
            mean_en: ok.map(PrequentialReport::mean_en),
            error: row.outcome.as_ref().err().map(String::as_str),
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::RejectedInput(format!("csv: {other:?}")),
    }
}

/// Table layout: one line per (drift type, grid point), with mean accuracy
/// and mean adaptation count per scenario column, averaged over seeds and
/// streams. Failed rows are left out of the means and counted separately.
pub fn write_table_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut scenarios: Vec<String> = rows.iter().map(|r| opt_label(&r.key.scenario)).collect();
    scenarios.sort();
    scenarios.dedup();

    type LineKey = (String, u64, u64, usize, bool);
    let mut cells: BTreeMap<LineKey, BTreeMap<String, (f64, f64, usize)>> = BTreeMap::new();
    let mut failures: BTreeMap<LineKey, usize> = BTreeMap::new();
    let mut order: Vec<LineKey> = Vec::new();
    for row in rows {
        let k = &row.key;
        let line: LineKey = (
            opt_label(&k.drift_type),
            k.alpha.to_bits(),
            k.beta.to_bits(),
            k.window,
            k.pruning,
        );
        if !cells.contains_key(&line) {
            order.push(line.clone());
        }
        let cell = cells
            .entry(line.clone())
            .or_default()
            .entry(opt_label(&k.scenario))
            .or_default();
        match &row.outcome {
            Ok(r) => {
                cell.0 += r.mean_accuracy;
                cell.1 += r.adaptations_total as f64;
                cell.2 += 1;
            }
            Err(_) => *failures.entry(line).or_default() += 1,
        }
    }

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "drift_type".to_string(),
        "alpha".into(),
        "beta".into(),
        "window".into(),
        "pruning".into(),
    ];
    for s in &scenarios {
        let s = if s.is_empty() { "all" } else { s };
        header.push(format!("accuracy_{s}"));
        header.push(format!("adaptations_{s}"));
    }
    header.push("failed_rows".into());
    w.write_record(&header).map_err(csv_error)?;
    for line in order {
        let (dt, a, b, win, p) = &line;
        let mut rec = vec![
            dt.clone(),
            f64::from_bits(*a).to_string(),
            f64::from_bits(*b).to_string(),
            win.to_string(),
            p.to_string(),
        ];
        for s in &scenarios {
            match cells[&line].get(s) {
                Some(&(acc, ad, n)) if n > 0 => {
                    rec.push((acc / n as f64).to_string());
                    rec.push((ad / n as f64).to_string());
                }
                _ => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
        }
        rec.push(failures.get(&line).copied().unwrap_or(0).to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BatchRow {
    batch: usize,
    window_accuracy: f64,
    cumulative_accuracy: f64,
    adaptations: usize,
}

/// One CSV line per evaluation batch.
pub fn write_batch_csv<W: Write>(report: &PrequentialReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let adapt = report.window_adaptations();
    let mut hits = 0.0;
    let mut seen = 0usize;
    for (b, (&acc, &n)) in report
        .window_accuracy
        .iter()
        .zip(&report.window_sizes)
        .enumerate()
    {
        hits += acc * n as f64;
        seen += n;
        w.serialize(BatchRow {
            batch: b,
            window_accuracy: acc,
            cumulative_accuracy: hits / seen as f64,
            adaptations: adapt[b],
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Output format for [`report_emit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn report_emit(report: &PrequentialReport, format: ReportFormat, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Json => {
            out.write_all(report.to_json()?.as_bytes())?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        ReportFormat::Csv => write_batch_csv(report, out)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streamgen::{generate, DriftStreamSpec};

    fn small_stream(drift_type: DriftType, seed: u64) -> Vec<Instance> {
        generate(&DriftStreamSpec {
            drift_type,
            n_scenes: 4,
            n_instances: 4 * 150,
            frames_per_instance: 10,
            dim: 3,
            seed,
            ..DriftStreamSpec::default()
        })
        .unwrap()
        .instances
    }

    fn cfg() -> RunConfig {
        RunConfig {
            batch: 50,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig { batch: 0, ..cfg() }.validate().is_err());
        assert!(RunConfig {
            train_fraction: 0.5,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            train_fraction: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn training_split_is_per_scene() {
        let s = small_stream(DriftType::A, 1);
        let (training, eval) = split_training(&s, 0.1).unwrap();
        assert_eq!(training.len(), 4);
        assert!(training.values().all(|f| f.nrows() == 15 * 10));
        assert_eq!(eval.len(), 600 - 60);
        assert!(eval.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn report_identities() {
        let s = small_stream(DriftType::B, 2);
        let r = run_prequential(&s, &cfg()).unwrap();
        assert_eq!(r.window_accuracy.len(), r.eval_instances.div_ceil(50));
        assert!((0.0..=1.0).contains(&r.mean_accuracy));
        assert!(r.window_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
        let weighted: f64 = r
            .window_accuracy
            .iter()
            .zip(&r.window_sizes)
            .map(|(a, &n)| a * n as f64)
            .sum::<f64>()
            / r.eval_instances as f64;
        assert!((weighted - r.mean_accuracy).abs() < 1e-12);
        assert_eq!(
            r.adaptations_total,
            r.adaptations_per_scene.values().sum::<usize>()
        );
        assert_eq!(
            r.window_adaptations().iter().sum::<usize>(),
            r.adaptations_total
        );
    }

    #[test]
    fn separable_scenes_score_perfectly() {
        let mut s = Vec::new();
        for i in 0..400u64 {
            let c = (i % 2) as f64 * 100.0;
            let frames = Array2::from_shape_fn((5, 2), |(r, j)| {
                c + ((i * 7 + r as u64 * 3 + j as u64) % 11) as f64 * 0.1
            });
            s.push(Instance::new(i, if i % 2 == 0 { "low" } else { "high" }, frames).unwrap());
        }
        let r = run_prequential(&s, &cfg()).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert!(r.window_accuracy.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn too_short_stream_is_rejected() {
        let s = small_stream(DriftType::A, 3);
        let short = &s[..100];
        assert!(matches!(
            run_prequential(short, &cfg()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn labels_are_used_only_after_prediction() {
        // Predicting every instance with the label hidden, then processing it,
        // must give the accuracy the harness reports.
        let s = small_stream(DriftType::C1, 4);
        let c = cfg().seeded();
        let r = run_prequential(&s, &cfg()).unwrap();
        let (training, eval) = split_training(&s, c.train_fraction).unwrap();
        let mut st =
            ClassifierState::train_initial(&training, &c.em, c.adapt.clone(), c.kd3.clone())
                .unwrap();
        let mut hits = 0;
        for inst in eval {
            let (blind, _) = st.predict(inst.frames.view()).unwrap();
            hits += usize::from(blind == inst.label);
            st.process(inst).unwrap();
        }
        assert_eq!(hits as f64 / r.eval_instances as f64, r.mean_accuracy);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = small_stream(DriftType::A, 5);
        let a = run_prequential(&s, &cfg()).unwrap();
        let b = run_prequential(&s, &cfg()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn json_and_csv_outputs() {
        let s = small_stream(DriftType::A, 6);
        let r = run_prequential(&s, &cfg()).unwrap();
        let back = PrequentialReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(
            PrequentialReport {
                wall_time_secs: 0.0,
                ..r.clone()
            },
            back
        );
        let mut buf = Vec::new();
        write_batch_csv(&r, &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let rows: Vec<csv::StringRecord> = rd.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), r.window_accuracy.len());
        let last: f64 = rows.last().unwrap()[2].parse().unwrap();
        assert!((last - r.mean_accuracy).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        report_emit(&r, ReportFormat::Json, &dir.path().join("r.json")).unwrap();
        report_emit(&r, ReportFormat::Csv, &dir.path().join("r.csv")).unwrap();
        let missing = dir.path().join("no/such/dir/r.json");
        assert!(matches!(
            report_emit(&r, ReportFormat::Json, &missing),
            Err(Error::Io(_))
        ));
    }

    fn sweep_streams() -> Vec<SweepStream> {
        Scenario::ALL
            .iter()
            .map(|&sc| SweepStream {
                name: format!("A-{sc}"),
                drift_type: Some(DriftType::A),
                scenario: Some(sc),
                instances: generate(&DriftStreamSpec {
                    scenario: sc,
                    n_scenes: 3,
                    n_instances: 3 * 120,
                    frames_per_instance: 5,
                    dim: 2,
                    seed: 9,
                    ..DriftStreamSpec::default()
                })
                .unwrap()
                .instances,
            })
            .collect()
    }

    #[test]
    fn sweep_cardinality_isolation_and_determinism() {
        let streams = sweep_streams();
        let grid = SweepGrid {
            alphas: vec![0.001, 0.005, 0.01, 0.05, 0.1],
            betas: vec![0.0001],
            windows: vec![45],
            prune: PruneMode::On,
            seeds: vec![1],
        };
        let base = RunConfig {
            batch: 30,
            ..RunConfig::default()
        };
        let rows = sweep(&streams, &grid, &base).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows.iter().all(|r| r.outcome.is_ok()));

        let again = sweep(&streams, &grid, &base).unwrap();
        let csv_of = |rows: &[SweepRow]| {
            let mut a = Vec::new();
            write_table_csv(rows, &mut a).unwrap();
            let mut b = Vec::new();
            write_rows_csv(rows, &mut b).unwrap();
            (a, b)
        };
        assert_eq!(csv_of(&rows), csv_of(&again));
        let (table, _) = csv_of(&rows);
        let text = String::from_utf8(table).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().next().unwrap().contains("accuracy_T2"));

        // Sequential execution of the same rows gives the same reports.
        for row in &rows {
            let si = streams
                .iter()
                .position(|s| s.name == row.key.stream)
                .unwrap();
            let mut c = base.clone();
            c.kd3.alpha = row.key.alpha;
            c.kd3.beta = row.key.beta;
            c.seed = row.key.run_seed();
            let solo = run_prequential(&streams[si].instances, &c).unwrap();
            assert_eq!(
                solo.to_json().unwrap(),
                row.outcome.as_ref().unwrap().to_json().unwrap()
            );
        }

        // An invalid grid point fails alone.
        let bad = SweepGrid {
            alphas: vec![0.05, 0.00001],
            ..grid
        };
        let rows = sweep(&streams[..1], &bad, &base).unwrap();
        assert_eq!(rows.iter().filter(|r| r.outcome.is_err()).count(), 1);
        let mut buf = Vec::new();
        write_table_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains(",1\n"));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let grid = SweepGrid {
            alphas: vec![],
            betas: vec![0.001],
            windows: vec![45],
            prune: PruneMode::Both,
            seeds: vec![0],
        };
        assert!(sweep(&sweep_streams(), &grid, &RunConfig::default()).is_err());
    }

    #[test]
    fn row_seeds_differ_by_key() {
        let k = RowKey {
            stream: "s".into(),
            drift_type: None,
            scenario: None,
            alpha: 0.1,
            beta: 0.001,
            window: 45,
            pruning: true,
            base_seed: 0,
        };
        let other = RowKey {
            alpha: 0.05,
            ..k.clone()
        };
        assert_ne!(k.run_seed(), other.run_seed());
        assert_eq!(k.run_seed(), k.clone().run_seed());
    }
}
