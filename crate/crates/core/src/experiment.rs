//! Experiment configuration, orchestration, and persistence.
//!
//! A run directory looks like
//!
//! ```text
//! manifest.json
//! csv_schema.md
//! errors_<dim>.csv            mean and std across repeats
//! repeat_000/
//!     reference.json          reference ensembles, one per snapshot time
//!     snapshots.json          raw measurements and fitted densities
//!     snapshots_raw.csv
//!     charest_results.json    per-step records
//!     gridpf_results.json
//!     errors_<dim>.csv        per-estimator series of this repeat
//! plots/
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::charest::{CharConfig, CharEstimator, CharStepRecord};
use crate::error::{Error, Result};
use crate::gmd::Gmd;
use crate::gridpf::{Axis, Grid, GridPf, PfConfig, PfStepRecord};
use crate::metrics::{
    average_runs, l1_marginal_error, write_aggregate_csv, write_series_csv, ErrorSeries,
    Marginal1d, SeriesLabel, QUAD_NODES,
};
use crate::models::ModelSpec;
use crate::ode::IntegratorConfig;
use crate::reference::{
    generate_snapshots, simulate_reference, CellEnsemble, NoiseModel, SnapshotPlan, SnapshotSeries,
};
use crate::rng::{repeat_seed, substream, Purpose};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "csv_schema.md";
const REFERENCE_FILE: &str = "reference.json";
const SNAPSHOTS_FILE: &str = "snapshots.json";
const SNAPSHOTS_CSV: &str = "snapshots_raw.csv";

const CSV_SCHEMA: &str = include_str!("../configs/csv_schema.md");

const BUILTINS: &[(&str, &str)] = &[
    ("bench2d", include_str!("../configs/bench2d.toml")),
    (
        "bench3d_clean",
        include_str!("../configs/bench3d_clean.toml"),
    ),
    (
        "bench3d_noisy",
        include_str!("../configs/bench3d_noisy.toml"),
    ),
];

/// Relative slack when counting whole steps in the horizon.
const STEP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Bench2d,
    Bench3dClean,
    Bench3dNoisy,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Charest,
    Gridpf,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Charest => "charest",
            EstimatorKind::Gridpf => "gridpf",
        }
    }

    fn results_file(self) -> String {
        format!("{}_results.json", self.name())
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "charest" => Ok(EstimatorKind::Charest),
            "gridpf" => Ok(EstimatorKind::Gridpf),
            other => Err(Error::Config(format!(
                "unknown estimator {other:?}, expected charest or gridpf"
            ))),
        }
    }
}

/// True initial NDF and the offset estimate handed to the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub true_mean: Vec<f64>,
    pub true_cov: Vec<Vec<f64>>,
    /// Elementwise factor on the true mean.
    pub estimate_mean_factor: Vec<f64>,
    /// Scalar factor on the true covariance.
    pub estimate_cov_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub dt: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub n_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSpec {
    pub n_meas: usize,
    pub n_gmd: usize,
    pub em_max_iter: usize,
    pub noise: NoiseModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPfSpec {
    #[serde(flatten)]
    pub filter: PfConfig,
    pub grid: Vec<Axis>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Run directory; the CLI `--out` flag takes precedence.
    pub dir: Option<PathBuf>,
    /// Times at which density panels are drawn.
    pub panel_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub n_repeats: usize,
    pub estimators: Vec<EstimatorKind>,
    pub model: ModelSpec,
    pub initial: InitialSpec,
    pub time: TimeSpec,
    pub reference: ReferenceSpec,
    pub snapshots: SnapshotSpec,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub charest: Option<CharConfig>,
    #[serde(default)]
    pub gridpf: Option<GridPfSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTINS.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTINS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::Config(format!(
                "no builtin config {name:?}; available: {}",
                Self::builtin_names().join(", ")
            ))
        })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, or a builtin if `spec` names one and is not an
    /// existing path.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.exists() {
            let text = fs::read_to_string(path)?;
            return Self::from_toml(&text).map_err(|e| {
                let msg = match e.root() {
                    Error::Config(m) => m.clone(),
                    other => other.to_string(),
                };
                Error::Config(format!("{}: {msg}", path.display()))
            });
        }
        if BUILTINS.iter().any(|(n, _)| *n == spec) {
            return Self::builtin(spec);
        }
        Err(Error::Config(format!(
            "{spec:?} is neither a config file nor a builtin ({})",
            Self::builtin_names().join(", ")
        )))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(Error::Config(msg));
        self.model
            .validate()
            .map_err(|e| Error::Config(format!("model: {}", e.root())))?;
        let d = self.model.state_dim();
        if self.n_repeats == 0 {
            return cfg_err("n_repeats must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return cfg_err("no estimators selected".into());
        }
        let init = &self.initial;
        if init.true_mean.len() != d
            || init.estimate_mean_factor.len() != d
            || init.true_cov.len() != d
            || init.true_cov.iter().any(|r| r.len() != d)
        {
            return cfg_err(format!("initial NDF must be {d}-dimensional"));
        }
        if !(init.estimate_cov_factor > 0.0) {
            return cfg_err("estimate_cov_factor must be positive".into());
        }
        self.true_n0()
            .and(self.estimate_n0())
            .map_err(|e| Error::Config(format!("initial NDF: {}", e.root())))?;
        let TimeSpec { dt, horizon } = self.time;
        if !(dt > 0.0 && dt.is_finite()) {
            return cfg_err(format!("dt must be positive, got {dt}"));
        }
        if !(horizon >= dt && horizon.is_finite()) {
            return cfg_err(format!("horizon {horizon} must be at least dt = {dt}"));
        }
        if self.reference.n_cells == 0 {
            return cfg_err("reference.n_cells must be positive".into());
        }
        let s = &self.snapshots;
        if s.n_meas == 0 || s.n_meas > self.reference.n_cells {
            return cfg_err(format!(
                "snapshots.n_meas must lie in 1..={}",
                self.reference.n_cells
            ));
        }
        if s.n_gmd == 0 || s.n_gmd > s.n_meas || s.em_max_iter == 0 {
            return cfg_err("snapshots need 1 <= n_gmd <= n_meas and em_max_iter >= 1".into());
        }
        s.noise.validate()?;
        self.integrator.validate()?;
        for &e in &self.estimators {
            match e {
                EstimatorKind::Charest => self
                    .charest
                    .as_ref()
                    .ok_or_else(|| Error::Config("charest selected but [charest] missing".into()))?
                    .validate(self.model.output_dim())?,
                EstimatorKind::Gridpf => {
                    let g = self.gridpf.as_ref().ok_or_else(|| {
                        Error::Config("gridpf selected but [gridpf] missing".into())
                    })?;
                    g.filter.validate()?;
                    if g.grid.len() != d {
                        return cfg_err(format!("gridpf.grid needs {d} axes"));
                    }
                    Grid::new(g.grid.clone())?;
                }
            }
        }
        let end = *self.times().last().expect("at least one time");
        if let Some(t) = self
            .output
            .panel_times
            .iter()
            .find(|t| !(**t >= 0.0 && **t <= end + STEP_SLACK))
        {
            return cfg_err(format!("panel time {t} outside [0, {end}]"));
        }
        Ok(())
    }

    /// Snapshot times `k * dt` for every whole step inside the horizon,
    /// starting at 0.
    pub fn times(&self) -> Vec<f64> {
        let steps = (self.time.horizon / self.time.dt * (1.0 + STEP_SLACK)).floor() as usize;
        (0..=steps).map(|k| k as f64 * self.time.dt).collect()
    }

    pub fn true_n0(&self) -> Result<Gmd> {
        let init = &self.initial;
        let d = init.true_mean.len();
        let cov = DMatrix::from_fn(d, d, |i, j| init.true_cov[i][j]);
        Gmd::single(DVector::from_vec(init.true_mean.clone()), cov)
    }

    pub fn estimate_n0(&self) -> Result<Gmd> {
        let init = &self.initial;
        let d = init.true_mean.len();
        let mean = DVector::from_fn(d, |i, _| init.true_mean[i] * init.estimate_mean_factor[i]);
        let cov = DMatrix::from_fn(d, d, |i, j| init.true_cov[i][j] * init.estimate_cov_factor);
        Gmd::single(mean, cov)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn snapshot_plan(&self) -> SnapshotPlan {
        SnapshotPlan {
            n_meas: self.snapshots.n_meas,
            noise: self.snapshots.noise,
            n_gmd: self.snapshots.n_gmd,
            em_max_iter: self.snapshots.em_max_iter,
        }
    }

    fn gridpf_grid(&self) -> Result<Grid> {
        let spec = self
            .gridpf
            .as_ref()
            .ok_or_else(|| Error::Config("missing [gridpf] section".into()))?;
        Grid::new(spec.grid.clone())
    }
}

/// Reference ensembles and snapshots of one repeat.
#[derive(Debug, Clone)]
pub struct RepeatData {
    pub index: usize,
    pub ensembles: Vec<CellEnsemble>,
    pub snapshots: SnapshotSeries,
}

pub fn simulate_repeat(cfg: &ExperimentConfig, index: usize) -> Result<RepeatData> {
    let times = cfg.times();
    let ensembles = simulate_reference(
        &cfg.model,
        &cfg.true_n0()?,
        cfg.reference.n_cells,
        &times,
        &cfg.integrator,
        &mut substream(cfg.seed, index as u64, Purpose::Reference),
    )
    .map_err(|e| e.in_stage("reference simulation"))?;
    let snapshots = generate_snapshots(
        &ensembles,
        &cfg.model,
        &cfg.snapshot_plan(),
        &mut substream(cfg.seed, index as u64, Purpose::Snapshots),
    )
    .map_err(|e| e.in_stage("snapshot generation"))?;
    Ok(RepeatData {
        index,
        ensembles,
        snapshots,
    })
}

/// Grid filter records together with the grid they live on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPfResults {
    pub grid: Grid,
    pub records: Vec<PfStepRecord>,
}

#[derive(Debug, Clone)]
pub enum EstimatorRecords {
    Charest(Vec<CharStepRecord>),
    Gridpf(GridPfResults),
}

impl EstimatorRecords {
    pub fn len(&self) -> usize {
        match self {
            EstimatorRecords::Charest(r) => r.len(),
            EstimatorRecords::Gridpf(r) => r.records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Estimated marginal along state coordinate `dim` at record `k`.
    pub fn marginal(&self, k: usize, dim: usize) -> Marginal1d {
        match self {
            EstimatorRecords::Charest(r) => Marginal1d::Mixture(r[k].marginals[dim].clone()),
            EstimatorRecords::Gridpf(r) => {
                let axis = r.grid.axes()[dim];
                Marginal1d::Piecewise {
                    lo: axis.lower,
                    width: axis.width(),
                    values: r.records[k].marginals[dim].clone(),
                }
            }
        }
    }

    fn resamples(&self) -> usize {
        match self {
            EstimatorRecords::Charest(r) => r.iter().filter(|x| x.resampled).count(),
            EstimatorRecords::Gridpf(r) => r.records.iter().filter(|x| x.resampled).count(),
        }
    }
}

/// Outcome of one estimator on one repeat.
#[derive(Debug, Clone)]
pub struct EstimatorRun {
    pub kind: EstimatorKind,
    pub records: EstimatorRecords,
    /// Wall-clock seconds spent in init and the step loop.
    pub seconds: f64,
    pub ode_solves: Option<usize>,
}

/// Runs one estimator over a stored snapshot series. The state at the first
/// snapshot time is the initial estimate; updates start at the second.
pub fn run_estimator(
    cfg: &ExperimentConfig,
    kind: EstimatorKind,
    index: usize,
    snapshots: &SnapshotSeries,
) -> Result<EstimatorRun> {
    let n0_hat = cfg.estimate_n0()?;
    let entries = &snapshots.entries;
    let t0 = entries
        .first()
        .ok_or_else(|| Error::invalid("snapshot series is empty"))?
        .t;
    let stage = |k: usize| format!("{kind} step at t = {}", entries[k].t);
    match kind {
        EstimatorKind::Charest => {
            let ccfg = cfg
                .charest
                .ok_or_else(|| Error::Config("missing [charest] section".into()))?;
            let est = CharEstimator::new(cfg.model.clone(), ccfg, cfg.integrator)?;
            let mut rng = substream(cfg.seed, index as u64, Purpose::Charest);
            let start = Instant::now();
            let mut state = est
                .init(&n0_hat, t0, &mut rng)
                .map_err(|e| e.in_stage("charest init"))?;
            let mut records = vec![est.record(&state)?];
            for (k, entry) in entries.iter().enumerate().skip(1) {
                let rec = est
                    .step(&mut state, entry.t, &entry.gmd, &mut rng)
                    .map_err(|e| e.in_stage(stage(k)))?;
                records.push(rec);
            }
            Ok(EstimatorRun {
                kind,
                records: EstimatorRecords::Charest(records),
                seconds: start.elapsed().as_secs_f64(),
                ode_solves: Some(state.ode_solves),
            })
        }
        EstimatorKind::Gridpf => {
            let spec = cfg
                .gridpf
                .as_ref()
                .ok_or_else(|| Error::Config("missing [gridpf] section".into()))?;
            let start = Instant::now();
            let pf = GridPf::new(&cfg.model, cfg.gridpf_grid()?, spec.filter, cfg.integrator)?;
            let mut rng = substream(cfg.seed, index as u64, Purpose::GridPf);
            let mut state = pf
                .init(&n0_hat, t0, &mut rng)
                .map_err(|e| e.in_stage("gridpf init"))?;
            let mut records = vec![pf.record(&state, false)?];
            for (k, entry) in entries.iter().enumerate().skip(1) {
                let rec = pf
                    .step(&mut state, entry.t, &entry.gmd, &mut rng)
                    .map_err(|e| e.in_stage(stage(k)))?;
                records.push(rec);
            }
            Ok(EstimatorRun {
                kind,
                records: EstimatorRecords::Gridpf(GridPfResults {
                    grid: pf.grid().clone(),
                    records,
                }),
                seconds: start.elapsed().as_secs_f64(),
                ode_solves: None,
            })
        }
    }
}

/// L1 error series of every state marginal, in coordinate order.
pub fn error_series(
    model: &ModelSpec,
    run: &EstimatorRun,
    ensembles: &[CellEnsemble],
    seed: u64,
) -> Result<Vec<ErrorSeries>> {
    if run.records.len() != ensembles.len() {
        return Err(Error::invalid(format!(
            "{} records for {} reference times",
            run.records.len(),
            ensembles.len()
        )));
    }
    let times: Vec<f64> = ensembles.iter().map(|e| e.time).collect();
    model
        .dim_names()
        .into_iter()
        .enumerate()
        .map(|(dim, name)| {
            let values = (0..ensembles.len())
                .into_par_iter()
                .map(|k| {
                    l1_marginal_error(
                        &run.records.marginal(k, dim),
                        &ensembles[k],
                        dim,
                        QUAD_NODES,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            ErrorSeries::new(
                SeriesLabel {
                    estimator: run.kind.name().into(),
                    dim: name,
                    seed,
                },
                times.clone(),
                values,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStage {
    Simulate,
    Estimate,
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub seconds: f64,
    pub resamples: usize,
    pub ode_solves: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub index: usize,
    /// Seed identifying this repeat; its streams are keyed by
    /// `(master seed, index, purpose)`.
    pub seed: u64,
    pub dir: String,
    pub estimators: BTreeMap<String, EstimatorSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub stage: RunStage,
    pub failure: Option<String>,
    pub config_hash: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub repeats: Vec<RepeatRecord>,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(MANIFEST_FILE))
    }

    /// Total seconds per estimator across repeats.
    pub fn total_seconds(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for r in &self.repeats {
            for (k, s) in &r.estimators {
                *out.entry(k.clone()).or_insert(0.0) += s.seconds;
            }
        }
        out
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?);
    Ok(serde_json::from_reader(r)?)
}

pub fn repeat_dir_name(index: usize) -> String {
    format!("repeat_{index:03}")
}

fn errors_file(dim: &str) -> String {
    format!("errors_{dim}.csv")
}

/// What one repeat produced, with file names relative to the run directory.
struct RepeatOutcome {
    record: RepeatRecord,
    series: Vec<ErrorSeries>,
    files: Vec<String>,
}

fn store_repeat_data(run_dir: &Path, data: &RepeatData) -> Result<Vec<String>> {
    let name = repeat_dir_name(data.index);
    let dir = run_dir.join(&name);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join(REFERENCE_FILE), &data.ensembles)?;
    write_json(&dir.join(SNAPSHOTS_FILE), &data.snapshots)?;
    let mut csv = BufWriter::new(File::create(dir.join(SNAPSHOTS_CSV))?);
    data.snapshots.write_raw_csv(&mut csv)?;
    csv.flush()?;
    Ok([REFERENCE_FILE, SNAPSHOTS_FILE, SNAPSHOTS_CSV]
        .iter()
        .map(|f| format!("{name}/{f}"))
        .collect())
}

fn load_repeat_data(run_dir: &Path, index: usize) -> Result<RepeatData> {
    let dir = run_dir.join(repeat_dir_name(index));
    Ok(RepeatData {
        index,
        ensembles: read_json(&dir.join(REFERENCE_FILE))?,
        snapshots: read_json(&dir.join(SNAPSHOTS_FILE))?,
    })
}

fn estimate_repeat(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    data: &RepeatData,
) -> Result<RepeatOutcome> {
    let name = repeat_dir_name(data.index);
    let dir = run_dir.join(&name);
    let seed = repeat_seed(cfg.seed, data.index as u64);
    if data.snapshots.model_id != cfg.model.model_id() {
        return Err(Error::Config(format!(
            "{name} holds {} snapshots but the config model is {}",
            data.snapshots.model_id,
            cfg.model.model_id()
        )));
    }
    if data.ensembles.len() != data.snapshots.entries.len() {
        return Err(Error::invalid(format!(
            "{name}: reference and snapshot time grids differ"
        )));
    }
    data.snapshots
        .validate(cfg.model.output_dim(), cfg.snapshots.n_gmd)
        .map_err(|e| e.in_stage(format!("loading {name}")))?;

    let mut files = Vec::new();
    let mut series = Vec::new();
    let mut estimators = BTreeMap::new();
    for &kind in &cfg.estimators {
        let run = run_estimator(cfg, kind, data.index, &data.snapshots)?;
        let file = kind.results_file();
        match &run.records {
            EstimatorRecords::Charest(r) => write_json(&dir.join(&file), r)?,
            EstimatorRecords::Gridpf(r) => write_json(&dir.join(&file), r)?,
        }
        files.push(format!("{name}/{file}"));
        series.extend(
            error_series(&cfg.model, &run, &data.ensembles, seed)
                .map_err(|e| e.in_stage(format!("{kind} error computation")))?,
        );
        estimators.insert(
            kind.name().to_string(),
            EstimatorSummary {
                seconds: run.seconds,
                resamples: run.records.resamples(),
                ode_solves: run.ode_solves,
            },
        );
    }
    for dim in cfg.model.dim_names() {
        let file = errors_file(&dim);
        let mine: Vec<_> = series
            .iter()
            .filter(|s| s.label.dim == dim)
            .cloned()
            .collect();
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        write_series_csv(&mut w, &mine)?;
        w.flush()?;
        files.push(format!("{name}/{file}"));
    }
    Ok(RepeatOutcome {
        record: RepeatRecord {
            index: data.index,
            seed,
            dir: name,
            estimators,
        },
        series,
        files,
    })
}

fn write_aggregates(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    series: &[ErrorSeries],
) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for dim in cfg.model.dim_names() {
        let mut aggs = Vec::new();
        for &kind in &cfg.estimators {
            let runs: Vec<_> = series
                .iter()
                .filter(|s| s.label.dim == dim && s.label.estimator == kind.name())
                .cloned()
                .collect();
            if !runs.is_empty() {
                aggs.push(average_runs(&runs)?);
            }
        }
        let n_runs = aggs.first().map_or(0, |a| a.n_runs);
        let comments = vec![
            format!("scenario: {}", scenario_name(cfg.scenario)),
            format!("marginal: {dim}"),
            format!("master_seed: {}", cfg.seed),
            format!("repeats: {n_runs}"),
            format!("config_hash: {}", cfg.hash()),
        ];
        let file = errors_file(&dim);
        let mut w = BufWriter::new(File::create(run_dir.join(&file))?);
        write_aggregate_csv(&mut w, &comments, &aggs)?;
        w.flush()?;
        files.push(file);
    }
    Ok(files)
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::Bench2d => "bench2d",
        Scenario::Bench3dClean => "bench3d_clean",
        Scenario::Bench3dNoisy => "bench3d_noisy",
        Scenario::Custom => "custom",
    }
}

/// Collects per-repeat results in index order, stopping at the first error.
fn split_outcomes<T>(results: Vec<Result<T>>) -> (Vec<T>, Option<Error>) {
    let mut ok = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => return (ok, Some(e)),
        }
    }
    (ok, None)
}

fn finish(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    stage: RunStage,
    repeats: Vec<RepeatRecord>,
    mut files: Vec<String>,
    failure: Option<Error>,
) -> Result<RunManifest> {
    files.sort();
    let manifest = RunManifest {
        status: if failure.is_some() {
            RunStatus::Failed
        } else {
            RunStatus::Complete
        },
        stage,
        failure: failure.as_ref().map(|e| e.to_string()),
        config_hash: cfg.hash(),
        master_seed: cfg.seed,
        config: cfg.clone(),
        repeats,
        files,
    };
    write_json_pretty(&run_dir.join(MANIFEST_FILE), &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn prepare_dir(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(SCHEMA_FILE), CSV_SCHEMA)?;
    Ok(())
}

/// Simulates references and snapshots for every repeat without running
/// any estimator.
pub fn simulate(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest> {
    prepare_dir(cfg, run_dir)?;
    let results: Vec<Result<(RepeatRecord, Vec<String>)>> = (0..cfg.n_repeats)
        .into_par_iter()
        .map(|i| {
            let data = simulate_repeat(cfg, i)?;
            let files = store_repeat_data(run_dir, &data)?;
            Ok((
                RepeatRecord {
                    index: i,
                    seed: repeat_seed(cfg.seed, i as u64),
                    dir: repeat_dir_name(i),
                    estimators: BTreeMap::new(),
                },
                files,
            ))
        })
        .collect();
    let (ok, failure) = split_outcomes(results);
    let (records, files): (Vec<_>, Vec<_>) = ok.into_iter().unzip();
    let mut files: Vec<String> = files.into_iter().flatten().collect();
    files.push(SCHEMA_FILE.into());
    finish(cfg, run_dir, RunStage::Simulate, records, files, failure)
}

/// Repeat indices with stored snapshots under `run_dir`, ascending.
pub fn stored_repeats(run_dir: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(idx) = name
            .to_str()
            .and_then(|n| n.strip_prefix("repeat_"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if entry.path().join(SNAPSHOTS_FILE).is_file()
            && entry.path().join(REFERENCE_FILE).is_file()
        {
            out.push(idx);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Runs the selected estimators on snapshots stored by [`simulate`]. Every
/// stored repeat is processed.
pub fn estimate(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let indices = stored_repeats(run_dir)?;
    if indices.is_empty() {
        return Err(Error::NothingToDo(format!(
            "nothing to do: no stored snapshots under {}",
            run_dir.display()
        )));
    }
    prepare_dir(cfg, run_dir)?;
    let results: Vec<Result<(RepeatOutcome, Vec<String>)>> = indices
        .par_iter()
        .map(|&i| {
            let data = load_repeat_data(run_dir, i)?;
            let name = repeat_dir_name(i);
            let stored = [REFERENCE_FILE, SNAPSHOTS_FILE, SNAPSHOTS_CSV]
                .iter()
                .map(|f| format!("{name}/{f}"))
                .filter(|f| run_dir.join(f).is_file())
                .collect();
            Ok((estimate_repeat(cfg, run_dir, &data)?, stored))
        })
        .collect();
    conclude(cfg, run_dir, RunStage::Estimate, results)
}

/// End to end: simulate, estimate, score, and aggregate every repeat.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest> {
    prepare_dir(cfg, run_dir)?;
    let results: Vec<Result<(RepeatOutcome, Vec<String>)>> = (0..cfg.n_repeats)
        .into_par_iter()
        .map(|i| {
            let data = simulate_repeat(cfg, i)?;
            let stored = store_repeat_data(run_dir, &data)?;
            Ok((estimate_repeat(cfg, run_dir, &data)?, stored))
        })
        .collect();
    conclude(cfg, run_dir, RunStage::Run, results)
}

fn conclude(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    stage: RunStage,
    results: Vec<Result<(RepeatOutcome, Vec<String>)>>,
) -> Result<RunManifest> {
    let (ok, mut failure) = split_outcomes(results);
    let mut records = Vec::new();
    let mut series = Vec::new();
    let mut files = vec![SCHEMA_FILE.to_string()];
    for (outcome, stored) in ok {
        records.push(outcome.record);
        series.extend(outcome.series);
        files.extend(outcome.files);
        files.extend(stored);
    }
    if failure.is_none() {
        match write_aggregates(cfg, run_dir, &series) {
            Ok(f) => files.extend(f),
            Err(e) => failure = Some(e.in_stage("aggregation")),
        }
    }
    finish(cfg, run_dir, stage, records, files, failure)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::builtin("bench2d").unwrap();
        cfg.scenario = Scenario::Custom;
        cfg.n_repeats = 2;
        cfg.time.horizon = 0.99;
        cfg.reference.n_cells = 120;
        cfg.snapshots.n_meas = 60;
        cfg.snapshots.em_max_iter = 50;
        let c = cfg.charest.as_mut().unwrap();
        c.n_cand = 20;
        c.em_max_iter = 50;
        let g = cfg.gridpf.as_mut().unwrap();
        g.filter.n_particles = 6;
        g.grid[0].nodes = 14;
        g.grid[1].nodes = 6;
        cfg.output.panel_times = vec![0.0, 0.99];
        cfg
    }

    #[test]
    fn builtins_carry_tuning_tables() {
        let b2 = ExperimentConfig::builtin("bench2d").unwrap();
        assert_eq!(b2.times().len(), 61);
        assert!((b2.times()[60] - 19.8).abs() < 1e-12);
        assert_eq!(b2.charest, Some(CharConfig::bench2d()));
        let pf = b2.gridpf.as_ref().unwrap();
        assert_eq!(pf.filter.n_particles, 120);
        assert_eq!(pf.filter.resample_threshold, 0.1);
        assert_eq!((pf.grid[0].nodes, pf.grid[1].nodes), (80, 30));
        assert_eq!(
            b2.estimators,
            vec![EstimatorKind::Charest, EstimatorKind::Gridpf]
        );

        for name in ["bench3d_clean", "bench3d_noisy"] {
            let b3 = ExperimentConfig::builtin(name).unwrap();
            assert_eq!(b3.charest, Some(CharConfig::bench3d()));
            assert_eq!(b3.n_repeats, 10);
            assert_eq!(b3.model.state_dim(), 3);
        }
        let noisy = ExperimentConfig::builtin("bench3d_noisy").unwrap();
        assert_eq!(
            noisy.snapshots.noise,
            NoiseModel::MultiplicativeLogNormal { variance: 0.01 }
        );
    }

    #[test]
    fn estimate_offsets_apply() {
        let cfg = ExperimentConfig::builtin("bench2d").unwrap();
        let g = cfg.estimate_n0().unwrap();
        assert!((g.mean()[0] - 1.95).abs() < 1e-12);
        assert!((g.covariance()[(1, 1)] - 0.015).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let base = ExperimentConfig::builtin("bench2d").unwrap();
        let mut bad = Vec::new();
        let mut c = base.clone();
        c.n_repeats = 0;
        bad.push(c);
        let mut c = base.clone();
        c.time.dt = 0.0;
        bad.push(c);
        let mut c = base.clone();
        c.snapshots.n_meas = 5000;
        bad.push(c);
        let mut c = base.clone();
        c.charest = None;
        bad.push(c);
        let mut c = base.clone();
        c.gridpf.as_mut().unwrap().grid.pop();
        bad.push(c);
        let mut c = base.clone();
        c.initial.true_mean.push(1.0);
        bad.push(c);
        let mut c = base.clone();
        c.output.panel_times = vec![30.0];
        bad.push(c);
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        assert!(matches!(
            ExperimentConfig::from_toml("scenario = \"bench2d\"\nbogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::load("no-such-config").is_err());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::builtin("bench3d_noisy").unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn estimator_names_parse() {
        assert_eq!(
            "gridpf".parse::<EstimatorKind>().unwrap(),
            EstimatorKind::Gridpf
        );
        assert_eq!(
            " charest".parse::<EstimatorKind>().unwrap(),
            EstimatorKind::Charest
        );
        assert!("kalman".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn run_writes_tree_and_matches_simulate_then_estimate() {
        let cfg = tiny();
        let a = tempfile::tempdir().unwrap();
        let m = run_experiment(&cfg, a.path()).unwrap();
        assert_eq!(m.status, RunStatus::Complete);
        assert_eq!(m.repeats.len(), 2);
        for f in &m.files {
            assert!(a.path().join(f).is_file(), "{f}");
        }
        for name in [
            "errors_z.csv",
            "errors_g.csv",
            "repeat_001/charest_results.json",
        ] {
            assert!(m.files.iter().any(|f| f == name), "{name}");
        }
        let timings = m.total_seconds();
        assert!(timings["charest"] > 0.0 && timings["gridpf"] > 0.0);

        let b = tempfile::tempdir().unwrap();
        simulate(&cfg, b.path()).unwrap();
        assert!(!b.path().join("errors_z.csv").exists());
        estimate(&cfg, b.path()).unwrap();
        for f in ["errors_z.csv", "errors_g.csv", "repeat_000/errors_z.csv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let text = fs::read_to_string(a.path().join("errors_z.csv")).unwrap();
        assert!(text.starts_with("# scenario: custom"));
        assert_eq!(
            text.lines().filter(|l| l.starts_with("charest,")).count(),
            4
        );
    }

    #[test]
    fn estimate_without_snapshots_is_nothing_to_do() {
        let dir = tempfile::tempdir().unwrap();
        let err = estimate(&tiny(), dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn failures_leave_a_failed_manifest() {
        let mut cfg = tiny();
        cfg.estimators = vec![EstimatorKind::Charest];
        let dir = tempfile::tempdir().unwrap();
        simulate(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.model = ModelSpec::gene_expr3d_default();
        other.initial.true_mean = vec![1.0, 1.0, 2.0];
        other.initial.estimate_mean_factor = vec![1.0; 3];
        other.initial.true_cov = vec![
            vec![0.1, 0.0, 0.0],
            vec![0.0, 0.1, 0.0],
            vec![0.0, 0.0, 0.1],
        ];
        let err = estimate(&other, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let m = RunManifest::read(dir.path()).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.failure.unwrap().contains("growth2d"));
    }
}
