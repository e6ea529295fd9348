//! Experiment configuration and the pretrain → evolve → compare pipeline,
//! with its on-disk artifacts and plots.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml            config echo
//! manifest.toml          seeds, timings, summary, failure text
//! weights_pretrained.txt
//! pretrain_loss.csv
//! weights_final.txt
//! trace.csv
//! errors.csv             rows = evaluation parameters, cols = snapshot times
//! snapshots/p{i}_t{k}.csv
//! reference/p{i}_t{k}.csv
//! FAILED                 present only when a stage failed
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deeponet::{evaluate_field, load_weights, save_weights, DeepONetModel, DeepONetWeights, FieldSample};
use crate::energy::{read_field_csv, write_field_csv, Grid};
use crate::error::{Error, Result};
use crate::pretrain::{
    field_samples, generate_dataset, train_initial, OperatorSample, ProblemFamily, SensorGrid, TrainConfig, TrainReport,
};
use crate::reference::{mse_error, ReferenceCache, ReferenceRun};
use crate::sav_evolve::{EvolutionSet, EvolveConfig};
use crate::stepping::{evolve, EvolutionPlan, EvolutionTrace, StepControlConfig};

/// Environment variable naming the directory under which runs are written.
pub const OUTPUT_ROOT_ENV: &str = "EDE_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Heat,
    ParametricHeat,
    Ac1d,
    Ac1dEps,
    Ac2d,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [Self::Heat, Self::ParametricHeat, Self::Ac1d, Self::Ac1dEps, Self::Ac2d];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Heat => "heat",
            Self::ParametricHeat => "parametric-heat",
            Self::Ac1d => "ac1d",
            Self::Ac1dEps => "ac1d-eps",
            Self::Ac2d => "ac2d",
        }
    }

    /// Experiment behind a table number.
    pub fn for_table(table: u32) -> Result<Self> {
        match table {
            1 => Ok(Self::Heat),
            2 => Ok(Self::ParametricHeat),
            3 => Ok(Self::Ac1d),
            4 => Ok(Self::Ac2d),
            _ => Err(Error::Usage(format!("unknown table `{table}`, expected 1, 2, 3 or 4"))),
        }
    }
}

impl std::str::FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown experiment `{s}`")))
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Uniform evaluation grid, closed on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
    pub dim: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        match self.dim {
            1 => Grid::line(self.lower, self.upper, self.points),
            2 => Grid::square(self.lower, self.upper, self.points),
            d => Err(Error::InvalidConfig(format!("grid dim must be 1 or 2, got {d}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub family: ProblemFamily,
    pub sensors: SensorGrid,
    pub param_range: [f64; 2],
    pub samples: usize,
    pub seed: u64,
    /// Points per axis of the pretraining query grid; the evaluation grid
    /// when unset.
    #[serde(default)]
    pub query_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden widths shared by branch and trunk.
    pub hidden: Vec<usize>,
    pub p: usize,
    pub use_bias: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    /// Training parameters evolved jointly, picked as evenly spaced order
    /// statistics of the training draws.
    pub samples: usize,
    pub dt: f64,
    pub n_steps: usize,
    /// Stop once this time is reached, even with steps left.
    #[serde(default)]
    pub t_final: Option<f64>,
    pub snapshot_times: Vec<f64>,
    /// Tikhonov weight relative to `trace(JᵀJ)/cols`.
    pub lambda_rel: f64,
}

/// Thresholds of the step controller; `dt_min`, `dt_max` scale `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub eps0: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub dt_min_factor: f64,
    pub dt_max_factor: f64,
    pub adaptive: bool,
    pub restart: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let c = StepControlConfig::with_dt(1.0);
        Self {
            eps0: c.eps0,
            eps1: c.eps1,
            eps2: c.eps2,
            dt_min_factor: c.dt_min,
            dt_max_factor: c.dt_max,
            adaptive: c.adaptive,
            restart: c.restart,
        }
    }
}

impl ControlConfig {
    pub fn step_control(&self, dt: f64) -> StepControlConfig {
        StepControlConfig {
            eps0: self.eps0,
            eps1: self.eps1,
            eps2: self.eps2,
            dt_init: dt,
            dt_min: self.dt_min_factor * dt,
            dt_max: self.dt_max_factor * dt,
            adaptive: self.adaptive,
            restart: self.restart,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Parameters reported in the error table.
    pub params: Vec<f64>,
    /// Subset of `params` checked against `threshold`.
    pub gated: Vec<f64>,
    pub threshold: f64,
    pub dt_ref: f64,
    /// Axis refinement of the reference solver grid.
    pub refine: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub control: ControlConfig,
    pub evaluation: EvaluationConfig,
    /// Overrides `$EDE_OUTPUT_ROOT/<experiment>`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn heat_like(experiment: ExperimentId, family: ProblemFamily, eval: Vec<f64>, gated: Vec<f64>) -> ExperimentConfig {
    ExperimentConfig {
        experiment,
        grid: GridConfig {
            lower: 0.0,
            upper: 2.0,
            points: 51,
            dim: 1,
        },
        data: DataConfig {
            family,
            sensors: SensorGrid {
                lower: 0.0,
                upper: 2.0,
                per_axis: 50,
                dim: 1,
            },
            param_range: [1.0, 2.0],
            samples: 50,
            seed: 1,
            query_points: None,
        },
        network: NetworkConfig {
            hidden: vec![20, 20],
            p: 10,
            use_bias: true,
            seed: 1,
        },
        train: TrainConfig {
            target_mse: 1e-7,
            polish_iterations: 60,
            ..TrainConfig::default()
        },
        evolution: EvolutionConfig {
            samples: 10,
            dt: 2.5e-4,
            n_steps: 400,
            t_final: None,
            snapshot_times: vec![0.0, 0.025, 0.05, 0.075, 0.1],
            lambda_rel: 5e-6,
        },
        control: ControlConfig::default(),
        evaluation: EvaluationConfig {
            params: eval,
            gated,
            threshold: 1e-4,
            dt_ref: crate::reference::DEFAULT_DT_REF,
            refine: 4,
        },
        output_dir: None,
    }
}

impl ExperimentConfig {
    /// The embedded configuration of an experiment.
    pub fn canonical(id: ExperimentId) -> Self {
        match id {
            ExperimentId::Heat => heat_like(id, ProblemFamily::Heat, vec![1.0, 1.5, 1.8, 2.5], vec![1.0, 1.5, 1.8]),
            ExperimentId::ParametricHeat => heat_like(
                id,
                ProblemFamily::ParametricHeat,
                vec![1.2, 1.5, 1.8, 2.5],
                vec![1.2, 1.5, 1.8],
            ),
            ExperimentId::Ac1d | ExperimentId::Ac1dEps => {
                let mut cfg = heat_like(id, ProblemFamily::AllenCahn { eps: 0.1 }, vec![], vec![]);
                cfg.grid.lower = -1.0;
                cfg.grid.upper = 1.0;
                cfg.data.sensors.lower = -1.0;
                cfg.data.sensors.upper = 1.0;
                cfg.data.param_range = [0.1, 0.5];
                cfg.evolution.dt = 1e-4;
                cfg.evolution.snapshot_times = vec![0.0, 0.01, 0.02, 0.03, 0.04];
                cfg.evaluation.params = vec![0.1, 0.2, 0.3, 0.4, 0.6];
                cfg.evaluation.gated = vec![0.1, 0.2, 0.3, 0.4];
                cfg.evaluation.threshold = 5e-3;
                if id == ExperimentId::Ac1dEps {
                    cfg.data.family = ProblemFamily::AllenCahnEps {
                        amplitude: 0.4,
                        t_start: 0.02,
                        dt_ref: crate::reference::DEFAULT_DT_REF,
                        refine: 4,
                    };
                    cfg.data.param_range = [0.1, 0.2];
                    cfg.control.adaptive = true;
                    cfg.evolution.snapshot_times = vec![0.02, 0.03, 0.04, 0.05, 0.06];
                    cfg.evolution.t_final = Some(0.06);
                    cfg.evaluation.params = vec![0.1, 0.15, 0.2, 0.25];
                    cfg.evaluation.gated = vec![];
                }
                cfg
            }
            ExperimentId::Ac2d => {
                let mut cfg = heat_like(id, ProblemFamily::AllenCahn { eps: 0.1 }, vec![], vec![]);
                cfg.grid = GridConfig {
                    lower: -1.0,
                    upper: 1.0,
                    points: 51,
                    dim: 2,
                };
                cfg.data.sensors = SensorGrid {
                    lower: -1.0,
                    upper: 1.0,
                    per_axis: 6,
                    dim: 2,
                };
                cfg.data.param_range = [0.1, 0.4];
                cfg.data.samples = 20;
                cfg.data.query_points = Some(26);
                cfg.network.hidden = vec![16, 16];
                cfg.network.p = 8;
                cfg.evolution.samples = 4;
                cfg.evolution.lambda_rel = 5e-5;
                cfg.evolution.dt = 2e-4;
                cfg.evolution.snapshot_times = vec![0.0, 0.01, 0.02, 0.03];
                cfg.evolution.n_steps = 150;
                cfg.evaluation.params = vec![0.15, 0.2, 0.3, 0.35, 0.4];
                cfg.evaluation.gated = vec![0.15, 0.2, 0.3, 0.35];
                cfg.evaluation.threshold = 2e-2;
                cfg.evaluation.refine = 2;
                cfg
            }
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| e.with_path(path))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let grid = self.grid.build()?;
        self.data.sensors.validate()?;
        if self.data.sensors.dim != grid.dim() {
            return bad("sensor and grid dimensions differ".into());
        }
        let [lo, hi] = self.data.param_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("param_range [{lo}, {hi}] is empty"));
        }
        if self.data.samples == 0 {
            return bad("data.samples must be ≥ 1".into());
        }
        if self.network.p == 0 || self.network.hidden.contains(&0) {
            return bad("network widths must be ≥ 1".into());
        }
        self.train.validate()?;
        let ev = &self.evolution;
        if ev.samples == 0 || !(ev.dt > 0.0) || !(ev.lambda_rel >= 0.0) {
            return bad("evolution needs samples ≥ 1, dt > 0, lambda_rel ≥ 0".into());
        }
        if ev.snapshot_times.iter().any(|t| !t.is_finite()) {
            return bad("snapshot times must be finite".into());
        }
        self.control.step_control(ev.dt).validate()?;
        let e = &self.evaluation;
        if e.gated.iter().any(|g| !e.params.contains(g)) {
            return bad("evaluation.gated must be a subset of evaluation.params".into());
        }
        if !(e.threshold > 0.0) || !(e.dt_ref > 0.0) || e.refine == 0 {
            return bad("evaluation needs threshold > 0, dt_ref > 0, refine ≥ 1".into());
        }
        Ok(())
    }

    /// `output_dir`, else `$EDE_OUTPUT_ROOT/<experiment>`, else `runs/<experiment>`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| output_root().join(self.experiment.as_str()))
    }

    pub fn model(&self) -> Result<DeepONetModel> {
        DeepONetModel::with_widths(
            self.data.sensors.count(),
            self.grid.dim,
            &self.network.hidden,
            self.network.p,
            self.network.use_bias,
        )
    }

    /// Initial field the reference solver starts from, and its PDE, for one
    /// evaluation parameter.
    pub fn reference_run(&self, grid: &Grid, param: f64, t: f64) -> Result<ReferenceRun> {
        let kind = self.data.family.problem(param, grid)?.kind;
        let amplitude = match self.data.family {
            ProblemFamily::ParametricHeat => 1.0,
            ProblemFamily::AllenCahnEps { amplitude, .. } => amplitude,
            _ => param,
        };
        let mut run = ReferenceRun::new(kind, amplitude, grid.clone(), t);
        run.dt_ref = self.evaluation.dt_ref;
        run.refine = self.evaluation.refine;
        Ok(run)
    }
}

/// `$EDE_OUTPUT_ROOT`, or `runs` when unset.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// `k` evenly spaced order statistics of `params` (all of them, sorted, when
/// `k ≥ len`).
pub fn spread_subset(params: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = params.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if k >= n {
        return sorted;
    }
    match k {
        0 => Vec::new(),
        1 => vec![sorted[(n - 1) / 2]],
        _ => (0..k).map(|i| sorted[i * (n - 1) / (k - 1)]).collect(),
    }
}

/// One row of the error table.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub param: f64,
    pub gated: bool,
    /// `None` where the run never reached the snapshot time.
    pub cells: Vec<Option<f64>>,
}

/// MSE against the reference, parameters by snapshot times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTable {
    pub times: Vec<f64>,
    pub rows: Vec<ErrorRow>,
}

/// Verdict on one gated cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCell {
    pub param: f64,
    pub t: f64,
    pub value: Option<f64>,
    pub pass: bool,
}

impl ErrorTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["param".to_string(), "gated".to_string()];
        header.extend(self.times.iter().map(|t| t.to_string()));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.param.to_string(), row.gated.to_string()];
            rec.extend(
                row.cells
                    .iter()
                    .map(|c| c.map_or_else(String::new, |v| format!("{v:e}"))),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let inner = || -> Result<Self> {
            let mut rdr = csv::Reader::from_path(path)?;
            let header = rdr.headers()?.clone();
            if header.len() < 2 || &header[0] != "param" || &header[1] != "gated" {
                return Err(Error::parse("error table header must start with `param,gated`"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::parse(format!("`{s}`: {e}")));
            let times = header.iter().skip(2).map(num).collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                if rec.len() != times.len() + 2 {
                    return Err(Error::parse("ragged error table row"));
                }
                let gated = rec[1].parse::<bool>().map_err(|e| Error::parse(e.to_string()))?;
                let cells = rec
                    .iter()
                    .skip(2)
                    .map(|c| if c.is_empty() { Ok(None) } else { num(c).map(Some) })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(ErrorRow {
                    param: num(&rec[0])?,
                    gated,
                    cells,
                });
            }
            Ok(Self { times, rows })
        };
        inner().map_err(|e| e.with_path(path))
    }

    /// Every cell of every gated row; a missing cell fails.
    pub fn gate(&self, threshold: f64) -> Vec<GateCell> {
        self.rows
            .iter()
            .filter(|r| r.gated)
            .flat_map(|r| {
                r.cells.iter().zip(&self.times).map(move |(&value, &t)| GateCell {
                    param: r.param,
                    t,
                    value,
                    pass: value.is_some_and(|v| v <= threshold),
                })
            })
            .collect()
    }
}

/// Knobs of [`run_experiment`] that are not part of the experiment itself.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Load `weights_pretrained.txt` from the run directory when present.
    pub reuse_pretrained: bool,
    pub reference_cache: PathBuf,
}

impl RunOptions {
    /// Fresh pretraining, reference cache beside the run directory.
    pub fn fresh(dir: &Path) -> Self {
        let parent = dir.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Self {
            reuse_pretrained: false,
            reference_cache: parent.join("reference-cache"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: ExperimentId,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub training_params: Vec<f64>,
    pub evolution_params: Vec<f64>,
    pub pretrain_mse: Option<f64>,
    pub pretrain_epochs: Option<usize>,
    pub polish_steps: Option<usize>,
    pub pretrain_reused: bool,
    pub steps: usize,
    pub restarts: usize,
    pub t_end: Option<f64>,
    pub max_dissipation_excess: Option<f64>,
    pub max_stationarity: Option<f64>,
    pub pretrain_seconds: f64,
    pub evolve_seconds: f64,
    pub wall_seconds: f64,
    pub failure: Option<String>,
    pub config: ExperimentConfig,
}

/// Everything a run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub report: Option<TrainReport>,
    pub trace: EvolutionTrace,
    /// Empty when pretraining failed.
    pub table: ErrorTable,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.manifest.failure.is_some()
    }
}

/// Pretrained network and the data behind it.
#[derive(Debug)]
pub struct Pretrained {
    pub model: DeepONetModel,
    pub weights: DeepONetWeights,
    pub report: Option<TrainReport>,
    pub training_params: Vec<f64>,
    pub seconds: f64,
}

fn dataset(cfg: &ExperimentConfig, grid: &Grid) -> Result<Vec<OperatorSample>> {
    let [lo, hi] = cfg.data.param_range;
    let query = match cfg.data.query_points {
        Some(points) => GridConfig { points, ..cfg.grid }.build()?,
        None => grid.clone(),
    };
    generate_dataset(
        &cfg.data.family,
        cfg.data.samples,
        &cfg.data.sensors,
        &query,
        (lo, hi),
        cfg.data.seed,
    )
}

fn training_params(data: &[OperatorSample]) -> Vec<f64> {
    field_samples(data).iter().map(|s| s.label).collect()
}

fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "mse"])?;
    for (i, v) in history.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Fits the operator network and writes `weights_pretrained.txt` and
/// `pretrain_loss.csv` into `dir`. With `reuse`, existing weights of the
/// same architecture are loaded instead.
pub fn pretrain_stage(cfg: &ExperimentConfig, dir: &Path, reuse: bool) -> Result<Pretrained> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let start = Instant::now();
    let grid = cfg.grid.build()?;
    let model = cfg.model()?;
    let data = dataset(cfg, &grid)?;
    let params = training_params(&data);
    let path = dir.join("weights_pretrained.txt");
    if reuse && path.exists() {
        let (stored, weights) = load_weights(&path)?;
        if stored == model {
            log::info!("reusing {}", path.display());
            return Ok(Pretrained {
                model,
                weights,
                report: None,
                training_params: params,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        log::warn!("{} has another architecture; retraining", path.display());
    }
    let init = model.init_weights(cfg.network.seed);
    let (weights, report) = train_initial(&model, init, &data, &cfg.train)?;
    log::info!(
        "pretrained {}: mse {:.3e} after {} epochs + {} polish steps",
        cfg.experiment,
        report.final_mse,
        report.epochs,
        report.polish_steps
    );
    save_weights(&path, &model, &weights)?;
    write_loss_csv(&dir.join("pretrain_loss.csv"), &report.loss_history)?;
    Ok(Pretrained {
        model,
        weights,
        report: Some(report),
        training_params: params,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn snapshot_name(i: usize, k: usize) -> String {
    format!("p{i}_t{k}.csv")
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::from(e).with_path(&path))?;
    toml::from_str(&text).map_err(|e| Error::parse(e.to_string()).with_path(&path))
}

fn mark_failed(dir: &Path, manifest: &mut RunManifest, err: &Error) -> Result<()> {
    log::error!("{} failed: {err}", manifest.experiment);
    manifest.failure = Some(err.to_string());
    std::fs::write(dir.join("FAILED"), format!("{err}\n"))?;
    Ok(())
}

/// Runs pretraining, evolution and the comparison against the reference,
/// writing all artifacts into `dir`. Stage failures (divergence, blow-up)
/// leave partial artifacts and a `FAILED` marker and are reported through
/// the manifest rather than as `Err`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(dir)?;
    let _ = std::fs::remove_file(dir.join("FAILED"));
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    let grid = cfg.grid.build()?;

    let mut manifest = RunManifest {
        experiment: cfg.experiment,
        data_seed: cfg.data.seed,
        init_seed: cfg.network.seed,
        train_seed: cfg.train.seed,
        training_params: Vec::new(),
        evolution_params: Vec::new(),
        pretrain_mse: None,
        pretrain_epochs: None,
        polish_steps: None,
        pretrain_reused: false,
        steps: 0,
        restarts: 0,
        t_end: None,
        max_dissipation_excess: None,
        max_stationarity: None,
        pretrain_seconds: 0.0,
        evolve_seconds: 0.0,
        wall_seconds: 0.0,
        failure: None,
        config: cfg.clone(),
    };
    let mut outcome = RunOutcome {
        dir: dir.to_path_buf(),
        manifest: manifest.clone(),
        report: None,
        trace: EvolutionTrace::new(),
        table: ErrorTable::default(),
    };

    let pre = match pretrain_stage(cfg, dir, opts.reuse_pretrained) {
        Ok(p) => p,
        Err(e @ Error::Divergence { .. }) => {
            mark_failed(dir, &mut manifest, &e)?;
            manifest.wall_seconds = start.elapsed().as_secs_f64();
            write_manifest(dir, &manifest)?;
            outcome.manifest = manifest;
            return Ok(outcome);
        }
        Err(e) => return Err(e),
    };
    manifest.training_params = pre.training_params.clone();
    manifest.pretrain_reused = pre.report.is_none();
    manifest.pretrain_seconds = pre.seconds;
    if let Some(r) = &pre.report {
        manifest.pretrain_mse = Some(r.final_mse);
        manifest.pretrain_epochs = Some(r.epochs);
        manifest.polish_steps = Some(r.polish_steps);
    }

    let family = cfg.data.family;
    let picked = spread_subset(&pre.training_params, cfg.evolution.samples);
    let samples = picked
        .iter()
        .map(|&a| family.field_sample(a, &cfg.data.sensors, &grid))
        .collect::<Result<Vec<_>>>()?;
    let problems = picked
        .iter()
        .map(|&a| family.problem(a, &grid))
        .collect::<Result<Vec<_>>>()?;
    manifest.evolution_params = picked;
    let set = EvolutionSet::new(samples, problems)?;
    let control = cfg.control.step_control(cfg.evolution.dt);
    let plan = EvolutionPlan {
        max_steps: cfg.evolution.n_steps,
        t_final: cfg.evolution.t_final,
        snapshot_times: cfg.evolution.snapshot_times.clone(),
    };
    let evolve_cfg = EvolveConfig {
        lambda_rel: cfg.evolution.lambda_rel,
    };
    let t_evolve = Instant::now();
    let run = evolve(
        &pre.model,
        pre.weights,
        &set,
        &control,
        &evolve_cfg,
        &plan,
        family.start_time(),
    )?;
    manifest.evolve_seconds = t_evolve.elapsed().as_secs_f64();
    save_weights(&dir.join("weights_final.txt"), &pre.model, &run.weights)?;
    run.trace.write_csv(&dir.join("trace.csv"))?;
    let rows = run.trace.rows();
    manifest.steps = rows.len();
    manifest.restarts = rows.iter().filter(|r| r.restart_flag).count();
    manifest.t_end = Some(run.state.t);
    if !rows.is_empty() {
        manifest.max_dissipation_excess = Some(run.trace.max_dissipation_excess());
        manifest.max_stationarity = Some(rows.iter().map(|r| r.stationarity).fold(0.0, f64::max));
    }

    let table = write_comparison(cfg, &grid, &pre.model, &run.snapshots, dir, opts)?;
    if let Some(e) = &run.failure {
        mark_failed(dir, &mut manifest, e)?;
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    write_manifest(dir, &manifest)?;
    outcome.manifest = manifest;
    outcome.report = pre.report;
    outcome.trace = run.trace;
    outcome.table = table;
    Ok(outcome)
}

/// Snapshot fields, reference fields and the error table.
fn write_comparison(
    cfg: &ExperimentConfig,
    grid: &Grid,
    model: &DeepONetModel,
    snapshots: &[(f64, DeepONetWeights)],
    dir: &Path,
    opts: &RunOptions,
) -> Result<ErrorTable> {
    let snap_dir = dir.join("snapshots");
    let ref_dir = dir.join("reference");
    std::fs::create_dir_all(&snap_dir)?;
    std::fs::create_dir_all(&ref_dir)?;
    let cache = ReferenceCache::new(&opts.reference_cache)?;
    let mut times = cfg.evolution.snapshot_times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let samples: Vec<FieldSample> = cfg
        .evaluation
        .params
        .iter()
        .map(|&a| cfg.data.family.field_sample(a, &cfg.data.sensors, grid))
        .collect::<Result<_>>()?;
    let points = grid.points();
    let mut rows: Vec<ErrorRow> = cfg
        .evaluation
        .params
        .iter()
        .map(|&param| ErrorRow {
            param,
            gated: cfg.evaluation.gated.contains(&param),
            cells: vec![None; times.len()],
        })
        .collect();
    for (t, weights) in snapshots {
        let Some(k) = times.iter().position(|s| s == t) else {
            continue;
        };
        let u = evaluate_field(model, weights, &samples, points.as_ref())?;
        for (i, row) in rows.iter_mut().enumerate() {
            let field: Vec<f64> = u.row(i).iter().copied().collect();
            let reference = cache.get(&cfg.reference_run(grid, row.param, *t)?)?;
            write_field_csv(&snap_dir.join(snapshot_name(i, k)), grid, &field)?;
            write_field_csv(&ref_dir.join(snapshot_name(i, k)), grid, &reference)?;
            row.cells[k] = Some(mse_error(&field, &reference)?);
        }
    }
    let table = ErrorTable { times, rows };
    table.write_csv(&dir.join("errors.csv"))?;
    Ok(table)
}

/// Rebuilds the error table of a run directory from its snapshot and
/// reference CSVs.
pub fn recompute_errors(dir: &Path) -> Result<ErrorTable> {
    let stored = ErrorTable::read_csv(&dir.join("errors.csv"))?;
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let grid = cfg.grid.build()?;
    let mut table = stored.clone();
    for (i, row) in table.rows.iter_mut().enumerate() {
        for (k, cell) in row.cells.iter_mut().enumerate() {
            let name = snapshot_name(i, k);
            let snap = dir.join("snapshots").join(&name);
            if cell.is_none() || !snap.exists() {
                continue;
            }
            let u = read_field_csv(&snap, &grid)?;
            let r = read_field_csv(&dir.join("reference").join(&name), &grid)?;
            *cell = Some(mse_error(&u, &r)?);
        }
    }
    Ok(table)
}

/// Pass/fail matrix of one reproduced table.
#[derive(Debug)]
pub struct ReproduceReport {
    pub table_id: u32,
    pub threshold: f64,
    pub cells: Vec<GateCell>,
    pub outcome: RunOutcome,
}

impl ReproduceReport {
    /// Every gated cell passes and no stage failed.
    pub fn passed(&self) -> bool {
        !self.outcome.failed() && self.cells.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let table = &self.outcome.table;
        let name = self.outcome.manifest.experiment;
        let _ = match self.table_id {
            0 => write!(s, "{name}  threshold {:.0e}\n{:>8}", self.threshold, "param"),
            id => write!(
                s,
                "table {id} ({name})  threshold {:.0e}\n{:>8}",
                self.threshold, "param"
            ),
        };
        for t in &table.times {
            let _ = write!(s, " {:>12}", format!("T={t}"));
        }
        s.push('\n');
        for row in &table.rows {
            let _ = write!(s, "{:>8}", row.param);
            for cell in &row.cells {
                let text = match (cell, row.gated) {
                    (None, _) => "-".to_string(),
                    (Some(v), true) => format!("{v:.2e} {}", if *v <= self.threshold { "ok" } else { "NO" }),
                    (Some(v), false) => format!("{v:.2e}  ."),
                };
                let _ = write!(s, " {text:>12}");
            }
            s.push('\n');
        }
        if let Some(f) = &self.outcome.manifest.failure {
            let _ = writeln!(s, "failure: {f}");
        }
        let _ = writeln!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

/// Runs the canonical experiment behind a table and gates it.
pub fn reproduce(table_id: u32, root: &Path) -> Result<ReproduceReport> {
    let id = ExperimentId::for_table(table_id)?;
    let cfg = ExperimentConfig::canonical(id);
    let dir = root.join(id.as_str());
    let opts = RunOptions {
        reuse_pretrained: false,
        reference_cache: root.join("reference-cache"),
    };
    let outcome = run_experiment(&cfg, &dir, &opts)?;
    let cells = outcome.table.gate(cfg.evaluation.threshold);
    Ok(ReproduceReport {
        table_id,
        threshold: cfg.evaluation.threshold,
        cells,
        outcome,
    })
}

struct Series<'a> {
    label: &'a str,
    x: &'a [f64],
    y: &'a [f64],
    color: &'a str,
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn svg_plot(title: &str, xlabel: &str, series: &[Series<'_>], markers: &[(f64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.x.iter()));
    let (y0, y1) = bounds(
        series
            .iter()
            .flat_map(|s| s.y.iter())
            .chain(markers.iter().map(|m| &m.1)),
    );
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        W / 2.0,
        H - 10.0
    );
    for (v, anchor, x, y) in [
        (x0, "start", L, H - B + 16.0),
        (x1, "end", W - R, H - B + 16.0),
        (y0, "end", L - 4.0, H - B),
        (y1, "end", L - 4.0, T + 10.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4}</text>"#);
    }
    for (k, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .x
            .iter()
            .zip(ser.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            ser.color,
            pts.join(" ")
        );
        let ly = T + 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{}">{}</text>"#,
            L + 8.0,
            ser.color,
            ser.label
        );
    }
    for &(x, y) in markers {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="none" stroke="red"/>"#,
            px(x),
            py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_columns(path: &Path, header: &[&str], cols: &[&[f64]]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b' ').from_path(path)?;
    w.write_record(header)?;
    let n = cols.iter().map(|c| c.len()).min().unwrap_or(0);
    for i in 0..n {
        w.write_record(cols.iter().map(|c| format!("{:e}", c[i])))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `plots/` for a finished run: the energy trace (`r²` and `E` by
/// step, restarts circled) and one overlay per stored snapshot (2D runs are
/// drawn along the middle row). Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let trace = EvolutionTrace::read_csv(&dir.join("trace.csv"))?;
    if trace.is_empty() {
        return Err(Error::Empty("evolution trace"));
    }
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let table = ErrorTable::read_csv(&dir.join("errors.csv"))?;
    let grid = cfg.grid.build()?;
    let out = dir.join("plots");
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();

    let rows = trace.rows();
    let step: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let r2: Vec<f64> = rows.iter().map(|r| r.r_after * r.r_after).collect();
    let energy: Vec<f64> = rows.iter().map(|r| r.energy_after).collect();
    let restart: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.restart_flag))).collect();
    let path = out.join("energy.dat");
    write_columns(&path, &["step", "r2", "E", "restart"], &[&step, &r2, &energy, &restart])?;
    written.push(path);
    let markers: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.restart_flag)
        .map(|r| (r.step as f64, r.r_after * r.r_after))
        .collect();
    let svg = svg_plot(
        &format!("{}: modified and original energy", cfg.experiment),
        "step",
        &[
            Series {
                label: "r²",
                x: &step,
                y: &r2,
                color: "steelblue",
            },
            Series {
                label: "E",
                x: &step,
                y: &energy,
                color: "darkorange",
            },
        ],
        &markers,
    );
    let path = out.join("energy.svg");
    std::fs::write(&path, svg)?;
    written.push(path);

    let nx = grid.axes()[0].points;
    let xs = grid.axes()[0].coords();
    let mid = if grid.dim() == 2 { grid.axes()[1].points / 2 } else { 0 };
    for (i, row) in table.rows.iter().enumerate() {
        for (k, t) in table.times.iter().enumerate() {
            let name = snapshot_name(i, k);
            let snap = dir.join("snapshots").join(&name);
            if row.cells[k].is_none() || !snap.exists() {
                continue;
            }
            let u = read_field_csv(&snap, &grid)?;
            let r = read_field_csv(&dir.join("reference").join(&name), &grid)?;
            let mse = mse_error(&u, &r)?;
            let max_dev = crate::reference::max_abs_diff(&u, &r)?;
            let stem = format!("overlay_p{i}_t{k}");
            let path = out.join(format!("{stem}.dat"));
            if grid.dim() == 1 {
                write_columns(&path, &["x", "u", "reference"], &[&xs, &u, &r])?;
            } else {
                let pts: Vec<Vec<f64>> = (0..grid.len()).map(|q| grid.point(q)).collect();
                let x: Vec<f64> = pts.iter().map(|p| p[0]).collect();
                let y: Vec<f64> = pts.iter().map(|p| p[1]).collect();
                write_columns(&path, &["x", "y", "u", "reference"], &[&x, &y, &u, &r])?;
            }
            written.push(path);
            let line = |f: &[f64]| -> Vec<f64> { f[mid * nx..(mid + 1) * nx].to_vec() };
            let (ul, rl) = (line(&u), line(&r));
            let svg = svg_plot(
                &format!("param {} T={t}: mse {mse:.3e}, max |Δ| {max_dev:.3e}", row.param),
                "x",
                &[
                    Series {
                        label: "network",
                        x: &xs,
                        y: &ul,
                        color: "steelblue",
                    },
                    Series {
                        label: "reference",
                        x: &xs,
                        y: &rl,
                        color: "black",
                    },
                ],
                &[],
            );
            let path = out.join(format!("{stem}.svg"));
            std::fs::write(&path, svg)?;
            written.push(path);
        }
    }
    Ok(written)
}
