//! Operator datasets for the initial condition and their least-squares fit.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::prelude::Solve;
use faer::{Accum, Mat, Par, Side};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deeponet::{jacobian_blocks, DeepONetModel, DeepONetWeights, FieldSample};
use crate::energy::{GradientFlowProblem, Grid, ProblemKind};
use crate::error::{check_finite, check_len, Error, Result};
use crate::net_core::{forward_batch, vjp_sum};
use crate::reference::{interpolate, refine, sav_field_solve, DEFAULT_DT_REF};

/// Half-open tensor grid of sensor locations: `lower + k (upper−lower)/n`,
/// `k = 0..n` per axis, x fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorGrid {
    pub lower: f64,
    pub upper: f64,
    pub per_axis: usize,
    pub dim: usize,
}

impl SensorGrid {
    pub fn validate(&self) -> Result<()> {
        if self.per_axis == 0 || !(1..=2).contains(&self.dim) || !(self.lower < self.upper) {
            return Err(Error::InvalidSpec(format!("bad sensor grid {self:?}")));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.per_axis.pow(self.dim as u32)
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let h = (self.upper - self.lower) / self.per_axis as f64;
        let c = |k: usize| self.lower + k as f64 * h;
        (0..self.count())
            .map(|idx| match self.dim {
                1 => vec![c(idx)],
                _ => vec![c(idx % self.per_axis), c(idx / self.per_axis)],
            })
            .collect()
    }
}

/// Family of initial conditions indexed by one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemFamily {
    /// `u0 = a sin(πx)`, heat flow.
    Heat,
    /// `u0 = sin(πx)`, flow `u_t = c u_xx`; the branch sees `c` on every sensor.
    ParametricHeat,
    /// `u0 = a Π sin(πx_d)`, Allen–Cahn with fixed `eps` (1D or 2D by grid).
    AllenCahn { eps: f64 },
    /// `u0 = u_ε(·, t_start)` from the reference solver started at
    /// `amplitude sin(πx)`; the parameter is `ε`.
    AllenCahnEps {
        amplitude: f64,
        t_start: f64,
        #[serde(default = "default_dt_ref")]
        dt_ref: f64,
        #[serde(default = "default_refine")]
        refine: usize,
    },
}

fn default_dt_ref() -> f64 {
    DEFAULT_DT_REF
}

fn default_refine() -> usize {
    4
}

fn sines(amplitude: f64, point: &[f64]) -> f64 {
    amplitude * point.iter().map(|x| (PI * x).sin()).product::<f64>()
}

impl ProblemFamily {
    pub fn problem(&self, param: f64, grid: &Grid) -> Result<GradientFlowProblem> {
        let kind = match *self {
            ProblemFamily::Heat => ProblemKind::Heat,
            ProblemFamily::ParametricHeat => ProblemKind::ParametricHeat { c: param },
            ProblemFamily::AllenCahn { eps } if grid.dim() == 2 => ProblemKind::AllenCahn2D { eps },
            ProblemFamily::AllenCahn { eps } => ProblemKind::AllenCahn1D { eps },
            ProblemFamily::AllenCahnEps { .. } => ProblemKind::AllenCahn1D { eps: param },
        };
        GradientFlowProblem::new(grid.clone(), kind)
    }

    /// Time at which the generated field is the state of the flow.
    pub fn start_time(&self) -> f64 {
        match *self {
            ProblemFamily::AllenCahnEps { t_start, .. } => t_start,
            _ => 0.0,
        }
    }

    /// Starting field at arbitrary points.
    pub fn initial_at(&self, param: f64, grid: &Grid, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        match *self {
            ProblemFamily::Heat | ProblemFamily::AllenCahn { .. } => {
                Ok(points.iter().map(|p| sines(param, p)).collect())
            }
            ProblemFamily::ParametricHeat => Ok(points.iter().map(|p| sines(1.0, p)).collect()),
            ProblemFamily::AllenCahnEps {
                amplitude,
                t_start,
                dt_ref,
                refine: factor,
            } => {
                let fine = refine(grid, factor)?;
                let problem = self.problem(param, &fine)?;
                let u0: Vec<f64> = (0..fine.len()).map(|k| sines(amplitude, &fine.point(k))).collect();
                let run = sav_field_solve(&problem, &u0, t_start, dt_ref)?;
                points.iter().map(|p| interpolate(&fine, &run.field, p)).collect()
            }
        }
    }

    /// Branch input for one parameter.
    pub fn field_sample(&self, param: f64, sensors: &SensorGrid, grid: &Grid) -> Result<FieldSample> {
        sensors.validate()?;
        let branch_input = match self {
            ProblemFamily::ParametricHeat => vec![param; sensors.count()],
            _ => self.initial_at(param, grid, &sensors.points())?,
        };
        Ok(FieldSample {
            branch_input,
            label: param,
        })
    }
}

/// One `(u, y, 𝒢(u)(y))` triple; `label` is the generating parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSample {
    pub branch_input: Vec<f64>,
    pub y: Vec<f64>,
    pub target: f64,
    pub label: f64,
}

/// `n` uniform draws from `[lo, hi]`; `lo == hi` pins the parameter.
pub fn draw_params(n: usize, range: (f64, f64), seed: u64) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "parameter range [{lo}, {hi}] is inverted or not finite"
        )));
    }
    if n == 0 {
        return Err(Error::Empty("parameter samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| if lo == hi { lo } else { rng.gen_range(lo..=hi) })
        .collect())
}

/// Pairs each drawn parameter's sensor values with every query node.
pub fn generate_dataset(
    family: &ProblemFamily,
    n_param_samples: usize,
    sensors: &SensorGrid,
    query: &Grid,
    param_range: (f64, f64),
    seed: u64,
) -> Result<Vec<OperatorSample>> {
    sensors.validate()?;
    if sensors.dim != query.dim() {
        return Err(Error::InvalidConfig(
            "sensor and query grids differ in dimension".into(),
        ));
    }
    for (a, lower_upper) in query
        .axes()
        .iter()
        .zip(std::iter::repeat((sensors.lower, sensors.upper)))
    {
        if lower_upper.0 < a.lower || lower_upper.1 > a.upper {
            return Err(Error::InvalidConfig("sensors lie outside the query domain".into()));
        }
    }
    let params = draw_params(n_param_samples, param_range, seed)?;
    let nodes: Vec<Vec<f64>> = (0..query.len()).map(|k| query.point(k)).collect();
    let mut out = Vec::with_capacity(params.len() * nodes.len());
    for &param in &params {
        let sample = family.field_sample(param, sensors, query)?;
        let targets = family.initial_at(param, query, &nodes)?;
        for (y, target) in nodes.iter().zip(targets) {
            out.push(OperatorSample {
                branch_input: sample.branch_input.clone(),
                y: y.clone(),
                target,
                label: param,
            });
        }
    }
    Ok(out)
}

/// Distinct branch inputs in first-appearance order.
pub fn field_samples(dataset: &[OperatorSample]) -> Vec<FieldSample> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for s in dataset {
        let key: Vec<u64> = s.branch_input.iter().map(|v| v.to_bits()).collect();
        seen.entry(key).or_insert_with(|| {
            out.push(FieldSample {
                branch_input: s.branch_input.clone(),
                label: s.label,
            });
        });
    }
    out
}

/// Columns `label, y0[, y1], target, s0, …`.
pub fn write_dataset_csv(path: &Path, dataset: &[OperatorSample]) -> Result<()> {
    let first = dataset.first().ok_or(Error::Empty("dataset"))?;
    let (d, m) = (first.y.len(), first.branch_input.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|i| format!("y{i}")));
    header.push("target".into());
    header.extend((0..m).map(|i| format!("s{i}")));
    w.write_record(&header)?;
    for s in dataset {
        check_len("dataset row y", d, s.y.len())?;
        check_len("dataset row sensors", m, s.branch_input.len())?;
        let mut rec = vec![format!("{:e}", s.label)];
        rec.extend(s.y.iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", s.target));
        rec.extend(s.branch_input.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<OperatorSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with('y')).count();
    let m = header.iter().filter(|h| h.starts_with('s')).count();
    if header.len() != 2 + d + m || header.get(0) != Some("label") || header.get(1 + d) != Some("target") {
        return Err(Error::parse("unexpected dataset header").with_path(path));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::parse(format!("bad dataset value: {e}")).with_path(path))?;
        check_finite("dataset row", &vals)?;
        out.push(OperatorSample {
            label: vals[0],
            y: vals[1..1 + d].to_vec(),
            target: vals[1 + d],
            branch_input: vals[2 + d..].to_vec(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub target_mse: f64,
    /// Mini-batch size; `None` trains full batch.
    #[serde(default)]
    pub batch: Option<usize>,
    pub seed: u64,
    /// Levenberg–Marquardt iterations run after Adam.
    #[serde(default)]
    pub polish_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 20_000,
            target_mse: 1e-6,
            batch: None,
            seed: 0,
            polish_iterations: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.target_mse > 0.0) || self.batch == Some(0) {
            return Err(Error::InvalidConfig(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Dataset MSE of the weights at the start of each epoch, then of the
    /// returned weights, then after each accepted polish step.
    pub loss_history: Vec<f64>,
    /// MSE of the returned weights.
    pub final_mse: f64,
    pub epochs: usize,
    /// Accepted Levenberg–Marquardt steps.
    pub polish_steps: usize,
    pub converged: bool,
}

impl TrainReport {
    /// Running minimum of the history.
    pub fn smoothed(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.loss_history
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }
}

/// Dataset indexed by distinct branch inputs and query points, so each net
/// runs once per distinct input.
struct Indexed {
    branch_inputs: Mat<f64>,
    points: Mat<f64>,
    pairs: Vec<(usize, usize)>,
    targets: Vec<f64>,
}

fn index_dataset(model: &DeepONetModel, dataset: &[OperatorSample]) -> Result<Indexed> {
    let mut b_map: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut y_map: HashMap<Vec<u64>, usize> = HashMap::new();
    let (mut bs, mut ys) = (Vec::new(), Vec::new());
    let mut pairs = Vec::with_capacity(dataset.len());
    for s in dataset {
        check_len("sample branch input", model.sensors(), s.branch_input.len())?;
        check_len("sample query point", model.spatial_dim(), s.y.len())?;
        check_finite("sample branch input", &s.branch_input)?;
        check_finite("sample query point", &s.y)?;
        check_finite("sample target", &[s.target])?;
        let bk: Vec<u64> = s.branch_input.iter().map(|v| v.to_bits()).collect();
        let yk: Vec<u64> = s.y.iter().map(|v| v.to_bits()).collect();
        let i = *b_map.entry(bk).or_insert_with(|| {
            bs.push(s.branch_input.clone());
            bs.len() - 1
        });
        let j = *y_map.entry(yk).or_insert_with(|| {
            ys.push(s.y.clone());
            ys.len() - 1
        });
        pairs.push((i, j));
    }
    Ok(Indexed {
        branch_inputs: Mat::from_fn(bs.len(), model.sensors(), |r, c| bs[r][c]),
        points: Mat::from_fn(ys.len(), model.spatial_dim(), |r, c| ys[r][c]),
        pairs,
        targets: dataset.iter().map(|s| s.target).collect(),
    })
}

fn predictions(model: &DeepONetModel, b: &Mat<f64>, g: &Mat<f64>, bias: f64, pairs: &[(usize, usize)]) -> Vec<f64> {
    let p = model.latent();
    pairs
        .iter()
        .map(|&(i, j)| (0..p).map(|k| b[(i, k)] * g[(j, k)]).sum::<f64>() + bias)
        .collect()
}

fn mse_of(pred: &[f64], targets: &[f64]) -> f64 {
    pred.iter().zip(targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64
}

/// MSE of `weights` over `dataset`.
pub fn dataset_mse(model: &DeepONetModel, weights: &DeepONetWeights, dataset: &[OperatorSample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    weights.check(model)?;
    let ix = index_dataset(model, dataset)?;
    let b = forward_batch(model.branch(), &weights.branch, ix.branch_inputs.as_ref())?;
    let g = forward_batch(model.trunk(), &weights.trunk, ix.points.as_ref())?;
    let bias = if model.use_bias() { weights.bias } else { 0.0 };
    Ok(mse_of(&predictions(model, &b, &g, bias, &ix.pairs), &ix.targets))
}

/// Loss and gradient in the `[trunk | branch | bias]` layout over the
/// samples listed in `subset`.
fn loss_and_grad(
    model: &DeepONetModel,
    w: &DeepONetWeights,
    ix: &Indexed,
    subset: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let p = model.latent();
    let b = forward_batch(model.branch(), &w.branch, ix.branch_inputs.as_ref())?;
    let g = forward_batch(model.trunk(), &w.trunk, ix.points.as_ref())?;
    let bias = if model.use_bias() { w.bias } else { 0.0 };
    let mut cb = Mat::<f64>::zeros(b.nrows(), p);
    let mut cg = Mat::<f64>::zeros(g.nrows(), p);
    let scale = 2.0 / subset.len() as f64;
    let (mut loss, mut dbias) = (0.0, 0.0);
    for &s in subset {
        let (i, j) = ix.pairs[s];
        let u = (0..p).map(|k| b[(i, k)] * g[(j, k)]).sum::<f64>() + bias;
        let r = u - ix.targets[s];
        loss += r * r;
        let d = scale * r;
        dbias += d;
        for k in 0..p {
            cb[(i, k)] += d * g[(j, k)];
            cg[(j, k)] += d * b[(i, k)];
        }
    }
    let (_, gb) = vjp_sum(model.branch(), &w.branch, ix.branch_inputs.as_ref(), cb.as_ref())?;
    let (_, gt) = vjp_sum(model.trunk(), &w.trunk, ix.points.as_ref(), cg.as_ref())?;
    let mut grad = gt;
    grad.extend(gb);
    if model.use_bias() {
        grad.push(dbias);
    }
    Ok((loss / subset.len() as f64, grad))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((x, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Adam on the dataset MSE from `init`. Returns the lowest-loss weights seen.
pub fn train_initial(
    model: &DeepONetModel,
    init: DeepONetWeights,
    dataset: &[OperatorSample],
    config: &TrainConfig,
) -> Result<(DeepONetWeights, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    init.check(model)?;
    let ix = index_dataset(model, dataset)?;
    let n = dataset.len();
    let full: Vec<usize> = (0..n).collect();
    let batch = config.batch.filter(|&b| b < n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = full.clone();

    let mut theta = init.flatten(model);
    let mut adam = Adam::new(theta.len());
    let mut history = Vec::with_capacity(config.max_epochs.min(100_000) + 1);
    let mut best = (f64::INFINITY, theta.clone());
    let mut converged = false;
    let mut epochs = 0;

    loop {
        let w = DeepONetWeights::from_flat(model, &theta).map_err(|_| Error::Divergence {
            epoch: epochs,
            loss: f64::NAN,
        })?;
        let (loss, grad) = loss_and_grad(model, &w, &ix, &full)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: epochs, loss });
        }
        history.push(loss);
        if loss < best.0 {
            best = (loss, theta.clone());
        }
        if loss <= config.target_mse {
            converged = true;
            break;
        }
        if epochs == config.max_epochs {
            break;
        }
        match batch {
            None => adam.step(&mut theta, &grad, config.learning_rate),
            Some(bs) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs) {
                    let w = DeepONetWeights::from_flat(model, &theta).map_err(|_| Error::Divergence {
                        epoch: epochs,
                        loss: f64::NAN,
                    })?;
                    let (_, g) = loss_and_grad(model, &w, &ix, chunk)?;
                    adam.step(&mut theta, &g, config.learning_rate);
                }
            }
        }
        epochs += 1;
        if epochs % 1000 == 0 {
            log::debug!("epoch {epochs}: mse {loss:.3e}");
        }
    }
    let mut weights = DeepONetWeights::from_flat(model, &best.1)?;
    if history.last() != Some(&best.0) {
        history.push(best.0);
    }
    let mut final_mse = best.0;
    let mut polish_steps = 0;
    if !converged && config.polish_iterations > 0 {
        let (w, polish) = levenberg_marquardt(model, weights, dataset, config.polish_iterations, config.target_mse)?;
        weights = w;
        polish_steps = polish.len() - 1;
        history.extend_from_slice(&polish[1..]);
        final_mse = *polish.last().expect("nonempty");
        converged = final_mse <= config.target_mse;
    }
    Ok((
        weights,
        TrainReport {
            loss_history: history,
            final_mse,
            epochs,
            polish_steps,
            converged,
        },
    ))
}

/// Residual Jacobian of the dataset in the `[trunk | branch | bias]` layout,
/// one row per sample.
fn dataset_jacobian(model: &DeepONetModel, w: &DeepONetWeights, ix: &Indexed) -> Result<Mat<f64>> {
    let mut jmat = Mat::<f64>::zeros(ix.pairs.len(), model.param_count());
    let nt = model.trunk_params();
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); ix.branch_inputs.nrows()];
    for (s, &(i, _)) in ix.pairs.iter().enumerate() {
        rows_of[i].push(s);
    }
    for (i, rows) in rows_of.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let sample = FieldSample {
            branch_input: ix.branch_inputs.row(i).iter().copied().collect(),
            label: 0.0,
        };
        let (j1, j2) = jacobian_blocks(model, w, &sample, ix.points.as_ref())?;
        for &s in rows {
            let q = ix.pairs[s].1;
            for c in 0..j1.ncols() {
                jmat[(s, c)] = j1[(q, c)];
            }
            for c in 0..j2.ncols() {
                jmat[(s, nt + c)] = j2[(q, c)];
            }
        }
    }
    Ok(jmat)
}

/// Levenberg–Marquardt on the dataset MSE, stopping early at `target_mse`.
/// Returns the improved weights and the MSE before the first and after every
/// accepted step.
pub fn levenberg_marquardt(
    model: &DeepONetModel,
    init: DeepONetWeights,
    dataset: &[OperatorSample],
    iterations: usize,
    target_mse: f64,
) -> Result<(DeepONetWeights, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    init.check(model)?;
    let ix = index_dataset(model, dataset)?;
    let eval = |w: &DeepONetWeights| -> Result<Vec<f64>> {
        let b = forward_batch(model.branch(), &w.branch, ix.branch_inputs.as_ref())?;
        let g = forward_batch(model.trunk(), &w.trunk, ix.points.as_ref())?;
        let bias = if model.use_bias() { w.bias } else { 0.0 };
        let pred = predictions(model, &b, &g, bias, &ix.pairs);
        Ok(pred.iter().zip(&ix.targets).map(|(p, t)| p - t).collect())
    };
    let mse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
    let mut w = init;
    let mut resid = eval(&w)?;
    let mut history = vec![mse(&resid)];
    let mut mu_rel = 1e-3;
    for _ in 0..iterations {
        if *history.last().expect("nonempty") <= target_mse {
            break;
        }
        let jmat = dataset_jacobian(model, &w, &ix)?;
        let n = jmat.ncols();
        let mut gram = Mat::<f64>::zeros(n, n);
        matmul(
            gram.as_mut(),
            Accum::Replace,
            jmat.transpose(),
            jmat.as_ref(),
            1.0,
            Par::Seq,
        );
        let rcol = Mat::<f64>::from_fn(resid.len(), 1, |i, _| -resid[i]);
        let mut grad = Mat::<f64>::zeros(n, 1);
        matmul(
            grad.as_mut(),
            Accum::Replace,
            jmat.transpose(),
            rcol.as_ref(),
            1.0,
            Par::Seq,
        );
        let base = (0..n).map(|i| gram[(i, i)]).sum::<f64>() / n as f64;
        let theta0 = w.flatten(model);
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = gram.clone();
            for i in 0..n {
                damped[(i, i)] += base * mu_rel;
            }
            if let Ok(llt) = damped.llt(Side::Lower) {
                let step = llt.solve(&grad);
                let theta: Vec<f64> = theta0.iter().enumerate().map(|(i, a)| a + step[(i, 0)]).collect();
                if let Ok(trial) = DeepONetWeights::from_flat(model, &theta) {
                    let r = eval(&trial)?;
                    if mse(&r) < *history.last().expect("nonempty") {
                        w = trial;
                        resid = r;
                        history.push(mse(&resid));
                        mu_rel = (mu_rel / 3.0).max(1e-14);
                        accepted = true;
                        break;
                    }
                }
            }
            mu_rel *= 4.0;
        }
        if !accepted {
            break;
        }
        log::debug!("LM mse {:.3e} mu {:.1e}", history.last().expect("nonempty"), mu_rel);
    }
    Ok((w, history))
}
