//! One SAV-stabilized evolution step of the DeepONet parameters.
//!
//! The scalar auxiliary variable `r ≈ √E` is advanced by the decoupled
//! update [`update_r`]; the network is then asked to follow
//! `∂u/∂t = −ξ 𝒩(u)` with `ξ = r^{n+1}/√E^n`, which is a linear
//! least-squares problem for the parameter velocities `γ`:
//!
//! ```text
//!   min_γ ‖ [J1 J2] γ + ξ 𝐍 ‖²_Ω + λ‖γ‖²
//! ```
//!
//! Rows are quadrature weighted so the discrete objective approximates the
//! integral one. `(r^{n+1})² ≤ (r^n)²` holds for any `dt > 0`, independently
//! of how well the least-squares fit succeeds.

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::prelude::SolveLstsq;
use faer::{Accum, Mat, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::deeponet::{evaluate_field, jacobian_blocks, DeepONetModel, DeepONetWeights, FieldSample};
use crate::energy::{free_energy, norm_sq, variational_derivative, GradientFlowProblem, Grid, ENERGY_FLOOR};
use crate::error::{check_finite, check_len, Error, Result};

/// Slack allowed in the discrete dissipation check.
pub const DISSIPATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavState {
    pub r: f64,
    /// Mean energy at the current step.
    pub energy: f64,
    pub t: f64,
    pub dt: f64,
    pub step: usize,
    /// `r^{n+1}/√E^n` of the last completed step (1 before the first).
    pub xi: f64,
}

impl SavState {
    /// `r(0) = √E(0)`.
    pub fn initial(energy: f64, t: f64, dt: f64) -> Result<Self> {
        if !(energy >= 0.0) || !energy.is_finite() {
            return Err(Error::NonPositiveEnergy(energy));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
        }
        Ok(Self {
            r: energy.sqrt(),
            energy,
            t,
            dt,
            step: 0,
            xi: 1.0,
        })
    }
}

/// `r^{n+1} = r^n / (1 + dt ‖𝒩‖² / (2E))`.
pub fn update_r(r_n: f64, energy_n: f64, n_norm_sq: f64, dt: f64) -> Result<f64> {
    if !(energy_n > 0.0) {
        return Err(Error::NonPositiveEnergy(energy_n));
    }
    if !(n_norm_sq >= 0.0) || !(dt >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "update_r needs ‖N‖² ≥ 0 and dt ≥ 0, got {n_norm_sq} and {dt}"
        )));
    }
    Ok(r_n / (1.0 + dt * n_norm_sq / (2.0 * energy_n)))
}

/// Samples evolved together with one shared weight vector, and the
/// gradient-flow problem each of them follows.
#[derive(Debug, Clone)]
pub struct EvolutionSet {
    samples: Vec<FieldSample>,
    problems: Vec<GradientFlowProblem>,
    points: Mat<f64>,
    row_scale: Vec<f64>,
}

impl EvolutionSet {
    /// `problems` holds one entry shared by all samples or one per sample;
    /// all problems must live on the same grid.
    pub fn new(samples: Vec<FieldSample>, problems: Vec<GradientFlowProblem>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("evolution samples"));
        }
        if problems.is_empty() {
            return Err(Error::Empty("evolution problems"));
        }
        if problems.len() != 1 {
            check_len("problems per sample", samples.len(), problems.len())?;
        }
        let grid = problems[0].grid.clone();
        if problems.iter().any(|p| p.grid != grid) {
            return Err(Error::InvalidSpec("all evolution problems must share one grid".into()));
        }
        let volume = grid.volume();
        let row_scale = grid.weights().iter().map(|w| (w / volume).sqrt()).collect();
        Ok(Self {
            points: grid.points(),
            samples,
            problems,
            row_scale,
        })
    }

    pub fn samples(&self) -> &[FieldSample] {
        &self.samples
    }

    pub fn problems(&self) -> &[GradientFlowProblem] {
        &self.problems
    }

    pub fn problem(&self, j: usize) -> &GradientFlowProblem {
        &self.problems[if self.problems.len() == 1 { 0 } else { j }]
    }

    pub fn grid(&self) -> &Grid {
        &self.problems[0].grid
    }

    pub fn points(&self) -> MatRef<'_, f64> {
        self.points.as_ref()
    }

    /// `√(w_i/|Ω|)` per grid node.
    pub fn row_scale(&self) -> &[f64] {
        &self.row_scale
    }

    /// Network fields, one `Vec` per sample.
    pub fn fields(&self, model: &DeepONetModel, weights: &DeepONetWeights) -> Result<Vec<Vec<f64>>> {
        let u = evaluate_field(model, weights, &self.samples, self.points())?;
        Ok((0..u.nrows()).map(|j| u.row(j).iter().copied().collect()).collect())
    }
}

/// Energetics of the current fields.
#[derive(Debug, Clone)]
pub struct FieldEnergetics {
    pub energies: Vec<f64>,
    /// Sample mean of the free energy.
    pub mean_energy: f64,
    pub derivatives: Vec<Vec<f64>>,
    /// Sample mean of `∫ 𝒩²`.
    pub mean_norm_sq: f64,
}

pub fn energetics(set: &EvolutionSet, fields: &[Vec<f64>]) -> Result<FieldEnergetics> {
    let s = fields.len() as f64;
    let mut energies = Vec::with_capacity(fields.len());
    let mut derivatives = Vec::with_capacity(fields.len());
    let mut n2 = 0.0;
    for (j, f) in fields.iter().enumerate() {
        let problem = set.problem(j);
        energies.push(free_energy(problem, f)?);
        let n = variational_derivative(problem, f)?;
        n2 += norm_sq(&problem.grid, &n)?;
        derivatives.push(n);
    }
    let mean_energy = energies.iter().sum::<f64>() / s;
    Ok(FieldEnergetics {
        energies,
        mean_energy,
        derivatives,
        mean_norm_sq: n2 / s,
    })
}

#[derive(Debug, Clone)]
pub struct LsqSystem {
    pub jmat: Mat<f64>,
    pub rhs: Vec<f64>,
    pub lambda: f64,
}

impl LsqSystem {
    pub fn new(jmat: Mat<f64>, rhs: Vec<f64>, lambda: f64) -> Result<Self> {
        check_len("least-squares rhs", jmat.nrows(), rhs.len())?;
        if jmat.nrows() == 0 || jmat.ncols() == 0 {
            return Err(Error::Empty("least-squares system"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "regularization must be ≥ 0, got {lambda}"
            )));
        }
        Ok(Self { jmat, rhs, lambda })
    }

    /// `λ = rel · trace(JᵀJ) / cols`.
    pub fn relative_lambda(jmat: MatRef<'_, f64>, rel: f64) -> f64 {
        let fro2: f64 = (0..jmat.ncols())
            .map(|c| jmat.col(c).iter().map(|v| v * v).sum::<f64>())
            .sum();
        rel * fro2 / jmat.ncols() as f64
    }
}

/// Builds the stacked system for step coefficient `xi`.
pub fn assemble_system(
    model: &DeepONetModel,
    weights: &DeepONetWeights,
    set: &EvolutionSet,
    xi: f64,
    lambda_rel: f64,
) -> Result<LsqSystem> {
    let fields = set.fields(model, weights)?;
    let en = energetics(set, &fields)?;
    assemble_from_derivatives(model, weights, set, &en.derivatives, xi, lambda_rel)
}

pub(crate) fn assemble_from_derivatives(
    model: &DeepONetModel,
    weights: &DeepONetWeights,
    set: &EvolutionSet,
    derivatives: &[Vec<f64>],
    xi: f64,
    lambda_rel: f64,
) -> Result<LsqSystem> {
    let n = set.grid().len();
    let rows = n * set.samples.len();
    let nt = model.trunk_params();
    let mut jmat = Mat::<f64>::zeros(rows, model.param_count());
    let mut rhs = vec![0.0; rows];
    for (j, sample) in set.samples.iter().enumerate() {
        let (j1, j2) = jacobian_blocks(model, weights, sample, set.points())?;
        let base = j * n;
        for c in 0..j1.ncols() {
            let src = j1.col(c);
            let mut dst = jmat.col_mut(c);
            for i in 0..n {
                dst[base + i] = src[i] * set.row_scale[i];
            }
        }
        for c in 0..j2.ncols() {
            let src = j2.col(c);
            let mut dst = jmat.col_mut(nt + c);
            for i in 0..n {
                dst[base + i] = src[i] * set.row_scale[i];
            }
        }
        for i in 0..n {
            rhs[base + i] = -xi * derivatives[j][i] * set.row_scale[i];
        }
    }
    for c in 0..jmat.ncols() {
        if let Some(i) = jmat.col(c).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Jacobian (row = sample * grid + node)",
                index: i,
            });
        }
    }
    check_finite("least-squares rhs", &rhs)?;
    let lambda = LsqSystem::relative_lambda(jmat.as_ref(), lambda_rel);
    LsqSystem::new(jmat, rhs, lambda)
}

#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub gamma: Vec<f64>,
    /// `‖Jγ − rhs‖`.
    pub residual_norm: f64,
    /// Set when `λ = 0` and the minimum-norm SVD fallback was used.
    pub rank_deficient: bool,
}

fn col_to_vec(m: MatRef<'_, f64>) -> Vec<f64> {
    m.col(0).iter().copied().collect()
}

fn rhs_mat(rhs: &[f64], rows: usize) -> Mat<f64> {
    Mat::<f64>::from_fn(rows, 1, |i, _| if i < rhs.len() { rhs[i] } else { 0.0 })
}

fn is_rank_deficient(r: MatRef<'_, f64>) -> bool {
    let k = r.nrows().min(r.ncols());
    let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    max == 0.0 || diag.iter().any(|&d| d <= 1e-12 * max)
}

fn pseudo_inverse_solve(j: MatRef<'_, f64>, rhs: &[f64]) -> Result<Vec<f64>> {
    let svd = j
        .thin_svd()
        .map_err(|e| Error::LinearAlgebra(format!("SVD failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let smax = s.iter().copied().fold(0.0, f64::max);
    let cutoff = smax * f64::EPSILON * j.nrows().max(j.ncols()) as f64;
    let u = svd.U();
    let v = svd.V();
    let mut gamma = vec![0.0; j.ncols()];
    for k in 0..s.nrows() {
        if s[k] <= cutoff {
            continue;
        }
        let coeff = u.col(k).iter().zip(rhs).map(|(a, b)| a * b).sum::<f64>() / s[k];
        for (g, vk) in gamma.iter_mut().zip(v.col(k).iter()) {
            *g += coeff * vk;
        }
    }
    Ok(gamma)
}

const REFINE_TOLERANCE: f64 = 1e-12;
const MAX_REFINE_SWEEPS: usize = 10;

/// Minimizes `‖Jγ − rhs‖² + λ‖γ‖²` by orthogonal factorizations. Tall
/// systems factor `[J; √λ I]`; wide ones factor `Jᵀ = Q R` first and work
/// in the row space of `J`.
pub fn solve_lsq(system: &LsqSystem) -> Result<LsqSolution> {
    let j = system.jmat.as_ref();
    let (m, n) = (j.nrows(), j.ncols());
    let lambda = system.lambda;
    let mut rank_deficient = false;

    let gamma = if m >= n {
        if lambda > 0.0 {
            let sl = lambda.sqrt();
            let aug = Mat::<f64>::from_fn(m + n, n, |r, c| {
                if r < m {
                    j[(r, c)]
                } else if r - m == c {
                    sl
                } else {
                    0.0
                }
            });
            col_to_vec(aug.qr().solve_lstsq(rhs_mat(&system.rhs, m + n)).as_ref())
        } else {
            let qr = j.qr();
            if is_rank_deficient(qr.thin_R()) {
                rank_deficient = true;
                pseudo_inverse_solve(j, &system.rhs)?
            } else {
                col_to_vec(qr.solve_lstsq(rhs_mat(&system.rhs, m)).as_ref())
            }
        }
    } else {
        // J = R1ᵀ Q1ᵀ with Jᵀ = Q1 R1.
        let jt = j.transpose().to_owned();
        let qr = jt.qr();
        let r1 = qr.thin_R();
        if lambda > 0.0 {
            // γ = Jᵀ w, (JJᵀ + λI) w = rhs, JJᵀ + λI = R2ᵀ R2 from [R1; √λ I].
            let sl = lambda.sqrt();
            let stacked = Mat::<f64>::from_fn(2 * m, m, |r, c| {
                if r < m {
                    r1[(r, c)]
                } else if r - m == c {
                    sl
                } else {
                    0.0
                }
            });
            let r2 = stacked.qr().thin_R().to_owned();
            let solve = |b: &[f64]| {
                let mut w = rhs_mat(b, m);
                solve_lower_triangular_in_place(r2.transpose(), w.as_mut(), Par::Seq);
                solve_upper_triangular_in_place(r2.as_ref(), w.as_mut(), Par::Seq);
                col_to_vec(w.as_ref())
            };
            // Newton refinement on the true gradient g = Jᵀ(Jγ − rhs) + λγ,
            // with (JᵀJ + λI)⁻¹ = (I − Jᵀ(JJᵀ + λI)⁻¹J)/λ.
            let gradient = |gamma: &[f64]| -> Vec<f64> {
                let r: Vec<f64> = apply(j, gamma).iter().zip(&system.rhs).map(|(a, b)| a - b).collect();
                apply_t(j, &r).iter().zip(gamma).map(|(g, x)| g + lambda * x).collect()
            };
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let target = REFINE_TOLERANCE * norm(&apply_t(j, &system.rhs));
            let mut gamma = apply_t(j, &solve(&system.rhs));
            let mut grad = gradient(&gamma);
            let mut gnorm = norm(&grad);
            for _ in 0..MAX_REFINE_SWEEPS {
                if gnorm <= target {
                    break;
                }
                let back = apply_t(j, &solve(&apply(j, &grad)));
                let trial: Vec<f64> = gamma
                    .iter()
                    .zip(grad.iter().zip(&back))
                    .map(|(x, (g, b))| x - (g - b) / lambda)
                    .collect();
                let trial_grad = gradient(&trial);
                let trial_norm = norm(&trial_grad);
                if !(trial_norm < gnorm) {
                    break;
                }
                (gamma, grad, gnorm) = (trial, trial_grad, trial_norm);
            }
            gamma
        } else if is_rank_deficient(r1) {
            rank_deficient = true;
            pseudo_inverse_solve(j, &system.rhs)?
        } else {
            // minimum norm: γ = Q1 R1⁻ᵀ rhs
            let mut z = rhs_mat(&system.rhs, m);
            solve_lower_triangular_in_place(r1.transpose(), z.as_mut(), Par::Seq);
            let q1 = qr.compute_thin_Q();
            let mut gamma = Mat::<f64>::zeros(n, 1);
            matmul(gamma.as_mut(), Accum::Replace, q1.as_ref(), z.as_ref(), 1.0, Par::Seq);
            col_to_vec(gamma.as_ref())
        }
    };
    check_finite("least-squares solution", &gamma)?;
    let residual = apply(j, &gamma)
        .iter()
        .zip(&system.rhs)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(LsqSolution {
        gamma,
        residual_norm: residual,
        rank_deficient,
    })
}

fn apply(j: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let xm = Mat::<f64>::from_fn(x.len(), 1, |i, _| x[i]);
    let mut out = Mat::<f64>::zeros(j.nrows(), 1);
    matmul(out.as_mut(), Accum::Replace, j, xm.as_ref(), 1.0, Par::Seq);
    col_to_vec(out.as_ref())
}

fn apply_t(j: MatRef<'_, f64>, y: &[f64]) -> Vec<f64> {
    apply(j.transpose(), y)
}

/// `(‖Jᵀ(Jγ − rhs) + λγ‖, ‖Jᵀ rhs‖)`: first-order optimality of the
/// regularized objective, and its natural scale.
pub fn stationarity(system: &LsqSystem, gamma: &[f64]) -> (f64, f64) {
    let j = system.jmat.as_ref();
    let resid: Vec<f64> = apply(j, gamma).iter().zip(&system.rhs).map(|(a, b)| a - b).collect();
    let grad = apply_t(j, &resid);
    let g = grad
        .iter()
        .zip(gamma)
        .map(|(a, x)| (a + system.lambda * x).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = apply_t(j, &system.rhs).iter().map(|v| v * v).sum::<f64>().sqrt();
    (g, scale)
}

fn stationarity_ratio(system: &LsqSystem, gamma: &[f64]) -> f64 {
    let (g, scale) = stationarity(system, gamma);
    if scale == 0.0 {
        if g == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        g / scale
    }
}

/// `W^{n+1} = W^n + dt γ` in the `[trunk | branch | bias]` layout.
pub fn euler_step(model: &DeepONetModel, weights: &DeepONetWeights, gamma: &[f64], dt: f64) -> Result<DeepONetWeights> {
    check_len("parameter velocity", model.param_count(), gamma.len())?;
    let flat: Vec<f64> = weights
        .flatten(model)
        .iter()
        .zip(gamma)
        .map(|(w, g)| w + dt * g)
        .collect();
    DeepONetWeights::from_flat(model, &flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// Time at the end of the step.
    pub t: f64,
    pub dt_used: f64,
    pub r_before: f64,
    /// `r^{n+1}` from the decoupled update, before any restart.
    pub r_after: f64,
    /// SAV value carried into the next step (differs from `r_after` only on
    /// restart).
    pub r_next: f64,
    pub energy_before: f64,
    pub energy_after: f64,
    pub xi: f64,
    pub lsq_residual_norm: f64,
    /// `‖Jᵀ(Jγ−rhs)+λγ‖ / ‖Jᵀrhs‖`.
    pub stationarity: f64,
    pub restart_flag: bool,
    pub energy_floored: bool,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    /// Relative Tikhonov weight: `λ = lambda_rel · trace(JᵀJ)/cols`.
    pub lambda_rel: f64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self { lambda_rel: 1e-8 }
    }
}

/// One step: energetics of `u^n`, SAV update, least squares, explicit
/// Euler, energy of `u^{n+1}`. Restart is left to the caller.
pub fn evolve_step(
    model: &DeepONetModel,
    weights: &DeepONetWeights,
    set: &EvolutionSet,
    state: &SavState,
    cfg: &EvolveConfig,
) -> Result<(DeepONetWeights, SavState, StepDiagnostics)> {
    let dt = state.dt;
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    let fields = set.fields(model, weights)?;
    let en = energetics(set, &fields)?;
    let energy_floored = en.mean_energy < ENERGY_FLOOR;
    let energy_eff = en.mean_energy.max(ENERGY_FLOOR);

    let r_after = update_r(state.r, energy_eff, en.mean_norm_sq, dt)?;
    let xi = r_after / energy_eff.sqrt();

    let system = assemble_from_derivatives(model, weights, set, &en.derivatives, xi, cfg.lambda_rel)?;
    let sol = solve_lsq(&system)?;
    let stationarity = stationarity_ratio(&system, &sol.gamma);
    let next = euler_step(model, weights, &sol.gamma, dt)?;

    let new_fields = set.fields(model, &next)?;
    let energy_after = crate::energy::mean_energy(set.problems(), &new_fields)?;
    let t = state.t + dt;
    if !energy_after.is_finite() {
        return Err(Error::BlowUp {
            step: state.step + 1,
            t,
        });
    }
    if r_after * r_after - state.r * state.r > DISSIPATION_TOLERANCE {
        return Err(Error::DissipationViolated {
            step: state.step + 1,
            before: state.r * state.r,
            after: r_after * r_after,
        });
    }
    let new_state = SavState {
        r: r_after,
        energy: energy_after,
        t,
        dt,
        step: state.step + 1,
        xi,
    };
    let diag = StepDiagnostics {
        step: new_state.step,
        t,
        dt_used: dt,
        r_before: state.r,
        r_after,
        r_next: r_after,
        energy_before: en.mean_energy,
        energy_after,
        xi,
        lsq_residual_norm: sol.residual_norm,
        stationarity,
        restart_flag: false,
        energy_floored,
        rank_deficient: sol.rank_deficient,
    };
    Ok((next, new_state, diag))
}
