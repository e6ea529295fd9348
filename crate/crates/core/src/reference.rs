//! Ground truth: closed-form heat solutions and a fine-grid SAV finite
//! difference solver for Allen–Cahn.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::{
    free_energy, norm_sq, read_field_csv, variational_derivative, write_field_csv, Axis, GradientFlowProblem, Grid,
    ProblemKind, ENERGY_FLOOR,
};
use crate::error::{check_finite, check_len, Error, Result};
use crate::sav_evolve::{update_r, DISSIPATION_TOLERANCE};

/// Default reference step for the finite-difference solver.
pub const DEFAULT_DT_REF: f64 = 1e-5;

/// `a sin(πx) e^{−π²t}`.
pub fn heat_exact(a: f64, x: f64, t: f64) -> f64 {
    a * (PI * x).sin() * (-PI * PI * t).exp()
}

/// `sin(πx) e^{−cπ²t}`.
pub fn parametric_heat_exact(c: f64, x: f64, t: f64) -> f64 {
    (PI * x).sin() * (-c * PI * PI * t).exp()
}

/// Mean squared pointwise difference.
pub fn mse_error(field: &[f64], reference: &[f64]) -> Result<f64> {
    check_len("mse fields", reference.len(), field.len())?;
    if field.is_empty() {
        return Err(Error::Empty("mse fields"));
    }
    Ok(field.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / field.len() as f64)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("max-abs fields", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Outcome of a field-space SAV run.
#[derive(Debug, Clone)]
pub struct SavFieldRun {
    pub field: Vec<f64>,
    pub steps: usize,
    /// `r` after every step, starting with `r(0) = √E(u0)`.
    pub r_history: Vec<f64>,
}

/// First-order SAV on grid values: `r` by the decoupled update, then
/// `u ← u − dt (r^{n+1}/√E^n) 𝒩(u)`. The last step is shortened to land
/// on `t_final`.
pub fn sav_field_solve(problem: &GradientFlowProblem, initial: &[f64], t_final: f64, dt: f64) -> Result<SavFieldRun> {
    check_len("reference initial field", problem.grid.len(), initial.len())?;
    check_finite("reference initial field", initial)?;
    if !(dt > 0.0) || !(t_final >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need dt > 0 and t_final ≥ 0, got {dt}, {t_final}"
        )));
    }
    let mut u = initial.to_vec();
    let mut r = free_energy(problem, &u)?.sqrt();
    let mut r_history = vec![r];
    let steps = if t_final == 0.0 {
        0
    } else {
        (t_final / dt - 1e-9).ceil() as usize
    };
    for n in 0..steps {
        let h = if n + 1 == steps { t_final - n as f64 * dt } else { dt };
        let energy = free_energy(problem, &u)?.max(ENERGY_FLOOR);
        let nx = variational_derivative(problem, &u)?;
        let r_next = update_r(r, energy, norm_sq(&problem.grid, &nx)?, h)?;
        let xi = r_next / energy.sqrt();
        for (ui, ni) in u.iter_mut().zip(&nx) {
            *ui -= h * xi * ni;
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                step: n + 1,
                t: n as f64 * dt + h,
            });
        }
        if r_next * r_next - r * r > DISSIPATION_TOLERANCE {
            return Err(Error::DissipationViolated {
                step: n + 1,
                before: r * r,
                after: r_next * r_next,
            });
        }
        r = r_next;
        r_history.push(r);
    }
    Ok(SavFieldRun {
        field: u,
        steps,
        r_history,
    })
}

/// Allen–Cahn reference on `grid` (1D or 2D by grid dimension).
pub fn allen_cahn_reference(initial: &[f64], eps: f64, grid: &Grid, t_final: f64, dt_ref: f64) -> Result<Vec<f64>> {
    let kind = match grid.dim() {
        1 => ProblemKind::AllenCahn1D { eps },
        _ => ProblemKind::AllenCahn2D { eps },
    };
    let problem = GradientFlowProblem::new(grid.clone(), kind)?;
    Ok(sav_field_solve(&problem, initial, t_final, dt_ref)?.field)
}

/// Each axis refined `factor` times (same end points).
pub fn refine(grid: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::InvalidConfig("refinement factor must be ≥ 1".into()));
    }
    Grid::new(
        grid.axes()
            .iter()
            .map(|a| Axis {
                lower: a.lower,
                upper: a.upper,
                points: (a.points - 1) * factor + 1,
            })
            .collect(),
    )
}

fn locate(axis: &Axis, x: f64) -> (usize, f64) {
    let s = (x - axis.lower) / axis.spacing();
    let i = (s.floor().max(0.0) as usize).min(axis.points - 2);
    (i, (s - i as f64).clamp(0.0, 1.0))
}

/// Piecewise (bi)linear interpolant of `field` on `grid` at `point`.
pub fn interpolate(grid: &Grid, field: &[f64], point: &[f64]) -> Result<f64> {
    check_len("interpolation field", grid.len(), field.len())?;
    check_len("interpolation point", grid.dim(), point.len())?;
    Ok(match grid.axes() {
        [ax] => {
            let (i, s) = locate(ax, point[0]);
            (1.0 - s) * field[i] + s * field[i + 1]
        }
        [ax, ay] => {
            let (i, s) = locate(ax, point[0]);
            let (j, t) = locate(ay, point[1]);
            let at = |ii: usize, jj: usize| field[jj * ax.points + ii];
            (1.0 - t) * ((1.0 - s) * at(i, j) + s * at(i + 1, j))
                + t * ((1.0 - s) * at(i, j + 1) + s * at(i + 1, j + 1))
        }
        _ => unreachable!("validated grid dimension"),
    })
}

/// [`interpolate`] at every node of `to`; exact where nodes coincide.
pub fn resample(from: &Grid, field: &[f64], to: &Grid) -> Result<Vec<f64>> {
    if from.dim() != to.dim() {
        return Err(Error::DimensionMismatch {
            context: "resample grid dimension",
            expected: from.dim(),
            actual: to.dim(),
        });
    }
    (0..to.len()).map(|k| interpolate(from, field, &to.point(k))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMethod {
    Analytic,
    SavFd,
}

/// One reference field: `kind` at time `t_final`, started from
/// `amplitude · Π sin(πx_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRun {
    pub kind: ProblemKind,
    pub amplitude: f64,
    /// Grid the result is reported on.
    pub grid: Grid,
    pub t_final: f64,
    pub dt_ref: f64,
    /// Axis refinement of the solver grid relative to `grid`.
    pub refine: usize,
}

impl ReferenceRun {
    /// 201 points in 1D and 101×101 in 2D for 51-point evaluation grids.
    pub fn new(kind: ProblemKind, amplitude: f64, grid: Grid, t_final: f64) -> Self {
        let refine = if grid.dim() == 1 { 4 } else { 2 };
        Self {
            kind,
            amplitude,
            grid,
            t_final,
            dt_ref: DEFAULT_DT_REF,
            refine,
        }
    }

    pub fn method(&self) -> ReferenceMethod {
        match self.kind {
            ProblemKind::Heat | ProblemKind::ParametricHeat { .. } => ReferenceMethod::Analytic,
            _ => ReferenceMethod::SavFd,
        }
    }

    fn initial_on(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.len())
            .map(|k| self.amplitude * grid.point(k).iter().map(|x| (PI * x).sin()).product::<f64>())
            .collect()
    }

    pub fn compute(&self) -> Result<Vec<f64>> {
        if self.method() == ReferenceMethod::SavFd && self.dt_ref > DEFAULT_DT_REF {
            return Err(Error::InvalidConfig(format!(
                "finite-difference reference needs dt_ref ≤ {DEFAULT_DT_REF}, got {}",
                self.dt_ref
            )));
        }
        let coords = |k: usize| self.grid.point(k)[0];
        match self.kind {
            ProblemKind::Heat => Ok((0..self.grid.len())
                .map(|k| heat_exact(self.amplitude, coords(k), self.t_final))
                .collect()),
            ProblemKind::ParametricHeat { c } => Ok((0..self.grid.len())
                .map(|k| self.amplitude * parametric_heat_exact(c, coords(k), self.t_final))
                .collect()),
            kind => {
                let fine = refine(&self.grid, self.refine)?;
                let problem = GradientFlowProblem::new(fine.clone(), kind)?;
                let run = sav_field_solve(&problem, &self.initial_on(&fine), self.t_final, self.dt_ref)?;
                resample(&fine, &run.field, &self.grid)
            }
        }
    }

    /// File name unique to every field of the run.
    pub fn cache_key(&self) -> String {
        let kind = match self.kind {
            ProblemKind::Heat => "heat".to_string(),
            ProblemKind::ParametricHeat { c } => format!("pheat-c{c:e}"),
            ProblemKind::AllenCahn1D { eps } => format!("ac1d-eps{eps:e}"),
            ProblemKind::AllenCahn2D { eps } => format!("ac2d-eps{eps:e}"),
        };
        let axes: Vec<String> = self
            .grid
            .axes()
            .iter()
            .map(|a| format!("{:e}_{:e}_{}", a.lower, a.upper, a.points))
            .collect();
        format!(
            "{kind}-a{:e}-g{}-t{:e}-dt{:e}-r{}.csv",
            self.amplitude,
            axes.join("x"),
            self.t_final,
            self.dt_ref,
            self.refine
        )
    }
}

/// Directory of cached reference fields.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    dir: PathBuf,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, run: &ReferenceRun) -> PathBuf {
        self.dir.join(run.cache_key())
    }

    /// Analytic runs bypass the cache.
    pub fn get(&self, run: &ReferenceRun) -> Result<Vec<f64>> {
        if run.method() == ReferenceMethod::Analytic {
            return run.compute();
        }
        let path = self.path_for(run);
        if path.exists() {
            return read_field_csv(&path, &run.grid);
        }
        let field = run.compute()?;
        let tmp = path.with_extension("tmp");
        write_field_csv(&tmp, &run.grid, &field)?;
        std::fs::rename(&tmp, &path)?;
        Ok(field)
    }
}
