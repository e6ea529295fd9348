//! Gradient-flow problems on uniform grids: free energies, their variational
//! derivatives, and trapezoidal quadrature.
//!
//! The gradient part of the energy is integrated over grid cells using
//! forward differences (second order at cell midpoints), which makes the
//! discrete energy and the 3-point / 5-point Laplacian in
//! [`variational_derivative`] an exact discrete gradient pair:
//! `∂E_h/∂u_i = w_i 𝒩_i` at every interior node.

use std::io::Write;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

/// Below this energy the SAV denominators are clamped.
pub const ENERGY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + i as f64 * self.spacing()
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.coord(i)).collect()
    }

    fn trapezoid_weights(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points)
            .map(|i| if i == 0 || i + 1 == self.points { 0.5 * h } else { h })
            .collect()
    }
}

/// Uniform tensor grid in one or two dimensions, boundary points included.
/// Nodes are ordered with `x` fastest: `index = iy * nx + ix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Axis>", into = "Vec<Axis>")]
pub struct Grid {
    axes: Vec<Axis>,
}

impl TryFrom<Vec<Axis>> for Grid {
    type Error = Error;

    fn try_from(axes: Vec<Axis>) -> Result<Self> {
        Grid::new(axes)
    }
}

impl From<Grid> for Vec<Axis> {
    fn from(g: Grid) -> Self {
        g.axes
    }
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if !(1..=2).contains(&axes.len()) {
            return Err(Error::InvalidSpec(format!(
                "grid dimension must be 1 or 2, got {}",
                axes.len()
            )));
        }
        for a in &axes {
            if a.points < 3 {
                return Err(Error::InvalidSpec(format!(
                    "grid axes need at least 3 points, got {}",
                    a.points
                )));
            }
            if !(a.upper > a.lower) || !a.lower.is_finite() || !a.upper.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "grid axis bounds must satisfy lower < upper, got [{}, {}]",
                    a.lower, a.upper
                )));
            }
        }
        Ok(Self { axes })
    }

    pub fn line(lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(vec![Axis { lower, upper, points }])
    }

    pub fn square(lower: f64, upper: f64, points: usize) -> Result<Self> {
        let a = Axis { lower, upper, points };
        Self::new(vec![a, a])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `|Ω|`.
    pub fn volume(&self) -> f64 {
        self.axes.iter().map(|a| a.upper - a.lower).product()
    }

    /// Coordinates of node `idx`.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        match self.axes.as_slice() {
            [x] => vec![x.coord(idx)],
            [x, y] => vec![x.coord(idx % x.points), y.coord(idx / x.points)],
            _ => unreachable!("validated grid dimension"),
        }
    }

    /// All nodes as rows of a `(len × dim)` matrix.
    pub fn points(&self) -> Mat<f64> {
        let n = self.len();
        let mut m = Mat::<f64>::zeros(n, self.dim());
        for idx in 0..n {
            for (d, v) in self.point(idx).into_iter().enumerate() {
                m[(idx, d)] = v;
            }
        }
        m
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        match self.axes.as_slice() {
            [x] => idx == 0 || idx + 1 == x.points,
            [x, y] => {
                let (ix, iy) = (idx % x.points, idx / x.points);
                ix == 0 || iy == 0 || ix + 1 == x.points || iy + 1 == y.points
            }
            _ => unreachable!("validated grid dimension"),
        }
    }

    /// Composite trapezoidal weights (tensor product in 2D).
    pub fn weights(&self) -> Vec<f64> {
        match self.axes.as_slice() {
            [x] => x.trapezoid_weights(),
            [x, y] => {
                let (wx, wy) = (x.trapezoid_weights(), y.trapezoid_weights());
                wy.iter().flat_map(|&b| wx.iter().map(move |&a| a * b)).collect()
            }
            _ => unreachable!("validated grid dimension"),
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self == other
    }
}

/// Composite trapezoidal approximation of `∫_Ω v`.
pub fn quadrature(grid: &Grid, values: &[f64]) -> Result<f64> {
    check_len("quadrature values", grid.len(), values.len())?;
    Ok(grid.weights().iter().zip(values).map(|(w, v)| w * v).sum())
}

/// `∫_Ω v²` by the trapezoidal rule.
pub fn norm_sq(grid: &Grid, values: &[f64]) -> Result<f64> {
    check_len("norm values", grid.len(), values.len())?;
    Ok(grid.weights().iter().zip(values).map(|(w, v)| w * v * v).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemKind {
    /// `E = ∫ ½|u_x|²`, `u_t = u_xx`.
    Heat,
    /// `E = ∫ (c/2)|u_x|²`, `u_t = c u_xx`.
    ParametricHeat { c: f64 },
    /// Ginzburg–Landau energy in 1D.
    AllenCahn1D { eps: f64 },
    /// Ginzburg–Landau energy in 2D.
    AllenCahn2D { eps: f64 },
}

impl ProblemKind {
    fn diffusion(&self) -> f64 {
        match *self {
            ProblemKind::ParametricHeat { c } => c,
            _ => 1.0,
        }
    }

    fn well(&self) -> Option<f64> {
        match *self {
            ProblemKind::AllenCahn1D { eps } | ProblemKind::AllenCahn2D { eps } => Some(eps),
            _ => None,
        }
    }
}

/// Double-well potential `G(u) = (u² − 1)² / (4ε²)`.
pub fn double_well(u: f64, eps: f64) -> f64 {
    let s = u * u - 1.0;
    s * s / (4.0 * eps * eps)
}

/// `g(u) = G'(u) = u(u² − 1) / ε²`.
pub fn double_well_derivative(u: f64, eps: f64) -> f64 {
    u * (u * u - 1.0) / (eps * eps)
}

/// `∂u/∂t = −𝒩(u)` with `𝒩 = δE/δu` and homogeneous Dirichlet data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientFlowProblem {
    pub grid: Grid,
    pub kind: ProblemKind,
    /// Dirichlet value on the whole boundary.
    #[serde(default)]
    pub boundary: f64,
}

impl GradientFlowProblem {
    pub fn new(grid: Grid, kind: ProblemKind) -> Result<Self> {
        let dim_ok = match kind {
            ProblemKind::AllenCahn2D { .. } => grid.dim() == 2,
            _ => grid.dim() == 1,
        };
        if !dim_ok {
            return Err(Error::InvalidSpec(format!(
                "{kind:?} is not defined on a {}D grid",
                grid.dim()
            )));
        }
        match kind {
            ProblemKind::ParametricHeat { c } if !(c > 0.0) => {
                return Err(Error::InvalidSpec(format!(
                    "diffusion coefficient must be positive, got {c}"
                )))
            }
            ProblemKind::AllenCahn1D { eps } | ProblemKind::AllenCahn2D { eps } if !(eps > 0.0) => {
                return Err(Error::InvalidSpec(format!(
                    "interface width must be positive, got {eps}"
                )))
            }
            _ => {}
        }
        Ok(Self {
            grid,
            kind,
            boundary: 0.0,
        })
    }

    fn check_field(&self, field: &[f64]) -> Result<()> {
        check_len("field length", self.grid.len(), field.len())?;
        check_finite("field", field)
    }
}

/// Half the squared forward differences, integrated over cells.
fn gradient_energy(grid: &Grid, u: &[f64]) -> f64 {
    match grid.axes() {
        [x] => {
            let h = x.spacing();
            u.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() * 0.5 / h
        }
        [x, y] => {
            let (nx, ny) = (x.points, y.points);
            let (hx, hy) = (x.spacing(), y.spacing());
            let (wx, wy) = (x.trapezoid_weights(), y.trapezoid_weights());
            let mut e = 0.0;
            for iy in 0..ny {
                for ix in 0..nx {
                    let v = u[iy * nx + ix];
                    if ix + 1 < nx {
                        e += wy[iy] * (u[iy * nx + ix + 1] - v).powi(2) / hx;
                    }
                    if iy + 1 < ny {
                        e += wx[ix] * (u[(iy + 1) * nx + ix] - v).powi(2) / hy;
                    }
                }
            }
            0.5 * e
        }
        _ => unreachable!("validated grid dimension"),
    }
}

/// Discrete Laplacian at interior nodes; boundary entries are 0.
fn laplacian(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    match grid.axes() {
        [x] => {
            let h2 = x.spacing().powi(2);
            for i in 1..u.len() - 1 {
                out[i] = (u[i - 1] - 2.0 * u[i] + u[i + 1]) / h2;
            }
        }
        [x, y] => {
            let (nx, ny) = (x.points, y.points);
            let (hx2, hy2) = (x.spacing().powi(2), y.spacing().powi(2));
            for iy in 1..ny - 1 {
                for ix in 1..nx - 1 {
                    let k = iy * nx + ix;
                    out[k] = (u[k - 1] - 2.0 * u[k] + u[k + 1]) / hx2 + (u[k - nx] - 2.0 * u[k] + u[k + nx]) / hy2;
                }
            }
        }
        _ => unreachable!("validated grid dimension"),
    }
    out
}

/// Free energy of `field`: the (scaled) gradient energy plus, for
/// Allen–Cahn, the double-well potential.
pub fn free_energy(problem: &GradientFlowProblem, field: &[f64]) -> Result<f64> {
    problem.check_field(field)?;
    let grid = &problem.grid;
    let mut e = problem.kind.diffusion() * gradient_energy(grid, field);
    if let Some(eps) = problem.kind.well() {
        e += grid
            .weights()
            .iter()
            .zip(field)
            .map(|(w, &u)| w * double_well(u, eps))
            .sum::<f64>();
    }
    Ok(e)
}

/// `𝒩(u) = δE/δu` on the grid. Boundary rows are 0 so that Dirichlet nodes
/// do not move.
pub fn variational_derivative(problem: &GradientFlowProblem, field: &[f64]) -> Result<Vec<f64>> {
    problem.check_field(field)?;
    let grid = &problem.grid;
    let coef = problem.kind.diffusion();
    let mut n = laplacian(grid, field);
    let eps = problem.kind.well();
    for (idx, v) in n.iter_mut().enumerate() {
        if grid.is_boundary(idx) {
            *v = 0.0;
            continue;
        }
        *v *= -coef;
        if let Some(eps) = eps {
            *v += double_well_derivative(field[idx], eps);
        }
    }
    Ok(n)
}

/// Mean free energy over samples. `problems` has either one entry (shared by
/// all fields) or one per field.
pub fn mean_energy<F: AsRef<[f64]>>(problems: &[GradientFlowProblem], fields: &[F]) -> Result<f64> {
    if fields.is_empty() {
        return Err(Error::Empty("fields for mean energy"));
    }
    if problems.len() != 1 {
        check_len("problems per field", fields.len(), problems.len())?;
    }
    let mut total = 0.0;
    for (j, f) in fields.iter().enumerate() {
        let problem = &problems[if problems.len() == 1 { 0 } else { j }];
        total += free_energy(problem, f.as_ref())?;
    }
    Ok(total / fields.len() as f64)
}

/// 1D: `x,u` rows. 2D: one row per `y` line.
pub fn write_field_csv(path: &Path, grid: &Grid, field: &[f64]) -> Result<()> {
    check_len("field csv", grid.len(), field.len())?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    match grid.axes() {
        [x] => {
            writeln!(w, "x,u")?;
            for (i, v) in field.iter().enumerate() {
                writeln!(w, "{:e},{:e}", x.coord(i), v)?;
            }
        }
        [x, _] => {
            for row in field.chunks(x.points) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{}", cells.join(","))?;
            }
        }
        _ => unreachable!("validated grid dimension"),
    }
    w.flush()?;
    Ok(())
}

pub fn read_field_csv(path: &Path, grid: &Grid) -> Result<Vec<f64>> {
    let has_header = grid.dim() == 1;
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).from_path(path)?;
    let mut field = Vec::with_capacity(grid.len());
    for rec in rdr.records() {
        let rec = rec?;
        let cells: Vec<&str> = if grid.dim() == 1 {
            rec.iter().skip(1).collect()
        } else {
            rec.iter().collect()
        };
        for c in cells {
            field.push(
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(format!("bad field value `{c}`: {e}")).with_path(path))?,
            );
        }
    }
    check_len("field csv length", grid.len(), field.len())?;
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn heat(n: usize) -> GradientFlowProblem {
        GradientFlowProblem::new(Grid::line(0.0, 2.0, n).unwrap(), ProblemKind::Heat).unwrap()
    }

    fn ac1d(n: usize, eps: f64) -> GradientFlowProblem {
        GradientFlowProblem::new(Grid::line(-1.0, 1.0, n).unwrap(), ProblemKind::AllenCahn1D { eps }).unwrap()
    }

    fn sample(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..grid.len()).map(|i| f(&grid.point(i))).collect()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::line(0.0, 1.0, 2).is_err());
        assert!(Grid::line(1.0, 0.0, 5).is_err());
        assert!(
            GradientFlowProblem::new(Grid::line(0.0, 1.0, 5).unwrap(), ProblemKind::AllenCahn2D { eps: 0.1 }).is_err()
        );
        assert!(
            GradientFlowProblem::new(Grid::line(0.0, 1.0, 5).unwrap(), ProblemKind::ParametricHeat { c: 0.0 }).is_err()
        );
    }

    #[test]
    fn grid_includes_endpoints() {
        let g = Grid::line(0.0, 2.0, 51).unwrap();
        assert_eq!(g.point(0), vec![0.0]);
        assert_eq!(g.point(50), vec![2.0]);
        assert!((g.axes()[0].spacing() - 0.04).abs() < 1e-15);
        let sq = Grid::square(-1.0, 1.0, 5).unwrap();
        assert_eq!(sq.point(7), vec![0.0, -0.5]);
        assert!(sq.is_boundary(4) && !sq.is_boundary(6));
    }

    #[test]
    fn quadrature_constant_and_linear() {
        let g = Grid::line(0.0, 2.0, 17).unwrap();
        assert!((quadrature(&g, &[1.0; 17]).unwrap() - 2.0).abs() < 1e-15);
        let g = Grid::line(0.0, 1.0, 51).unwrap();
        let x = g.axes()[0].coords();
        assert!((quadrature(&g, &x).unwrap() - 0.5).abs() < 1e-15);
        assert!(quadrature(&g, &x[..10]).is_err());
    }

    #[test]
    fn quadrature_cos_squared_full_periods() {
        let g = Grid::line(0.0, 2.0, 201).unwrap();
        let v = sample(&g, |p| (PI * p[0]).cos().powi(2));
        assert!((quadrature(&g, &v).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn quadrature_2d_tensor() {
        let g = Grid::square(-1.0, 1.0, 11).unwrap();
        let v = sample(&g, |p| p[0] + 2.0 * p[1] + 3.0);
        assert!((quadrature(&g, &v).unwrap() - 12.0).abs() < 1e-13);
    }

    #[test]
    fn heat_energy_of_sine() {
        // Closed form of the cell-based energy: (π²/2) sinc²(πh/2).
        let p = heat(51);
        let u = sample(&p.grid, |x| (PI * x[0]).sin());
        let e = free_energy(&p, &u).unwrap();
        let h: f64 = 0.04;
        let s = (PI * h / 2.0).sin() / (PI * h / 2.0);
        assert!((e - PI * PI / 2.0 * s * s).abs() < 1e-12);
        assert!((e - PI * PI / 2.0).abs() < 7e-3, "E = {e}");
    }

    #[test]
    fn allen_cahn_energy_vanishes_at_wells() {
        let p = ac1d(41, 0.1);
        assert_eq!(free_energy(&p, &vec![1.0; 41]).unwrap(), 0.0);
        assert_eq!(free_energy(&p, &vec![-1.0; 41]).unwrap(), 0.0);
    }

    #[test]
    fn allen_cahn_energy_matches_fine_grid() {
        let f = |x: &[f64]| 0.4 * (PI * x[0]).sin();
        let coarse = ac1d(51, 0.1);
        let fine = ac1d(2001, 0.1);
        let ec = free_energy(&coarse, &sample(&coarse.grid, f)).unwrap();
        let ef = free_energy(&fine, &sample(&fine.grid, f)).unwrap();
        assert!(((ec - ef) / ef).abs() < 1e-3, "coarse {ec} fine {ef}");
    }

    #[test]
    fn energy_second_order_under_refinement() {
        let f = |x: &[f64]| 0.4 * (PI * x[0]).sin() + 0.1 * (2.0 * PI * x[0]).sin();
        let reference = {
            let p = ac1d(3201, 0.1);
            free_energy(&p, &sample(&p.grid, f)).unwrap()
        };
        let err = |n| {
            let p = ac1d(n, 0.1);
            (free_energy(&p, &sample(&p.grid, f)).unwrap() - reference).abs()
        };
        for n in [26, 51, 101] {
            let ratio = err(n) / err(2 * n - 1);
            assert!(ratio >= 3.5, "n = {n}: ratio {ratio}");
        }
    }

    #[test]
    fn heat_derivative_of_sine() {
        let p = heat(51);
        let u = sample(&p.grid, |x| (PI * x[0]).sin());
        let n = variational_derivative(&p, &u).unwrap();
        let worst = (0..51).map(|i| (n[i] - PI * PI * u[i]).abs()).fold(0.0, f64::max);
        assert!(worst <= 2e-2, "max error {worst}");
        assert_eq!(n[0], 0.0);
        assert_eq!(n[50], 0.0);
    }

    #[test]
    fn parametric_heat_scales_derivative() {
        let g = Grid::line(0.0, 2.0, 31).unwrap();
        let u = sample(&g, |x| (PI * x[0]).sin() + 0.3 * x[0] * x[0]);
        let base =
            variational_derivative(&GradientFlowProblem::new(g.clone(), ProblemKind::Heat).unwrap(), &u).unwrap();
        let scaled = variational_derivative(
            &GradientFlowProblem::new(g, ProblemKind::ParametricHeat { c: 1.7 }).unwrap(),
            &u,
        )
        .unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((1.7 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn allen_cahn_derivative_at_equilibria() {
        let p = ac1d(21, 0.1);
        assert!(variational_derivative(&p, &[0.0; 21])
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        for well in [1.0, -1.0] {
            let n = variational_derivative(&p, &[well; 21]).unwrap();
            assert!(n.iter().all(|&v| v == 0.0));
        }
        assert_eq!(double_well_derivative(1.0, 0.3), 0.0);
        assert_eq!(double_well_derivative(-1.0, 0.3), 0.0);
    }

    #[test]
    fn heat_derivative_is_linear() {
        let p = heat(41);
        let u = sample(&p.grid, |x| (PI * x[0]).sin());
        let v = sample(&p.grid, |x| x[0] * (2.0 - x[0]));
        let (a, b) = (1.3, -0.7);
        let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let nu = variational_derivative(&p, &u).unwrap();
        let nv = variational_derivative(&p, &v).unwrap();
        let nw = variational_derivative(&p, &w).unwrap();
        for i in 0..41 {
            assert!((nw[i] - (a * nu[i] + b * nv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_2d_of_product_sine() {
        let g = Grid::square(-1.0, 1.0, 41).unwrap();
        let p = GradientFlowProblem::new(g, ProblemKind::AllenCahn2D { eps: 0.1 }).unwrap();
        let u = sample(&p.grid, |x| 0.01 * (PI * x[0]).sin() * (PI * x[1]).sin());
        let n = variational_derivative(&p, &u).unwrap();
        for i in 0..p.grid.len() {
            if p.grid.is_boundary(i) {
                assert_eq!(n[i], 0.0);
                continue;
            }
            let exact = 2.0 * PI * PI * u[i] + double_well_derivative(u[i], 0.1);
            assert!((n[i] - exact).abs() < 5e-3, "node {i}: {} vs {exact}", n[i]);
        }
    }

    fn consistency_order(problem: &GradientFlowProblem, u: &[f64], v: &[f64]) -> f64 {
        let n = variational_derivative(problem, u).unwrap();
        let inner = quadrature(&problem.grid, &n.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>()).unwrap();
        let e0 = free_energy(problem, u).unwrap();
        let err = |eta: f64| {
            let moved: Vec<f64> = u.iter().zip(v).map(|(a, b)| a + eta * b).collect();
            ((free_energy(problem, &moved).unwrap() - e0) / eta - inner).abs()
        };
        (err(1e-3) / err(1e-4)).log10()
    }

    #[test]
    fn energy_and_derivative_are_a_discrete_gradient_pair() {
        let p = ac1d(51, 0.1);
        let u = sample(&p.grid, |x| 0.3 * (PI * x[0]).sin() + 0.05 * x[0]);
        let v = sample(&p.grid, |x| (PI * x[0]).sin() * (1.0 + x[0]));
        let order = consistency_order(&p, &u, &v);
        assert!(order >= 0.9, "order {order}");

        let g = Grid::square(-1.0, 1.0, 21).unwrap();
        let p2 = GradientFlowProblem::new(g, ProblemKind::AllenCahn2D { eps: 0.15 }).unwrap();
        let u2 = sample(&p2.grid, |x| 0.3 * (PI * x[0]).sin() * (PI * x[1]).sin() + 0.1 * x[0]);
        let v2 = sample(&p2.grid, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        let order = consistency_order(&p2, &u2, &v2);
        assert!(order >= 0.9, "2D order {order}");
    }

    #[test]
    fn energy_is_nonnegative_for_test_families() {
        let p = ac1d(51, 0.1);
        for a in [0.0, 0.1, 0.5, 1.0, 2.0] {
            let u = sample(&p.grid, |x| a * (PI * x[0]).sin());
            assert!(free_energy(&p, &u).unwrap() >= 0.0);
        }
    }

    #[test]
    fn mean_energy_cases() {
        let p = heat(51);
        let u = sample(&p.grid, |x| 1.3 * (PI * x[0]).sin());
        let e = free_energy(&p, &u).unwrap();
        assert_eq!(
            mean_energy(std::slice::from_ref(&p), std::slice::from_ref(&u)).unwrap(),
            e
        );
        assert_eq!(
            mean_energy(std::slice::from_ref(&p), &[u.clone(), u.clone()]).unwrap(),
            e
        );
        assert!(mean_energy::<Vec<f64>>(std::slice::from_ref(&p), &[]).is_err());

        let amps: Vec<f64> = (0..50).map(|k| 1.0 + k as f64 / 49.0).collect();
        let fields: Vec<Vec<f64>> = amps
            .iter()
            .map(|&a| sample(&p.grid, |x| a * (PI * x[0]).sin()))
            .collect();
        let mut loop_sum = 0.0;
        for f in &fields {
            loop_sum += free_energy(&p, f).unwrap();
        }
        let got = mean_energy(std::slice::from_ref(&p), &fields).unwrap();
        assert!((got - loop_sum / 50.0).abs() < 1e-12);
    }

    #[test]
    fn field_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for grid in [Grid::line(0.0, 2.0, 11).unwrap(), Grid::square(-1.0, 1.0, 6).unwrap()] {
            let u = sample(&grid, |x| x.iter().map(|v| v.sin()).sum::<f64>() / 3.0);
            let path = dir.path().join(format!("f{}.csv", grid.dim()));
            write_field_csv(&path, &grid, &u).unwrap();
            assert_eq!(read_field_csv(&path, &grid).unwrap(), u);
        }
    }
}
