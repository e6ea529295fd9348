//! One-step consistency of the weight evolution on the heat equation.

use ede_core::deeponet::{DeepONetModel, DeepONetWeights};
use ede_core::energy::{mean_energy, GradientFlowProblem, Grid, ProblemKind};
use ede_core::pretrain::{
    dataset_mse, field_samples, generate_dataset, levenberg_marquardt, ProblemFamily, SensorGrid,
};
use ede_core::sav_evolve::{assemble_system, evolve_step, solve_lsq, EvolutionSet, EvolveConfig, SavState};

const LAMBDA_REL: f64 = 1e-8;

/// Exact weight flow `W' = γ(W)` with `ξ = 1`, by classical RK4.
fn weight_flow(model: &DeepONetModel, w0: &DeepONetWeights, set: &EvolutionSet, t: f64, substeps: usize) -> Vec<f64> {
    let gamma = |flat: &[f64]| -> Vec<f64> {
        let w = DeepONetWeights::from_flat(model, flat).unwrap();
        solve_lsq(&assemble_system(model, &w, set, 1.0, LAMBDA_REL).unwrap())
            .unwrap()
            .gamma
    };
    let axpy = |u: &[f64], k: &[f64], s: f64| -> Vec<f64> { u.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let tau = t / substeps as f64;
    let mut w = w0.flatten(model);
    for _ in 0..substeps {
        let k1 = gamma(&w);
        let k2 = gamma(&axpy(&w, &k1, tau / 2.0));
        let k3 = gamma(&axpy(&w, &k2, tau / 2.0));
        let k4 = gamma(&axpy(&w, &k3, tau));
        for i in 0..w.len() {
            w[i] += tau / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    w
}

#[test]
fn heat_step_is_first_order_in_time() {
    let grid = Grid::line(0.0, 2.0, 51).unwrap();
    let sensors = SensorGrid {
        lower: 0.0,
        upper: 2.0,
        per_axis: 50,
        dim: 1,
    };
    let data = generate_dataset(&ProblemFamily::Heat, 1, &sensors, &grid, (1.0, 1.0), 0).unwrap();
    let model = DeepONetModel::with_widths(50, 1, &[12], 1, true).unwrap();
    let (weights, _) = levenberg_marquardt(&model, model.init_weights(3), &data, 300, 1e-16).unwrap();
    let fit = dataset_mse(&model, &weights, &data).unwrap();
    assert!(fit < 1e-6, "representation of sin(πx) too coarse: mse {fit:e}");

    let problem = GradientFlowProblem::new(grid, ProblemKind::Heat).unwrap();
    let set = EvolutionSet::new(field_samples(&data), vec![problem]).unwrap();
    let u0 = set.fields(&model, &weights).unwrap();
    let e0 = mean_energy(set.problems(), &u0).unwrap();
    let cfg = EvolveConfig { lambda_rel: LAMBDA_REL };

    let defect = |dt: f64| {
        let state = SavState::initial(e0, 0.0, dt).unwrap();
        let (next, _, _) = evolve_step(&model, &weights, &set, &state, &cfg).unwrap();
        let exact = DeepONetWeights::from_flat(&model, &weight_flow(&model, &weights, &set, dt, 8)).unwrap();
        let a = set.fields(&model, &next).unwrap().remove(0);
        let b = set.fields(&model, &exact).unwrap().remove(0);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / dt
    };
    let coarse = defect(2e-3);
    let fine = defect(1e-3);
    let ratio = coarse / fine;
    assert!(
        (1.8..=2.2).contains(&ratio),
        "defects {coarse:e}, {fine:e}: ratio {ratio}"
    );
}
