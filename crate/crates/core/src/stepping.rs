//! Time-step control and SAV restart around [`evolve_step`], plus the
//! driver loop that produces an [`EvolutionTrace`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deeponet::{DeepONetModel, DeepONetWeights};
use crate::energy::mean_energy;
use crate::error::{Error, Result};
use crate::sav_evolve::{evolve_step, EvolutionSet, EvolveConfig, SavState, StepDiagnostics, DISSIPATION_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepControlConfig {
    /// Shrink when `|1−ξ| > eps0`.
    pub eps0: f64,
    /// Grow when `|1−ξ| < eps1`.
    pub eps1: f64,
    /// Restart when `|1−ξ| > eps2`.
    pub eps2: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub adaptive: bool,
    pub restart: bool,
}

impl StepControlConfig {
    /// Thresholds 1e-1 / 1e-3 / 2e-2 and `dt_min, dt_max = 1e-3·dt, 1e3·dt`;
    /// restart on, adaptation off.
    pub fn with_dt(dt: f64) -> Self {
        Self {
            eps0: 1e-1,
            eps1: 1e-3,
            eps2: 2e-2,
            dt_init: dt,
            dt_min: 1e-3 * dt,
            dt_max: 1e3 * dt,
            adaptive: false,
            restart: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eps1 > 0.0
            && self.eps1 < self.eps0
            && self.eps2 > 0.0
            && self.dt_min > 0.0
            && self.dt_min <= self.dt_init
            && self.dt_init <= self.dt_max
            && self.dt_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "step control needs 0 < eps1 < eps0, eps2 > 0, 0 < dt_min ≤ dt_init ≤ dt_max: {self:?}"
            )))
        }
    }
}

/// A-posteriori step size for the next step.
pub fn adapt_dt(xi: f64, dt: f64, cfg: &StepControlConfig) -> f64 {
    let dev = (1.0 - xi).abs();
    if dev > cfg.eps0 {
        (dt / 2.0).max(cfg.dt_min)
    } else if dev < cfg.eps1 {
        (2.0 * dt).min(cfg.dt_max)
    } else {
        dt
    }
}

/// Re-anchors `r` to `√E^{n+1}` when `ξ` has drifted beyond `eps2`.
pub fn maybe_restart(xi: f64, state: &SavState, energy_next: f64, cfg: &StepControlConfig) -> (SavState, bool) {
    if (1.0 - xi).abs() > cfg.eps2 {
        let mut s = *state;
        s.r = energy_next.max(0.0).sqrt();
        (s, true)
    } else {
        (*state, false)
    }
}

/// Per-step records of one evolution run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvolutionTrace {
    rows: Vec<StepDiagnostics>,
}

impl EvolutionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a trace and checks its invariants.
    pub fn from_rows(rows: Vec<StepDiagnostics>) -> Result<Self> {
        let trace = Self { rows };
        trace.validate()?;
        Ok(trace)
    }

    pub fn rows(&self) -> &[StepDiagnostics] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: StepDiagnostics) {
        self.rows.push(row);
    }

    /// Strictly increasing `t`, `r` continuous between rows, and `r²`
    /// nonincreasing except across restarts.
    pub fn validate(&self) -> Result<()> {
        for (k, row) in self.rows.iter().enumerate() {
            let bad = |msg: &str| Err(Error::parse(format!("trace row {k} (step {}): {msg}", row.step)));
            if !row.restart_flag && row.r_next != row.r_after {
                return bad("r changed without a restart");
            }
            if row.r_after * row.r_after - row.r_before * row.r_before > DISSIPATION_TOLERANCE {
                return Err(Error::DissipationViolated {
                    step: row.step,
                    before: row.r_before * row.r_before,
                    after: row.r_after * row.r_after,
                });
            }
            if k > 0 {
                let prev = &self.rows[k - 1];
                if !(row.t > prev.t) {
                    return bad("time not strictly increasing");
                }
                if row.r_before != prev.r_next {
                    return bad("r_before does not continue the previous row");
                }
            }
        }
        Ok(())
    }

    /// `(n, m)`: `n` steps had `|1−ξ| > eps2`, `m` of them restarted.
    pub fn restart_coverage(&self, eps2: f64) -> (usize, usize) {
        let drifted: Vec<_> = self.rows.iter().filter(|r| (1.0 - r.xi).abs() > eps2).collect();
        (drifted.len(), drifted.iter().filter(|r| r.restart_flag).count())
    }

    /// Largest `(r_after² − r_before²)` over all steps.
    pub fn max_dissipation_excess(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.r_after * r.r_after - r.r_before * r.r_before)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads and validates a trace file.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<StepDiagnostics>, _>>()?;
        Self::from_rows(rows).map_err(|e| e.with_path(path))
    }
}

/// When to stop and where to record weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionPlan {
    pub max_steps: usize,
    /// Stop once `t` reaches this time, if set.
    pub t_final: Option<f64>,
    /// Times at which weights are kept; steps are shortened to land on them.
    pub snapshot_times: Vec<f64>,
}

#[derive(Debug)]
pub struct EvolutionRun {
    pub weights: DeepONetWeights,
    pub state: SavState,
    pub trace: EvolutionTrace,
    pub snapshots: Vec<(f64, DeepONetWeights)>,
    /// Set when the loop stopped on an error; everything above is the
    /// state reached before it.
    pub failure: Option<Error>,
}

/// Runs the step loop from `weights` at `t0`.
pub fn evolve(
    model: &DeepONetModel,
    weights: DeepONetWeights,
    set: &EvolutionSet,
    control: &StepControlConfig,
    evolve_cfg: &EvolveConfig,
    plan: &EvolutionPlan,
    t0: f64,
) -> Result<EvolutionRun> {
    control.validate()?;
    let mut snaps: Vec<f64> = plan.snapshot_times.clone();
    snaps.sort_by(f64::total_cmp);
    if snaps.iter().any(|t| !t.is_finite() || *t < t0) {
        return Err(Error::InvalidConfig(format!(
            "snapshot times must be finite and ≥ {t0}"
        )));
    }
    let fields = set.fields(model, &weights)?;
    let e0 = mean_energy(set.problems(), &fields)?;
    let mut state = SavState::initial(e0, t0, control.dt_init)?;
    let mut run = EvolutionRun {
        weights,
        state,
        trace: EvolutionTrace::new(),
        snapshots: Vec::new(),
        failure: None,
    };
    let mut next_snap = 0;
    let slack = |dt: f64| 1e-9 * dt;
    while next_snap < snaps.len() && snaps[next_snap] <= t0 + slack(state.dt) {
        run.snapshots.push((snaps[next_snap], run.weights.clone()));
        next_snap += 1;
    }

    let done = |s: &SavState| plan.t_final.is_some_and(|tf| s.t >= tf - slack(s.dt));
    while state.step < plan.max_steps && !done(&state) {
        let mut target = None;
        if next_snap < snaps.len() {
            target = Some(snaps[next_snap]);
        }
        if let Some(tf) = plan.t_final {
            target = Some(target.map_or(tf, |s: f64| s.min(tf)));
        }
        let controller_dt = state.dt;
        let mut trial = state;
        if let Some(tt) = target {
            if state.t + controller_dt > tt + slack(controller_dt) {
                trial.dt = tt - state.t;
            }
        }
        let (w, mut st, mut diag) = match evolve_step(model, &run.weights, set, &trial, evolve_cfg) {
            Ok(v) => v,
            Err(e) => {
                run.failure = Some(e);
                break;
            }
        };
        if let Some(tt) = target {
            if (st.t - tt).abs() <= slack(controller_dt) {
                st.t = tt;
                diag.t = tt;
            }
        }
        if control.restart {
            let (s, restarted) = maybe_restart(diag.xi, &st, diag.energy_after, control);
            st = s;
            diag.restart_flag = restarted;
            diag.r_next = st.r;
        }
        st.dt = if control.adaptive {
            adapt_dt(diag.xi, controller_dt, control)
        } else {
            controller_dt
        };
        log::debug!(
            "step {} t={:.6} dt={:.3e} r2={:.6e} E={:.6e} xi={:.6} restart={}",
            diag.step,
            diag.t,
            diag.dt_used,
            diag.r_next * diag.r_next,
            diag.energy_after,
            diag.xi,
            diag.restart_flag
        );
        run.weights = w;
        run.trace.push(diag);
        state = st;
        while next_snap < snaps.len() && snaps[next_snap] <= state.t + slack(controller_dt) {
            run.snapshots.push((snaps[next_snap], run.weights.clone()));
            next_snap += 1;
        }
    }
    run.state = state;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> StepControlConfig {
        StepControlConfig {
            eps0: 0.1,
            eps1: 1e-3,
            eps2: 2e-2,
            dt_init: 1e-3,
            dt_min: 1e-5,
            dt_max: 1e-1,
            adaptive: true,
            restart: true,
        }
    }

    fn state(r: f64) -> SavState {
        SavState {
            r,
            energy: 1.0,
            t: 0.0,
            dt: 1e-3,
            step: 3,
            xi: 1.0,
        }
    }

    #[test]
    fn shrink_grow_clamp_dead_band() {
        let c = cfg();
        assert_eq!(adapt_dt(0.5, 8.0 * c.dt_min, &c), 4.0 * c.dt_min);
        assert_eq!(adapt_dt(0.5, c.dt_min, &c), c.dt_min);
        assert_eq!(adapt_dt(1.5, 1.5 * c.dt_min, &c), c.dt_min);
        assert_eq!(adapt_dt(0.9995, 1e-3, &c), 2e-3);
        assert_eq!(adapt_dt(0.9995, c.dt_max, &c), c.dt_max);
        assert_eq!(adapt_dt(0.95, 1e-3, &c), 1e-3);
    }

    #[test]
    fn restart_cases() {
        let c = cfg();
        let s = state(3.0);
        assert_eq!(maybe_restart(1.0, &s, 4.0, &c), (s, false));
        assert_eq!(maybe_restart(0.985, &s, 4.0, &c), (s, false));
        let (s2, flag) = maybe_restart(0.9, &s, 4.0, &c);
        assert!(flag);
        assert_eq!(s2.r, 2.0);
        assert_eq!(s2.r * s2.r / 4.0, 1.0);
    }

    #[test]
    fn defaults_and_validation() {
        let c = StepControlConfig::with_dt(2.5e-4);
        assert_eq!((c.eps0, c.eps1, c.eps2), (0.1, 1e-3, 2e-2));
        assert!((c.dt_max - 0.25).abs() < 1e-15 && (c.dt_min - 2.5e-7).abs() < 1e-20);
        c.validate().unwrap();
        let mut bad = c;
        bad.eps1 = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.dt_init = 1.0;
        assert!(bad.validate().is_err());
    }

    fn row(step: usize, t: f64, r_before: f64, r_after: f64, restart: Option<f64>) -> StepDiagnostics {
        StepDiagnostics {
            step,
            t,
            dt_used: 0.1,
            r_before,
            r_after,
            r_next: restart.unwrap_or(r_after),
            energy_before: 1.0,
            energy_after: 1.0,
            xi: if restart.is_some() { 0.5 } else { 1.0 },
            lsq_residual_norm: 0.0,
            stationarity: 0.0,
            restart_flag: restart.is_some(),
            energy_floored: false,
            rank_deficient: false,
        }
    }

    #[test]
    fn trace_validation() {
        let good = vec![
            row(1, 0.1, 2.0, 1.9, None),
            row(2, 0.2, 1.9, 1.5, Some(1.95)),
            row(3, 0.3, 1.95, 1.9, None),
        ];
        let trace = EvolutionTrace::from_rows(good.clone()).unwrap();
        assert_eq!(trace.restart_coverage(0.02), (1, 1));
        assert!(trace.max_dissipation_excess() < 0.0);

        let mut up = good.clone();
        up[2].r_after = 2.0;
        up[2].r_next = 2.0;
        assert!(EvolutionTrace::from_rows(up).is_err());
        let mut back = good.clone();
        back[1].t = 0.05;
        assert!(EvolutionTrace::from_rows(back).is_err());
        let mut jump = good;
        jump[2].r_before = 1.97;
        assert!(EvolutionTrace::from_rows(jump).is_err());
    }

    #[test]
    fn trace_csv_roundtrip() {
        let rows = vec![
            row(1, 0.1, 2.0, 1.0 / 3.0, None),
            row(2, 0.2, 1.0 / 3.0, 0.3, Some(0.31)),
        ];
        let trace = EvolutionTrace::from_rows(rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        trace.write_csv(&p).unwrap();
        assert_eq!(EvolutionTrace::read_csv(&p).unwrap(), trace);
    }

    #[test]
    fn tampered_trace_file_rejected() {
        let rows = vec![row(1, 0.1, 2.0, 1.5, None), row(2, 0.2, 1.5, 1.4, None)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        EvolutionTrace::from_rows(rows).unwrap().write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("1.4", "1.6");
        std::fs::write(&p, text).unwrap();
        assert!(EvolutionTrace::read_csv(&p).is_err());
    }
}
