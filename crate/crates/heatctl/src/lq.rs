//! Cost functionals and the fundamental identity.
//!
//! For any admissible control the cost decomposes as
//!
//!   J(u) = ⟨P(0)x₀, x₀⟩ + E ∫₀^T |u(s) + g(s)·x(s)|² ds
//!          + c_tr ∫₀^T ⟨b, P(s) b⟩ ds,
//!
//! with g(s) = bᵀP(s) the feedback row. The module evaluates both sides
//! by Monte Carlo with common random numbers and reports the residual for
//! the two candidate trace coefficients c_tr ∈ {1/2, 1}; the second-order
//! Itô expansion selects 1, and the paired-path statistics make the two
//! candidates distinguishable at a glance because their residuals differ
//! by the deterministic amount trace/2.

use nalgebra::DVector;

use crate::riccati::{CostSpec, RiccatiSolution};
use crate::stochastic::{
    simulate_ensemble, ControlSignal, PathRecord, Probes, Propagator, SimConfig,
    TrajectoryEnsemble,
};
use crate::{Error, Result};

/// The two trace-coefficient candidates under test.
pub const TRACE_COEFF_CANDIDATES: [f64; 2] = [0.5, 1.0];

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    let mut total = 0.0;
    for w in values.windows(2) {
        total += 0.5 * (w[0] + w[1]) * dt;
    }
    total
}

/// J along one recorded path: trapezoid of |Cx|², the exact integral of
/// the piecewise-constant |u|², and the terminal form.
fn path_cost(rec: &PathRecord, dt: f64) -> Result<f64> {
    let c_quad = rec
        .c_quad
        .as_ref()
        .ok_or_else(|| Error::Config("cost evaluation needs the |Cx|² probe".into()))?;
    let running_state = trapezoid(c_quad, dt);
    let running_control: f64 = rec.controls.iter().map(|u| u * u * dt).sum();
    Ok(running_state + running_control + rec.terminal_g_form.unwrap_or(0.0))
}

/// ∫ |u(s) + g(s)·x(s)|² ds along one recorded path (u piecewise
/// constant, g·x trapezoidal within each step).
fn tracking_integral(rec: &PathRecord, dt: f64) -> Result<f64> {
    let gdx = rec
        .gain_dot_x
        .as_ref()
        .ok_or_else(|| Error::Config("tracking evaluation needs the gain probe".into()))?;
    let mut total = 0.0;
    for (k, &u) in rec.controls.iter().enumerate() {
        let a = u + gdx[k];
        let b = u + gdx[k + 1];
        total += 0.5 * (a * a + b * b) * dt;
    }
    Ok(total)
}

/// Monte Carlo summary of a per-path scalar.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub per_path: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl CostReport {
    fn from_paths(per_path: Vec<f64>) -> CostReport {
        let (mean, stderr) = mean_stderr(&per_path);
        CostReport {
            per_path,
            mean,
            stderr,
        }
    }
}

/// J(u) over an ensemble simulated with the C, G probes attached.
pub fn evaluate_cost(ens: &TrajectoryEnsemble) -> Result<CostReport> {
    let per_path = ens
        .records
        .iter()
        .map(|r| path_cost(r, ens.dt))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_paths(per_path))
}

/// The closed-form value ⟨P(0)x₀, x₀⟩ + c_tr ∫₀^T ⟨b, P(s)b⟩ ds.
pub fn value_function(
    sol: &RiccatiSolution,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    trace_coeff: f64,
) -> Result<f64> {
    if x0.len() != sol.n() {
        return Err(Error::Dimension {
            expected: sol.n(),
            got: x0.len(),
        });
    }
    let trace = sol.trace_term(b, 0.0, sol.horizon())?;
    Ok(sol.quadratic_form(0, x0) + trace_coeff * trace)
}

/// Residual statistics of the fundamental identity for one coefficient.
#[derive(Debug, Clone, Copy)]
pub struct ResidualStat {
    pub coeff: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct IdentityReport {
    /// ⟨P(0)x₀, x₀⟩
    pub value_term: f64,
    /// ∫₀^T ⟨b, P(s)b⟩ ds
    pub trace_integral: f64,
    pub cost: CostReport,
    pub tracking: CostReport,
    pub residuals: Vec<ResidualStat>,
    /// candidate with the smallest |mean residual|
    pub selected_coeff: f64,
}

impl IdentityReport {
    pub fn residual_for(&self, coeff: f64) -> Option<&ResidualStat> {
        self.residuals.iter().find(|r| r.coeff == coeff)
    }

    /// The residual gap between the candidates is deterministic
    /// (trace/2); discrimination requires it to dominate the noise.
    pub fn discriminates(&self, sigmas: f64) -> bool {
        let stderr = self.residuals[0].stderr;
        0.5 * self.trace_integral > sigmas * stderr
    }
}

/// Simulates the given control and evaluates both sides of the
/// fundamental identity on common random numbers.
pub fn fundamental_identity(
    prop: &Propagator,
    sol: &RiccatiSolution,
    cost: &CostSpec,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    control: &ControlSignal,
    sim: &SimConfig,
) -> Result<IdentityReport> {
    let gains = sol.feedback_gains(&prop.times())?;
    let probes = Probes {
        cost_c: Some(&cost.c),
        terminal_g: Some(&cost.g),
        gains: Some(&gains),
    };
    let ens = simulate_ensemble(prop, x0, control, sim, probes)?;
    let cost_rep = evaluate_cost(&ens)?;
    let tracking = CostReport::from_paths(
        ens.records
            .iter()
            .map(|r| tracking_integral(r, ens.dt))
            .collect::<Result<Vec<_>>>()?,
    );
    let value_term = sol.quadratic_form(0, x0);
    let trace_integral = sol.trace_term(b, 0.0, sol.horizon())?;

    let residuals: Vec<ResidualStat> = TRACE_COEFF_CANDIDATES
        .iter()
        .map(|&coeff| {
            let per_path: Vec<f64> = cost_rep
                .per_path
                .iter()
                .zip(&tracking.per_path)
                .map(|(j, tr)| j - value_term - tr - coeff * trace_integral)
                .collect();
            let (mean, stderr) = mean_stderr(&per_path);
            ResidualStat {
                coeff,
                mean,
                stderr,
            }
        })
        .collect();
    let selected_coeff = residuals
        .iter()
        .min_by(|a, b| a.mean.abs().total_cmp(&b.mean.abs()))
        .expect("nonempty candidates")
        .coeff;
    Ok(IdentityReport {
        value_term,
        trace_integral,
        cost: cost_rep,
        tracking,
        residuals,
        selected_coeff,
    })
}

/// One perturbation row of the optimality experiment.
#[derive(Debug, Clone)]
pub struct PerturbationRow {
    pub delta: f64,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// paired per-path gap J(u*+δ) - J(u*)
    pub gap_mean: f64,
    pub gap_stderr: f64,
    /// deterministic prediction ∫ |δ + g·Δx|² ds
    pub predicted_gap: f64,
}

#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub optimal_cost: CostReport,
    /// ⟨P(0)x₀,x₀⟩ + c_tr·trace with the selected coefficient
    pub predicted_value: f64,
    pub rows: Vec<PerturbationRow>,
}

/// Runs the closed loop, replays each path's recorded optimal control
/// shifted by the constants in `deltas` on the same noise, and compares
/// the paired cost gaps with the deterministic prediction.
pub fn optimality_check(
    prop: &Propagator,
    sol: &RiccatiSolution,
    cost: &CostSpec,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    sim: &SimConfig,
    trace_coeff: f64,
    deltas: &[f64],
) -> Result<OptimalityReport> {
    let gains = sol.feedback_gains(&prop.times())?;
    let probes = Probes {
        cost_c: Some(&cost.c),
        terminal_g: Some(&cost.g),
        gains: Some(&gains),
    };
    let star = simulate_ensemble(
        prop,
        x0,
        &ControlSignal::Feedback(gains.clone()),
        sim,
        probes,
    )?;
    let optimal_cost = evaluate_cost(&star)?;
    let predicted_value = value_function(sol, b, x0, trace_coeff)?;
    let star_controls: Vec<Vec<f64>> = star.records.iter().map(|r| r.controls.clone()).collect();

    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let shifted: Vec<Vec<f64>> = star_controls
            .iter()
            .map(|u| u.iter().map(|v| v + delta).collect())
            .collect();
        let ens = simulate_ensemble(prop, x0, &ControlSignal::PerPath(shifted), sim, probes)?;
        let cost_rep = evaluate_cost(&ens)?;
        let gaps: Vec<f64> = cost_rep
            .per_path
            .iter()
            .zip(&optimal_cost.per_path)
            .map(|(jd, js)| jd - js)
            .collect();
        let (gap_mean, gap_stderr) = mean_stderr(&gaps);

        // With common random numbers the state difference Δx is the
        // deterministic response to the constant input δ, so the
        // predicted gap ∫|δ + g·Δx|² needs no sampling.
        let mut dx = DVector::zeros(prop.n());
        let mut integrand = Vec::with_capacity(sim.n_steps + 1);
        integrand.push(delta + gains[0].dot(&dx));
        for k in 0..sim.n_steps {
            dx = &prop.step_mat * dx + &prop.jb * delta;
            integrand.push(delta + gains[k + 1].dot(&dx));
        }
        let mut predicted_gap = 0.0;
        for w in integrand.windows(2) {
            predicted_gap += 0.5 * (w[0] * w[0] + w[1] * w[1]) * prop.dt;
        }

        rows.push(PerturbationRow {
            delta,
            cost_mean: cost_rep.mean,
            cost_stderr: cost_rep.stderr,
            gap_mean,
            gap_stderr,
            predicted_gap,
        });
    }
    Ok(OptimalityReport {
        optimal_cost,
        predicted_value,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{boundary_input, dirichlet_laplacian, Spectrum};
    use crate::riccati::{solve_riccati_ode, CostSpec};
    use crate::space::{build_grid, Gram, WeightKind, WeightSpec};
    use nalgebra::DMatrix;

    struct World {
        spec: Spectrum,
        b: DVector<f64>,
        a: DMatrix<f64>,
        x0: DVector<f64>,
    }

    fn world(n: usize) -> World {
        let w = WeightSpec::new(0.8, WeightKind::PurePower).unwrap();
        let grid = build_grid(w, n, 20.0, 2.0).unwrap();
        let gram = Gram::weighted(&grid).unwrap();
        let op = dirichlet_laplacian(&grid, &gram).unwrap();
        let spec = Spectrum::new(&op).unwrap();
        let bi = boundary_input(&spec, &grid, &gram, 1.0, 0.6).unwrap();
        let a = spec.func_matrix(|s| s);
        // a smooth bump, expressed in orthonormalized coordinates
        let nodal = DVector::from_iterator(
            n,
            grid.nodes.iter().map(|&x| (-(x - 2.0) * (x - 2.0)).exp()),
        );
        let x0 = crate::space::to_ortho(&nodal, &gram).unwrap();
        World {
            spec,
            b: bi.b_ortho,
            a,
            x0,
        }
    }

    fn sim(seed: u64, n_paths: usize, n_steps: usize, noise: bool) -> SimConfig {
        SimConfig {
            seed,
            n_paths,
            n_steps,
            horizon: 1.0,
            noise,
            record_states: false,
        }
    }

    #[test]
    fn mean_stderr_basics() {
        let (m, s) = mean_stderr(&[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(m, 5.0);
        // sample variance 20/3, stderr sqrt(20/12)
        assert!((s - (20.0f64 / 12.0).sqrt()).abs() < 1e-14);
        let (_, s1) = mean_stderr(&[3.0]);
        assert!(s1.is_infinite());
    }

    #[test]
    fn noiseless_uncontrolled_cost_matches_gramian_form() {
        // oracle: with u = 0, no noise, J = ⟨P_b=0(0) x₀, x₀⟩
        let w = world(24);
        let cost = CostSpec::identity_running(24);
        let sol0 = solve_riccati_ode(&w.a, &DVector::zeros(24), &cost, 1.0, 400).unwrap();
        let prop = Propagator::new(&w.spec, &w.b, 1.0, 400).unwrap();
        let probes = Probes {
            cost_c: Some(&cost.c),
            terminal_g: Some(&cost.g),
            gains: None,
        };
        let ens = simulate_ensemble(
            &prop,
            &w.x0,
            &ControlSignal::Zero,
            &sim(0, 1, 400, false),
            probes,
        )
        .unwrap();
        let rep = evaluate_cost(&ens).unwrap();
        let exact = sol0.quadratic_form(0, &w.x0);
        assert!(
            (rep.mean - exact).abs() <= 2e-4 * exact,
            "cost {} vs form {exact}",
            rep.mean
        );
    }

    #[test]
    fn identity_selects_unit_trace_coefficient() {
        let w = world(16);
        let cost = CostSpec::identity_running(16);
        let sol = solve_riccati_ode(&w.a, &w.b, &cost, 1.0, 400).unwrap();
        let prop = Propagator::new(&w.spec, &w.b, 1.0, 200).unwrap();
        let control = ControlSignal::Constant(0.4);
        let rep = fundamental_identity(
            &prop,
            &sol,
            &cost,
            &w.b,
            &w.x0,
            &control,
            &sim(21, 800, 200, true),
        )
        .unwrap();
        assert_eq!(rep.selected_coeff, 1.0);
        let r1 = rep.residual_for(1.0).unwrap();
        let tol = (4.0 * r1.stderr).max(5e-3 * rep.cost.mean.abs());
        assert!(
            r1.mean.abs() <= tol,
            "unit-coefficient residual {} exceeds {tol}",
            r1.mean
        );
        let rh = rep.residual_for(0.5).unwrap();
        assert!(rh.mean.abs() > 5.0 * r1.stderr.max(1e-12));
        assert!(rep.discriminates(5.0));
    }

    #[test]
    fn identity_without_noise_needs_no_trace_term() {
        // with the noise switched off the identity closes with c_tr = 0
        let w = world(16);
        let cost = CostSpec::identity_running(16);
        let sol = solve_riccati_ode(&w.a, &w.b, &cost, 1.0, 400).unwrap();
        let prop = Propagator::new(&w.spec, &w.b, 1.0, 200).unwrap();
        let rep = fundamental_identity(
            &prop,
            &sol,
            &cost,
            &w.b,
            &w.x0,
            &ControlSignal::Constant(0.4),
            &sim(3, 1, 200, false),
        )
        .unwrap();
        // residual with coeff 0 = J - value - tracking
        let r = rep.cost.mean - rep.value_term - rep.tracking.mean;
        assert!(
            r.abs() <= 5e-3 * rep.cost.mean.abs(),
            "deterministic identity residual {r}"
        );
    }

    #[test]
    fn optimal_feedback_beats_perturbations() {
        let w = world(16);
        let cost = CostSpec::identity_running(16);
        let sol = solve_riccati_ode(&w.a, &w.b, &cost, 1.0, 400).unwrap();
        let prop = Propagator::new(&w.spec, &w.b, 1.0, 200).unwrap();
        let rep = optimality_check(
            &prop,
            &sol,
            &cost,
            &w.b,
            &w.x0,
            &sim(7, 600, 200, true),
            1.0,
            &[0.1, 0.25, -0.25],
        )
        .unwrap();
        for row in &rep.rows {
            assert!(
                row.gap_mean > 0.0,
                "perturbation δ={} should cost more",
                row.delta
            );
            let tol = (4.0 * row.gap_stderr).max(0.05 * row.predicted_gap);
            assert!(
                (row.gap_mean - row.predicted_gap).abs() <= tol,
                "δ={}: gap {} vs predicted {} (tol {tol})",
                row.delta,
                row.gap_mean,
                row.predicted_gap
            );
        }
        // larger perturbations cost more
        assert!(rep.rows[1].gap_mean > rep.rows[0].gap_mean);
    }

    #[test]
    fn closed_loop_cost_matches_value_function() {
        let w = world(16);
        let cost = CostSpec::identity_running(16);
        let sol = solve_riccati_ode(&w.a, &w.b, &cost, 1.0, 400).unwrap();
        let prop = Propagator::new(&w.spec, &w.b, 1.0, 200).unwrap();
        let rep = optimality_check(
            &prop,
            &sol,
            &cost,
            &w.b,
            &w.x0,
            &sim(13, 800, 200, true),
            1.0,
            &[],
        )
        .unwrap();
        let tol = (4.0 * rep.optimal_cost.stderr).max(0.01 * rep.predicted_value);
        assert!(
            (rep.optimal_cost.mean - rep.predicted_value).abs() <= tol,
            "J* = {} vs V = {} (tol {tol})",
            rep.optimal_cost.mean,
            rep.predicted_value
        );
    }

    #[test]
    fn probe_requirements_are_enforced() {
        let w = world(16);
        let prop = Propagator::new(&w.spec, &w.b, 1.0, 50).unwrap();
        let ens = simulate_ensemble(
            &prop,
            &w.x0,
            &ControlSignal::Zero,
            &sim(0, 2, 50, false),
            Probes::none(),
        )
        .unwrap();
        assert!(evaluate_cost(&ens).is_err());
    }
}
