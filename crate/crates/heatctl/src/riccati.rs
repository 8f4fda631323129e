//! The backward operator Riccati equation of the boundary-control
//! problem, in orthonormalized coordinates:
//!
//!   P'(t) = -AᵀP - PA - CᵀC + (Pb)(Pb)ᵀ,   P(T) = G.
//!
//! Two independent solvers cross-validate each other: a dense RK4
//! integrator on the differential form, and a Picard iteration on the
//! mild (integrated) form built from the exact one-step semigroup. In the
//! mild form the quadratic term enters the integrand with a minus sign,
//!
//!   F(s) = CᵀC - (P(s)b)(P(s)b)ᵀ,
//!
//! which is what differentiating the mild formula back to the weak form
//! requires; with a plus sign the two solvers diverge from each other
//! immediately (see the sign test below).

use nalgebra::{DMatrix, DVector};

use crate::operators::Spectrum;
use crate::{Error, Result};

/// Quadratic cost data in orthonormalized coordinates: running weight C
/// and terminal weight G (symmetric PSD).
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl CostSpec {
    pub fn new(c: DMatrix<f64>, g: DMatrix<f64>) -> Result<CostSpec> {
        if !c.is_square() || !g.is_square() || c.nrows() != g.nrows() {
            return Err(Error::Dimension {
                expected: c.nrows(),
                got: g.nrows(),
            });
        }
        let asym = (&g - g.transpose()).amax();
        if asym > 1e-10 * g.amax().max(1.0) {
            return Err(Error::Numeric("terminal weight G must be symmetric".into()));
        }
        Ok(CostSpec { c, g })
    }

    /// The reference problem: C = I, G = 0.
    pub fn identity_running(n: usize) -> CostSpec {
        CostSpec {
            c: DMatrix::identity(n, n),
            g: DMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }
}

/// P(t) on a uniform time grid over [0, T], with the feedback rows
/// g_k = bᵀP(t_k) cached.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// ascending, times[0] = 0, times[m] = T
    pub times: Vec<f64>,
    pub p_mats: Vec<DMatrix<f64>>,
    /// bᵀP(t_k) as column vectors
    pub gains: Vec<DVector<f64>>,
}

impl RiccatiSolution {
    fn build(times: Vec<f64>, p_mats: Vec<DMatrix<f64>>, b: &DVector<f64>) -> RiccatiSolution {
        let gains = p_mats.iter().map(|p| p.tr_mul(b)).collect();
        RiccatiSolution {
            times,
            p_mats,
            gains,
        }
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty time grid")
    }

    pub fn n(&self) -> usize {
        self.p_mats[0].nrows()
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let horizon = self.horizon();
        if !(t >= 0.0 && t <= horizon) {
            return Err(Error::Domain(format!(
                "time {t} outside the solution interval [0, {horizon}]"
            )));
        }
        let m = self.times.len() - 1;
        let dt = horizon / m as f64;
        let k = ((t / dt) as usize).min(m - 1);
        Ok((k, (t - self.times[k]) / dt))
    }

    /// Feedback gain row bᵀP(t), linearly interpolated in t.
    pub fn gain(&self, t: f64) -> Result<DVector<f64>> {
        let (k, w) = self.locate(t)?;
        Ok(&self.gains[k] * (1.0 - w) + &self.gains[k + 1] * w)
    }

    /// P(t), linearly interpolated.
    pub fn p_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (k, w) = self.locate(t)?;
        Ok(&self.p_mats[k] * (1.0 - w) + &self.p_mats[k + 1] * w)
    }

    /// ⟨P(t)x, x⟩ at a grid index.
    pub fn quadratic_form(&self, k: usize, x: &DVector<f64>) -> f64 {
        (&self.p_mats[k] * x).dot(x)
    }

    /// Gain rows sampled on an arbitrary ascending time grid (for a
    /// simulation grid different from the Riccati grid).
    pub fn feedback_gains(&self, times: &[f64]) -> Result<Vec<DVector<f64>>> {
        times.iter().map(|&t| self.gain(t)).collect()
    }

    /// ∫_lo^hi ⟨b, P(s)b⟩ ds by trapezoid on the solution grid, with the
    /// end cells interpolated.
    pub fn trace_term(&self, b: &DVector<f64>, lo: f64, hi: f64) -> Result<f64> {
        if !(lo >= 0.0 && hi <= self.horizon() && lo <= hi) {
            return Err(Error::Domain(format!(
                "trace interval [{lo}, {hi}] outside [0, {}]",
                self.horizon()
            )));
        }
        let f: Vec<f64> = self.gains.iter().map(|g| g.dot(b)).collect();
        let m = self.times.len() - 1;
        let dt = self.horizon() / m as f64;
        let eval = |t: f64| -> f64 {
            let k = ((t / dt) as usize).min(m - 1);
            let w = (t - self.times[k]) / dt;
            f[k] * (1.0 - w) + f[k + 1] * w
        };
        // trapezoid over the grid points strictly inside, plus end cells
        let k_lo = (lo / dt).ceil() as usize;
        let k_hi = (hi / dt).floor() as usize;
        if k_lo > k_hi {
            return Ok(0.5 * (eval(lo) + eval(hi)) * (hi - lo));
        }
        let mut total = 0.5 * (eval(lo) + f[k_lo]) * (self.times[k_lo] - lo);
        for k in k_lo..k_hi {
            total += 0.5 * (f[k] + f[k + 1]) * dt;
        }
        total += 0.5 * (f[k_hi] + eval(hi)) * (hi - self.times[k_hi]);
        Ok(total)
    }
}

fn riccati_rhs_tau(
    p: &DMatrix<f64>,
    a_t: &DMatrix<f64>,
    a: &DMatrix<f64>,
    ctc: &DMatrix<f64>,
    b: &DVector<f64>,
) -> DMatrix<f64> {
    let pb = p * b;
    a_t * p + p * a + ctc - &pb * pb.transpose()
}

/// RK4 on the differential form, integrated backwards from P(T) = G on a
/// uniform grid with `m` steps. The iterate is symmetrized every step.
pub fn solve_riccati_ode(
    a_mat: &DMatrix<f64>,
    b: &DVector<f64>,
    cost: &CostSpec,
    horizon: f64,
    m: usize,
) -> Result<RiccatiSolution> {
    let n = a_mat.nrows();
    if cost.n() != n || b.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: cost.n().min(b.len()),
        });
    }
    if !(horizon > 0.0) || m == 0 {
        return Err(Error::Config(format!(
            "need horizon > 0 and m >= 1, got {horizon}, {m}"
        )));
    }
    let h = horizon / m as f64;
    let a_t = a_mat.transpose();
    let ctc = cost.c.tr_mul(&cost.c);
    let mut p = cost.g.clone();
    // fill back-to-front: slot m holds P(T)
    let mut p_mats = vec![DMatrix::zeros(0, 0); m + 1];
    p_mats[m] = p.clone();
    for step in 0..m {
        let k1 = riccati_rhs_tau(&p, &a_t, a_mat, &ctc, b);
        let k2 = riccati_rhs_tau(&(&p + &k1 * (h / 2.0)), &a_t, a_mat, &ctc, b);
        let k3 = riccati_rhs_tau(&(&p + &k2 * (h / 2.0)), &a_t, a_mat, &ctc, b);
        let k4 = riccati_rhs_tau(&(&p + &k3 * h), &a_t, a_mat, &ctc, b);
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        p = 0.5 * (&p + p.transpose());
        if !p.iter().all(|v| v.is_finite()) || p.amax() > 1e6 {
            return Err(Error::Solver(format!(
                "Riccati iterate blew up at backward step {step}"
            )));
        }
        p_mats[m - 1 - step] = p.clone();
    }
    let times = (0..=m).map(|k| k as f64 * h).collect();
    Ok(RiccatiSolution::build(times, p_mats, b))
}

/// Picard iteration on the mild form. One sweep evaluates
///
///   P_k = Mᵀ(P_{k+1} + Δ/2·F_{k+1})M + Δ/2·F_k,
///   F_k = CᵀC - (P_k b)(P_k b)ᵀ   (from the previous iterate)
///
/// with M = e^{ΔtA}, which is the trapezoid-in-time discretization of the
/// integral formula, telescoped so each sweep costs O(m) products.
pub fn solve_riccati_mild(
    spec: &Spectrum,
    b: &DVector<f64>,
    cost: &CostSpec,
    horizon: f64,
    m: usize,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution> {
    let n = spec.n();
    if cost.n() != n || b.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: cost.n().min(b.len()),
        });
    }
    if !(horizon > 0.0) || m == 0 {
        return Err(Error::Config(format!(
            "need horizon > 0 and m >= 1, got {horizon}, {m}"
        )));
    }
    let h = horizon / m as f64;
    let step = spec.func_matrix(|s| (h * s).exp());
    let ctc = cost.c.tr_mul(&cost.c);

    let f_of = |p: &DMatrix<f64>| -> DMatrix<f64> {
        let pb = p * b;
        &ctc - &pb * pb.transpose()
    };

    let mut p_mats: Vec<DMatrix<f64>> = vec![cost.g.clone(); m + 1];
    for iter in 0..max_iter {
        let f: Vec<DMatrix<f64>> = p_mats.iter().map(&f_of).collect();
        let mut next = vec![DMatrix::zeros(0, 0); m + 1];
        next[m] = cost.g.clone();
        let mut delta: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in (0..m).rev() {
            let inner = &next[k + 1] + &f[k + 1] * (h / 2.0);
            let mut p = step.tr_mul(&(&inner * &step)) + &f[k] * (h / 2.0);
            p = 0.5 * (&p + p.transpose());
            if !p.iter().all(|v| v.is_finite()) || p.amax() > 1e6 {
                return Err(Error::Solver(format!(
                    "mild Riccati iterate blew up at backward step {k}"
                )));
            }
            delta = delta.max((&p - &p_mats[k]).amax());
            scale = scale.max(p.amax());
            next[k] = p;
        }
        p_mats = next;
        if delta <= tol * (1.0 + scale) {
            let times = (0..=m).map(|k| k as f64 * h).collect();
            return Ok(RiccatiSolution::build(times, p_mats, b));
        }
        if iter + 1 == max_iter {
            return Err(Error::Solver(format!(
                "mild Riccati Picard iteration did not converge in {max_iter} sweeps (last delta {delta:.3e})"
            )));
        }
    }
    unreachable!("loop returns or errors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{boundary_input, dirichlet_laplacian, LinOp, Spectrum};
    use crate::space::{build_grid, Gram, WeightKind, WeightSpec};
    use approx::assert_relative_eq;

    fn scalar_spectrum(a: f64) -> Spectrum {
        let op = LinOp::from_matrix(DMatrix::from_element(1, 1, a), 0);
        Spectrum::new(&op).unwrap()
    }

    #[test]
    fn scalar_closed_form_tanh() {
        // oracle: for a = 0, C = 1, G = 0 the scalar equation
        // p' = -1 + b²p² has p(t) = tanh(b(T-t))/b
        let b_val = 0.8;
        let cost = CostSpec::identity_running(1);
        let a = DMatrix::zeros(1, 1);
        let b = DVector::from_element(1, b_val);
        let sol = solve_riccati_ode(&a, &b, &cost, 1.0, 400).unwrap();
        for (k, &t) in sol.times.iter().enumerate() {
            let exact = (b_val * (1.0 - t)).tanh() / b_val;
            assert!((sol.p_mats[k][(0, 0)] - exact).abs() <= 1e-10);
        }
    }

    /// Reference scalar integrator: plain RK4 with a huge step count,
    /// written independently of the production solver.
    fn scalar_reference(a: f64, b: f64, c: f64, g: f64, horizon: f64, steps: usize) -> f64 {
        let h = horizon / steps as f64;
        let rhs = |p: f64| 2.0 * a * p + c * c - b * b * p * p;
        let mut p = g;
        for _ in 0..steps {
            let k1 = rhs(p);
            let k2 = rhs(p + 0.5 * h * k1);
            let k3 = rhs(p + 0.5 * h * k2);
            let k4 = rhs(p + h * k3);
            p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        p
    }

    #[test]
    fn scalar_surrogate_both_solvers() {
        // oracle: independent high-resolution scalar integration
        let (a_val, b_val, c_val, g_val) = (-0.7, 1.3, 1.0, 0.5);
        let reference = scalar_reference(a_val, b_val, c_val, g_val, 1.0, 1_000_000);
        let cost = CostSpec::new(
            DMatrix::from_element(1, 1, c_val),
            DMatrix::from_element(1, 1, g_val),
        )
        .unwrap();
        let a = DMatrix::from_element(1, 1, a_val);
        let b = DVector::from_element(1, b_val);
        let ode = solve_riccati_ode(&a, &b, &cost, 1.0, 400).unwrap();
        assert!((ode.p_mats[0][(0, 0)] - reference).abs() <= 1e-8);
        let spec = scalar_spectrum(a_val);
        let mild = solve_riccati_mild(&spec, &b, &cost, 1.0, 2000, 1e-12, 200).unwrap();
        assert!(
            (mild.p_mats[0][(0, 0)] - reference).abs() <= 1e-5,
            "mild {} vs ref {}",
            mild.p_mats[0][(0, 0)],
            reference
        );
    }

    #[test]
    fn mild_sign_flip_breaks_agreement() {
        // with the quadratic term added instead of subtracted, the mild
        // recursion solves a different equation; the scalar surrogate
        // exposes the defect. Emulate the flipped sign by negating b²
        // through an imaginary-b trick: p' = 2ap + c² + b²p² is the
        // flipped-sign weak form, solved by the reference integrator.
        let (a_val, b_val) = (-0.7, 1.3);
        let flipped = {
            let h = 1.0 / 1_000_000f64;
            let rhs = |p: f64| 2.0 * a_val * p + 1.0 + b_val * b_val * p * p;
            let mut p = 0.0;
            for _ in 0..1_000_000 {
                let k1 = rhs(p);
                let k2 = rhs(p + 0.5 * h * k1);
                let k3 = rhs(p + 0.5 * h * k2);
                let k4 = rhs(p + h * k3);
                p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            p
        };
        let correct = scalar_reference(a_val, b_val, 1.0, 0.0, 1.0, 1_000_000);
        let spec = scalar_spectrum(a_val);
        let b = DVector::from_element(1, b_val);
        let cost = CostSpec::identity_running(1);
        let mild = solve_riccati_mild(&spec, &b, &cost, 1.0, 2000, 1e-12, 200).unwrap();
        let p0 = mild.p_mats[0][(0, 0)];
        assert!((p0 - correct).abs() < 1e-4);
        assert!((p0 - flipped).abs() > 1e-2, "sign flip not discriminated");
    }

    fn pde_setup(n: usize) -> (Spectrum, DVector<f64>, DMatrix<f64>) {
        let w = WeightSpec::new(0.8, WeightKind::PurePower).unwrap();
        let grid = build_grid(w, n, 20.0, 2.0).unwrap();
        let gram = Gram::weighted(&grid).unwrap();
        let op = dirichlet_laplacian(&grid, &gram).unwrap();
        let spec = Spectrum::new(&op).unwrap();
        let bi = boundary_input(&spec, &grid, &gram, 1.0, 0.6).unwrap();
        let a = spec.func_matrix(|s| s);
        (spec, bi.b_ortho, a)
    }

    #[test]
    fn terminal_condition_symmetry_and_psd() {
        let (_, b, a) = pde_setup(48);
        let n = 48;
        let mut g = DMatrix::identity(n, n);
        g *= 0.3;
        let cost = CostSpec::new(DMatrix::identity(n, n), g.clone()).unwrap();
        let sol = solve_riccati_ode(&a, &b, &cost, 1.0, 200).unwrap();
        assert_eq!(sol.p_mats[200], g);
        for k in [0, 50, 150] {
            let p = &sol.p_mats[k];
            assert!((p - p.transpose()).amax() <= 1e-12 * p.amax());
            let chol = p.clone().cholesky();
            // PSD up to a tiny shift
            let shifted = p + DMatrix::identity(n, n) * 1e-12;
            assert!(chol.is_some() || shifted.cholesky().is_some());
        }
    }

    #[test]
    fn no_control_limit_is_observability_gramian() {
        // oracle: with b = 0, P(0) = ∫₀^T e^{sAᵀ} CᵀC e^{sA} ds, computed
        // by Simpson quadrature on dense exponentials
        let (spec, _, a) = pde_setup(24);
        let n = 24;
        let b0 = DVector::zeros(n);
        let cost = CostSpec::identity_running(n);
        let sol = solve_riccati_ode(&a, &b0, &cost, 1.0, 400).unwrap();
        let m = 200;
        let h = 1.0 / m as f64;
        let mut gramian = DMatrix::zeros(n, n);
        for i in 0..=m {
            let s = i as f64 * h;
            let e = spec.func_matrix(|v| (s * v).exp());
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            gramian += w * e.tr_mul(&e);
        }
        gramian *= h / 3.0;
        assert!(
            (&sol.p_mats[0] - &gramian).amax() <= 1e-6 * gramian.amax(),
            "gramian mismatch {:.3e}",
            (&sol.p_mats[0] - &gramian).amax() / gramian.amax()
        );
    }

    #[test]
    fn control_lowers_the_quadratic_form() {
        let (_, b, a) = pde_setup(32);
        let cost = CostSpec::identity_running(32);
        let with = solve_riccati_ode(&a, &b, &cost, 1.0, 200).unwrap();
        let without = solve_riccati_ode(&a, &DVector::zeros(32), &cost, 1.0, 200).unwrap();
        let x = DVector::from_fn(32, |i, _| 1.0 / (1.0 + i as f64));
        for k in [0usize, 60, 120] {
            assert!(with.quadratic_form(k, &x) <= without.quadratic_form(k, &x) + 1e-12);
        }
    }

    #[test]
    fn ode_and_mild_solvers_agree_on_the_pde() {
        let (spec, b, a) = pde_setup(32);
        let cost = CostSpec::identity_running(32);
        let ode = solve_riccati_ode(&a, &b, &cost, 1.0, 400).unwrap();
        let mild = solve_riccati_mild(&spec, &b, &cost, 1.0, 400, 1e-11, 200).unwrap();
        let diff = (&ode.p_mats[0] - &mild.p_mats[0]).amax();
        let scale = ode.p_mats[0].amax();
        assert!(diff <= 1e-4 * scale, "solver disagreement {:.3e}", diff / scale);
    }

    #[test]
    fn gain_interpolation_and_domain() {
        let (_, b, a) = pde_setup(16);
        let cost = CostSpec::identity_running(16);
        let sol = solve_riccati_ode(&a, &b, &cost, 1.0, 100).unwrap();
        // at grid points interpolation is exact
        let g40 = sol.gain(sol.times[40]).unwrap();
        assert!((&g40 - &sol.gains[40]).amax() <= 1e-14);
        // between grid points, between neighbors componentwise bounds
        let mid = sol.gain(0.405).unwrap();
        for i in 0..16 {
            let lo = sol.gains[40][i].min(sol.gains[41][i]);
            let hi = sol.gains[40][i].max(sol.gains[41][i]);
            assert!(mid[i] >= lo - 1e-14 && mid[i] <= hi + 1e-14);
        }
        assert!(sol.gain(-0.1).is_err());
        assert!(sol.gain(1.1).is_err());
        assert!(sol.p_at(0.33).is_ok());
    }

    #[test]
    fn trace_term_linearity_and_consistency() {
        let (_, b, a) = pde_setup(16);
        let cost = CostSpec::identity_running(16);
        let sol = solve_riccati_ode(&a, &b, &cost, 1.0, 100).unwrap();
        let whole = sol.trace_term(&b, 0.0, 1.0).unwrap();
        let split =
            sol.trace_term(&b, 0.0, 0.37).unwrap() + sol.trace_term(&b, 0.37, 1.0).unwrap();
        assert_relative_eq!(whole, split, max_relative = 1e-10);
        assert!(whole > 0.0);
        assert!(sol.trace_term(&b, -0.1, 0.5).is_err());
        assert_eq!(sol.trace_term(&b, 0.5, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn blowup_is_reported() {
        // wrong-sign quadratic cost drives the solution to +infinity
        let a = DMatrix::from_element(1, 1, 5.0);
        let b = DVector::from_element(1, 0.0);
        let cost = CostSpec::new(
            DMatrix::from_element(1, 1, 10.0),
            DMatrix::from_element(1, 1, 100.0),
        )
        .unwrap();
        let res = solve_riccati_ode(&a, &b, &cost, 5.0, 400);
        assert!(matches!(res, Err(Error::Solver(_))));
    }
}
