//! The Dirichlet Laplacian on the truncated graded mesh, its semigroup in
//! two independent realizations, fractional powers, the Dirichlet map and
//! boundary actuation vectors, Yosida smoothing, and the regularity
//! diagnostics of the weighted theory.
//!
//! All dense operators act in orthonormalized coordinates, where the
//! weighted adjoint is the plain transpose. The generator is assembled in
//! flux (finite-volume) form, which makes it similar to a symmetric
//! matrix through a diagonal scaling; the [`Spectrum`] stores that
//! similarity so matrix functions (exp, fractional powers, resolvents)
//! share one exact eigenbasis and satisfy their group laws to rounding.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::space::{to_ortho, Gram, Grid};
use crate::{Error, Result};

/// Dense operator in orthonormalized coordinates.
///
/// `sym_scale` is the diagonal D with D⁻¹·mat·D symmetric; it is the
/// carrier of the real-spectrum structure of the generator. Operators
/// without that structure (cost operators, ad-hoc matrices) use D = I.
#[derive(Debug, Clone)]
pub struct LinOp {
    pub mat: DMatrix<f64>,
    pub sym_scale: DVector<f64>,
    grid_id: u64,
}

impl LinOp {
    pub fn from_matrix(mat: DMatrix<f64>, grid_id: u64) -> Self {
        let n = mat.nrows();
        LinOp {
            mat,
            sym_scale: DVector::from_element(n, 1.0),
            grid_id,
        }
    }

    pub fn identity(n: usize, grid_id: u64) -> Self {
        Self::from_matrix(DMatrix::identity(n, n), grid_id)
    }

    pub fn zero(n: usize, grid_id: u64) -> Self {
        Self::from_matrix(DMatrix::zeros(n, n), grid_id)
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn grid_id(&self) -> u64 {
        self.grid_id
    }

    pub fn same_grid(&self, other_grid_id: u64) -> Result<()> {
        if self.grid_id != other_grid_id {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mat * x
    }
}

/// Discrete Dirichlet Laplacian in orthonormalized coordinates.
///
/// Flux form on the cells of the grid: S is the symmetric tridiagonal of
/// conductances 1/h with homogeneous Dirichlet fluxes at the virtual
/// endpoints 0 and xi_max, and the nodal operator is W⁻¹S for the cell
/// widths W. Conjugating into orthonormalized coordinates gives
/// D·(W^{-1/2} S W^{-1/2})·D⁻¹ with D = sqrt(gram/W).
pub fn dirichlet_laplacian(grid: &Grid, gram: &Gram) -> Result<LinOp> {
    if gram.grid_id() != grid.id() {
        return Err(Error::GridMismatch);
    }
    let n = grid.n();
    let h = grid.spacings();
    if h.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("degenerate mesh spacing".into()));
    }
    let w = &grid.quad_weights;
    // symmetric core W^{-1/2} S W^{-1/2}
    let mut sym = DMatrix::zeros(n, n);
    for i in 0..n {
        sym[(i, i)] = -(1.0 / h[i] + 1.0 / h[i + 1]) / w[i];
        if i + 1 < n {
            let off = 1.0 / (h[i + 1] * (w[i] * w[i + 1]).sqrt());
            sym[(i, i + 1)] = off;
            sym[(i + 1, i)] = off;
        }
    }
    let scale = DVector::from_iterator(n, gram.diag.iter().zip(w).map(|(g, w)| (g / w).sqrt()));
    let mut mat = sym.clone();
    for i in 0..n {
        for j in 0..n {
            mat[(i, j)] *= scale[i] / scale[j];
        }
    }
    Ok(LinOp {
        mat,
        sym_scale: scale,
        grid_id: grid.id(),
    })
}

/// Eigendecomposition of a generator with real spectrum.
///
/// Stores A = V·diag(eigs)·V⁻¹ where V = D·U for the orthonormal
/// eigenbasis U of the symmetric core. V is orthonormal only in the
/// unweighted case; the explicit inverse keeps reconstruction and group
/// laws exact for both weights.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// eigenvalues of the operator itself, ascending
    pub eigs: Vec<f64>,
    pub basis: DMatrix<f64>,
    pub basis_inv: DMatrix<f64>,
    grid_id: u64,
}

impl Spectrum {
    pub fn new(op: &LinOp) -> Result<Spectrum> {
        let n = op.n();
        let d = &op.sym_scale;
        let mut core = op.mat.clone();
        for i in 0..n {
            for j in 0..n {
                core[(i, j)] *= d[j] / d[i];
            }
        }
        let scale = core.amax().max(1e-300);
        let asym = (&core - core.transpose()).amax();
        if asym > 1e-8 * scale {
            return Err(Error::Numeric(format!(
                "operator core is not symmetric (asymmetry {asym:.3e})"
            )));
        }
        let core = 0.5 * (&core + core.transpose());
        let eig = core
            .symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut eigs = Vec::with_capacity(n);
        let mut u = DMatrix::zeros(n, n);
        for (col, &k) in order.iter().enumerate() {
            eigs.push(eig.eigenvalues[k]);
            u.set_column(col, &eig.eigenvectors.column(k));
        }
        let mut basis = u.clone();
        let mut basis_inv = u.transpose();
        for i in 0..n {
            for j in 0..n {
                basis[(i, j)] *= d[i];
                basis_inv[(j, i)] /= d[i];
            }
        }
        Ok(Spectrum {
            eigs,
            basis,
            basis_inv,
            grid_id: op.grid_id(),
        })
    }

    pub fn n(&self) -> usize {
        self.eigs.len()
    }

    pub fn grid_id(&self) -> u64 {
        self.grid_id
    }

    /// Dense matrix of f(A) in orthonormalized coordinates.
    pub fn func_matrix(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.n();
        let mut scaled = self.basis.clone();
        for j in 0..n {
            let fj = f(self.eigs[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        &scaled * &self.basis_inv
    }

    /// f(A)·x without forming the dense matrix.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64, x: &DVector<f64>) -> DVector<f64> {
        let mut c = &self.basis_inv * x;
        for j in 0..self.n() {
            c[j] *= f(self.eigs[j]);
        }
        &self.basis * c
    }

    /// f(A)ᵀ·x; used by the operator-norm power iteration.
    pub fn apply_fn_transpose(&self, f: impl Fn(f64) -> f64, x: &DVector<f64>) -> DVector<f64> {
        let mut c = self.basis.tr_mul(x);
        for j in 0..self.n() {
            c[j] *= f(self.eigs[j]);
        }
        self.basis_inv.tr_mul(&c)
    }

    /// Spectral (Euclidean operator) norm of f(A) by power iteration on
    /// f(A)ᵀf(A); deterministic start vector.
    pub fn op_norm(&self, f: impl Fn(f64) -> f64 + Copy) -> f64 {
        let n = self.n();
        let mut v = DVector::from_element(n, (n as f64).sqrt().recip());
        let mut est = 0.0;
        for _ in 0..200 {
            let w = self.apply_fn_transpose(f, &self.apply_fn(f, &v));
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            let new_est = norm.sqrt();
            v = w / norm;
            if (new_est - est).abs() <= 1e-11 * new_est.max(1.0) {
                return new_est;
            }
            est = new_est;
        }
        est
    }
}

/// e^{tA} as a dense matrix through the spectral decomposition.
pub fn semigroup_matrix(spec: &Spectrum, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("t must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(DMatrix::identity(spec.n(), spec.n()));
    }
    Ok(spec.func_matrix(|s| (t * s).exp()))
}

/// (λ₀ - A)^γ as a dense matrix.
pub fn fractional_power(spec: &Spectrum, lambda0: f64, gamma: f64) -> Result<DMatrix<f64>> {
    shifted_check(spec, lambda0)?;
    if gamma == 0.0 {
        return Ok(DMatrix::identity(spec.n(), spec.n()));
    }
    Ok(spec.func_matrix(|s| (lambda0 - s).powf(gamma)))
}

fn shifted_check(spec: &Spectrum, lambda0: f64) -> Result<()> {
    if !(lambda0 > 0.0) {
        return Err(Error::Domain(format!("lambda0 must be > 0, got {lambda0}")));
    }
    let top = *spec.eigs.last().expect("nonempty spectrum");
    if lambda0 - top <= 0.0 {
        return Err(Error::Numeric(format!(
            "lambda0 - A has a nonpositive eigenvalue ({:.3e}); lambda0 too small for this discretization",
            lambda0 - top
        )));
    }
    Ok(())
}

/// Yosida-type smoothing (n(nI - A)⁻¹)².
pub fn yosida(spec: &Spectrum, n: u32) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Domain("yosida index must be >= 1".into()));
    }
    let nf = n as f64;
    if spec.eigs.iter().any(|&s| nf - s <= 0.0) {
        return Err(Error::Numeric("singular resolvent in yosida smoothing".into()));
    }
    Ok(spec.func_matrix(|s| (nf / (nf - s)).powi(2)))
}

/// The exact half-line Dirichlet heat kernel.
pub fn heat_kernel(t: f64, xi: f64, eta: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("t must be > 0, got {t}")));
    }
    let inv4t = 0.25 / t;
    let a = (-(xi - eta) * (xi - eta) * inv4t).exp();
    let b = (-(xi + eta) * (xi + eta) * inv4t).exp();
    Ok((a - b) / (4.0 * std::f64::consts::PI * t).sqrt())
}

/// e^{tA} applied through the exact half-line kernel and the grid's
/// quadrature rule. Independent of the matrix realization: no truncation
/// boundary enters beyond the quadrature cutoff at xi_max.
pub fn apply_semigroup_kernel(t: f64, f: &DVector<f64>, grid: &Grid) -> Result<DVector<f64>> {
    if f.len() != grid.n() {
        return Err(Error::Dimension {
            expected: grid.n(),
            got: f.len(),
        });
    }
    let n = grid.n();
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xi = grid.nodes[i];
        let mut acc = 0.0;
        for j in 0..n {
            acc += heat_kernel(t, xi, grid.nodes[j])? * f[j] * grid.quad_weights[j];
        }
        y[i] = acc;
    }
    Ok(y)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Closed form of (e^{tA} applied to ξ ↦ e^{-μξ}) evaluated at ξ, i.e.
/// ∫₀^∞ k(t,ξ,η) e^{-μη} dη, expressed through the standard normal CDF:
///
///   e^{μ²t} [ e^{-μξ} N((ξ-2μt)/√(2t)) - e^{μξ} N((-ξ-2μt)/√(2t)) ].
pub fn semigroup_on_exponential(t: f64, mu: f64, xi: f64) -> Result<f64> {
    if !(t > 0.0) || !(mu > 0.0) {
        return Err(Error::Domain(format!("need t > 0 and mu > 0, got t={t}, mu={mu}")));
    }
    let s = (2.0 * t).sqrt();
    let gauss = mu * mu * t;
    let plus = (gauss - mu * xi).exp() * normal_cdf((xi - 2.0 * mu * t) / s);
    let minus = (gauss + mu * xi).exp() * normal_cdf((-xi - 2.0 * mu * t) / s);
    Ok(plus - minus)
}

/// Nodal samples of the Dirichlet map D_λ(a): ξ ↦ a·e^{-√λ ξ}.
pub fn dirichlet_map(lambda: f64, a: f64, grid: &Grid) -> Result<DVector<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    let r = lambda.sqrt();
    Ok(DVector::from_iterator(
        grid.n(),
        grid.nodes.iter().map(|&x| a * (-r * x).exp()),
    ))
}

/// Boundary actuation data: ψ = ψ_{λ₀}, E·1 = (λ₀-A)^α ψ and
/// B·1 = (λ₀-A)ψ, kept both nodally and in orthonormalized coordinates.
#[derive(Debug, Clone)]
pub struct BoundaryInput {
    pub lambda0: f64,
    pub alpha: f64,
    /// nodal samples of ψ_{λ₀}
    pub psi: DVector<f64>,
    pub psi_ortho: DVector<f64>,
    pub e_ortho: DVector<f64>,
    pub b_ortho: DVector<f64>,
    grid_id: u64,
}

impl BoundaryInput {
    /// Assembles the vectors from an arbitrary nodal ψ; no admissibility
    /// check on α. Test scaffolding (scalar surrogates) enters here.
    pub fn from_psi(
        spec: &Spectrum,
        gram: &Gram,
        lambda0: f64,
        alpha: f64,
        psi: DVector<f64>,
    ) -> Result<BoundaryInput> {
        shifted_check(spec, lambda0)?;
        let psi_ortho = to_ortho(&psi, gram)?;
        let e_ortho = spec.apply_fn(|s| (lambda0 - s).powf(alpha), &psi_ortho);
        let b_ortho = spec.apply_fn(|s| lambda0 - s, &psi_ortho);
        Ok(BoundaryInput {
            lambda0,
            alpha,
            psi,
            psi_ortho,
            e_ortho,
            b_ortho,
            grid_id: spec.grid_id(),
        })
    }

    pub fn grid_id(&self) -> u64 {
        self.grid_id
    }
}

/// Assembles the boundary input for the grid's weight, enforcing the
/// admissible window 1/2 < α < 1/2 + θ/4.
pub fn boundary_input(
    spec: &Spectrum,
    grid: &Grid,
    gram: &Gram,
    lambda0: f64,
    alpha: f64,
) -> Result<BoundaryInput> {
    let theta = grid.weight.theta;
    let hi = 0.5 + theta / 4.0;
    if !(alpha > 0.5 && alpha < hi) {
        return Err(Error::Config(format!(
            "alpha must lie in (0.5, {hi}) for theta={theta}, got {alpha}"
        )));
    }
    let psi = dirichlet_map(lambda0, 1.0, grid)?;
    BoundaryInput::from_psi(spec, gram, lambda0, alpha, psi)
}

/// Geometric grid on [lo, hi] with `points` segments.
fn geometric_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let ratio = (hi / lo).powf(1.0 / points as f64);
    let mut g = Vec::with_capacity(points + 1);
    let mut s = lo;
    for _ in 0..points {
        g.push(s);
        s *= ratio;
    }
    g.push(hi);
    g
}

/// The interpolation-criterion integral
/// ∫_{t_min}^{t_cut} t^{2σ-3} ‖(e^{tA} - I)ψ‖² dt
/// by trapezoidal quadrature on a geometric t-grid. Divergence is a trend
/// under refinement (smaller t_min with finer grids), never a thrown
/// error.
pub fn regularity_integral(
    spec: &Spectrum,
    psi_ortho: &DVector<f64>,
    sigma: f64,
    t_cut: f64,
    t_min: f64,
    points: usize,
) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Domain(format!("sigma must lie in (0,1), got {sigma}")));
    }
    if !(t_cut > t_min && t_min > 0.0 && t_cut <= 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < t_min < t_cut <= 1, got t_min={t_min}, t_cut={t_cut}"
        )));
    }
    if psi_ortho.amax() == 0.0 {
        return Ok(0.0);
    }
    let grid = geometric_grid(t_min, t_cut, points);
    let integrand = |t: f64| -> f64 {
        let v = spec.apply_fn(|s| (t * s).exp() - 1.0, psi_ortho);
        t.powf(2.0 * sigma - 3.0) * v.norm_squared()
    };
    let mut total = 0.0;
    let mut prev = integrand(grid[0]);
    for w in grid.windows(2) {
        let next = integrand(w[1]);
        total += 0.5 * (prev + next) * (w[1] - w[0]);
        prev = next;
    }
    Ok(total)
}

/// Grid-tied lower cutoff for the interpolation integral: the boundary
/// layer of width √t must stay resolved by the first mesh cell.
pub fn default_t_min(grid: &Grid) -> f64 {
    let h0 = grid.nodes[0];
    (5.0 * h0).powi(2)
}

/// ∫_{0}^{T} s^{-γ} ‖(λ₀-A) e^{sA} ψ‖² ds on a geometric s-grid, with the
/// analytically integrated stub below s_min. Finite-and-stable under
/// refinement exactly when γ < 2α - 1.
pub fn gamma_integral(
    bi: &BoundaryInput,
    spec: &Spectrum,
    gamma: f64,
    horizon: f64,
    points: usize,
) -> Result<f64> {
    if !(gamma < 1.0) {
        return Err(Error::Domain(format!("gamma must be < 1, got {gamma}")));
    }
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be > 0, got {horizon}")));
    }
    let lambda0 = bi.lambda0;
    let s_min = horizon * 1e-10;
    let grid = geometric_grid(s_min, horizon, points);
    let integrand = |s: f64| -> f64 {
        let v = spec.apply_fn(|e| (lambda0 - e) * (s * e).exp(), &bi.psi_ortho);
        s.powf(-gamma) * v.norm_squared()
    };
    let mut total = 0.0;
    let mut prev = integrand(grid[0]);
    // stub on (0, s_min): integrand ≈ s^{-γ}·‖(λ₀-A)ψ‖² there
    total += prev * s_min / (1.0 - gamma);
    for w in grid.windows(2) {
        let next = integrand(w[1]);
        total += 0.5 * (prev + next) * (w[1] - w[0]);
        prev = next;
    }
    Ok(total)
}
