//! Reproducible boundary-noise simulation.
//!
//! The mild state equation is advanced by an exponential-Euler scheme
//!
//!   x_{k+1} = e^{ΔtA} x_k + (∫₀^Δt e^{sA} ds) b·u_k + G_k,
//!
//! which is exact for piecewise-constant controls; the Gaussian increment
//! G_k carries the *exact* covariance ∫₀^Δt e^{sA} b bᵀ e^{sAᵀ} ds of the
//! stochastic convolution over one step, evaluated spectrally, so the
//! chain samples the true mild solution at the grid times up to the
//! control discretization only.
//!
//! Randomness is counter-keyed: every (seed, tag, path, step) names an
//! independent ChaCha stream. Ensembles are therefore bit-identical
//! across thread counts and across which subsets of paths are simulated.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::map_indexed;
use crate::operators::Spectrum;
use crate::{Error, Result};

/// Stream tags namespacing the counter-keyed generators.
pub const TAG_STATE_NOISE: u64 = 1;
pub const TAG_BROWNIAN: u64 = 2;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent generator for one (seed, tag, path, step) cell of the
/// experiment. Pure function of its arguments.
pub fn stream_rng(seed: u64, tag: u64, path: u64, step: u64) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09e667f3bcc908;
    let mut key = [0u8; 32];
    for (slot, salt) in [tag, path, step, 0xb7e151628aed2a6a].into_iter().enumerate() {
        state ^= salt.wrapping_mul(0xff51afd7ed558ccd);
        let word = splitmix64(&mut state);
        key[8 * slot..8 * (slot + 1)].copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Scalar Brownian increments ΔW_k ~ N(0, dt) for one path.
pub fn brownian_increments(seed: u64, path: u64, n_steps: usize, dt: f64) -> Vec<f64> {
    let s = dt.sqrt();
    (0..n_steps)
        .map(|k| {
            let z: f64 = stream_rng(seed, TAG_BROWNIAN, path, k as u64).sample(StandardNormal);
            s * z
        })
        .collect()
}

/// Ensemble dimensions and switches.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub noise: bool,
    /// keep the whole state trajectory of every path (memory-heavy;
    /// scalar probes suffice for the cost functionals)
    pub record_states: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(Error::Config(
                "n_paths and n_steps must be positive".into(),
            ));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be > 0, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
}

/// The control applied on step k of path p (state x at time t_k).
#[derive(Debug, Clone)]
pub enum ControlSignal {
    Zero,
    Constant(f64),
    /// one shared control sequence, length n_steps
    Sampled(Vec<f64>),
    /// a recorded sequence per path, n_paths × n_steps
    PerPath(Vec<Vec<f64>>),
    /// time-varying feedback u = -g_k·x; gain rows at the grid times,
    /// length >= n_steps
    Feedback(Vec<DVector<f64>>),
}

impl ControlSignal {
    fn value(&self, path: usize, step: usize, x: &DVector<f64>) -> Result<f64> {
        Ok(match self {
            ControlSignal::Zero => 0.0,
            ControlSignal::Constant(u) => *u,
            ControlSignal::Sampled(u) => *u.get(step).ok_or(Error::Dimension {
                expected: step + 1,
                got: u.len(),
            })?,
            ControlSignal::PerPath(per) => {
                let u = per.get(path).ok_or(Error::Dimension {
                    expected: path + 1,
                    got: per.len(),
                })?;
                *u.get(step).ok_or(Error::Dimension {
                    expected: step + 1,
                    got: u.len(),
                })?
            }
            ControlSignal::Feedback(gains) => {
                let g = gains.get(step).ok_or(Error::Dimension {
                    expected: step + 1,
                    got: gains.len(),
                })?;
                -g.dot(x)
            }
        })
    }
}

/// Precomputed one-step propagation data in orthonormalized coordinates.
#[derive(Debug, Clone)]
pub struct Propagator {
    /// e^{ΔtA}
    pub step_mat: DMatrix<f64>,
    /// (∫₀^Δt e^{sA} ds) b
    pub jb: DVector<f64>,
    /// L with L·Lᵀ = ∫₀^Δt e^{sA} b bᵀ e^{sAᵀ} ds, columns = noise rank
    pub noise_factor: DMatrix<f64>,
    pub dt: f64,
    pub n_steps: usize,
}

impl Propagator {
    pub fn new(
        spec: &Spectrum,
        b_ortho: &DVector<f64>,
        horizon: f64,
        n_steps: usize,
    ) -> Result<Propagator> {
        if b_ortho.len() != spec.n() {
            return Err(Error::Dimension {
                expected: spec.n(),
                got: b_ortho.len(),
            });
        }
        if !(horizon > 0.0) || n_steps == 0 {
            return Err(Error::Config(format!(
                "need horizon > 0 and n_steps >= 1, got {horizon}, {n_steps}"
            )));
        }
        let dt = horizon / n_steps as f64;
        let step_mat = spec.func_matrix(|s| (dt * s).exp());
        let jb = spec.apply_fn(
            |s| {
                if s.abs() < 1e-12 {
                    dt
                } else {
                    ((dt * s).exp() - 1.0) / s
                }
            },
            b_ortho,
        );

        // exact step covariance: with c = V⁻¹b and μ = -eig,
        // Q = V [ccᵀ ∘ ((1 - e^{-Δt(μ_j+μ_k)})/(μ_j+μ_k))] Vᵀ
        let n = spec.n();
        let c = &spec.basis_inv * b_ortho;
        let mut core = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..=j {
                let mu = -(spec.eigs[j] + spec.eigs[k]);
                let integral = if mu.abs() < 1e-12 {
                    dt
                } else {
                    (-(-dt * mu).exp_m1()) / mu
                };
                let v = c[j] * c[k] * integral;
                core[(j, k)] = v;
                core[(k, j)] = v;
            }
        }
        let q = &spec.basis * core * spec.basis.transpose();
        let q = 0.5 * (&q + q.transpose());
        let eig = q.symmetric_eigen();
        let d_max = eig
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &d| m.max(d.abs()));
        let kept: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > 1e-14 * d_max)
            .collect();
        let mut noise_factor = DMatrix::zeros(n, kept.len().max(1));
        for (col, &i) in kept.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            noise_factor.set_column(col, &(eig.eigenvectors.column(i) * s));
        }
        Ok(Propagator {
            step_mat,
            jb,
            noise_factor,
            dt,
            n_steps,
        })
    }

    pub fn n(&self) -> usize {
        self.step_mat.nrows()
    }

    /// The time grid t_0 = 0, ..., t_{n_steps} = horizon.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 * self.dt).collect()
    }

    fn noise_increment(&self, seed: u64, path: u64, step: u64) -> DVector<f64> {
        let mut rng = stream_rng(seed, TAG_STATE_NOISE, path, step);
        let r = self.noise_factor.ncols();
        let z = DVector::from_iterator(r, (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.noise_factor * z
    }
}

/// Scalar probes attached to a simulation; all matrices live in
/// orthonormalized coordinates.
#[derive(Clone, Copy, Default)]
pub struct Probes<'a> {
    /// record |C x_k|² at every grid time
    pub cost_c: Option<&'a DMatrix<f64>>,
    /// record ⟨G x_N, x_N⟩ at the terminal time
    pub terminal_g: Option<&'a DMatrix<f64>>,
    /// record g_k·x_k at every grid time; length >= n_steps + 1
    pub gains: Option<&'a [DVector<f64>]>,
}

impl<'a> Probes<'a> {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Everything recorded along one path.
#[derive(Debug, Clone)]
pub struct PathRecord {
    /// u_k, k = 0..n_steps-1
    pub controls: Vec<f64>,
    /// ‖x_k‖² at the grid times (n_steps + 1 values)
    pub state_norm_sq: Vec<f64>,
    /// |C x_k|² when the C probe is attached
    pub c_quad: Option<Vec<f64>>,
    /// g_k·x_k when the gain probe is attached
    pub gain_dot_x: Option<Vec<f64>>,
    /// ⟨G x_N, x_N⟩ when the terminal probe is attached
    pub terminal_g_form: Option<f64>,
    pub terminal: DVector<f64>,
    pub states: Option<Vec<DVector<f64>>>,
}

/// One path of the exponential-Euler chain. Public so sequential drivers
/// (benches, diagnostics) can bypass the ensemble machinery.
pub fn simulate_path(
    prop: &Propagator,
    x0: &DVector<f64>,
    control: &ControlSignal,
    sim: &SimConfig,
    probes: Probes<'_>,
    path: usize,
) -> Result<PathRecord> {
    if x0.len() != prop.n() {
        return Err(Error::Dimension {
            expected: prop.n(),
            got: x0.len(),
        });
    }
    let n_steps = sim.n_steps;
    let mut x = x0.clone();
    let mut controls = Vec::with_capacity(n_steps);
    let mut state_norm_sq = Vec::with_capacity(n_steps + 1);
    let mut c_quad = probes.cost_c.map(|_| Vec::with_capacity(n_steps + 1));
    let mut gain_dot_x = probes.gains.map(|_| Vec::with_capacity(n_steps + 1));
    let mut states = sim.record_states.then(|| Vec::with_capacity(n_steps + 1));

    let record = |x: &DVector<f64>,
                      k: usize,
                      state_norm_sq: &mut Vec<f64>,
                      c_quad: &mut Option<Vec<f64>>,
                      gain_dot_x: &mut Option<Vec<f64>>,
                      states: &mut Option<Vec<DVector<f64>>>|
     -> Result<()> {
        state_norm_sq.push(x.norm_squared());
        if let (Some(buf), Some(c)) = (c_quad.as_mut(), probes.cost_c) {
            buf.push((c * x).norm_squared());
        }
        if let (Some(buf), Some(gains)) = (gain_dot_x.as_mut(), probes.gains) {
            let g = gains.get(k).ok_or(Error::Dimension {
                expected: k + 1,
                got: gains.len(),
            })?;
            buf.push(g.dot(x));
        }
        if let Some(buf) = states.as_mut() {
            buf.push(x.clone());
        }
        Ok(())
    };

    record(&x, 0, &mut state_norm_sq, &mut c_quad, &mut gain_dot_x, &mut states)?;
    for k in 0..n_steps {
        let u = control.value(path, k, &x)?;
        controls.push(u);
        let mut next = &prop.step_mat * &x + &prop.jb * u;
        if sim.noise {
            next += prop.noise_increment(sim.seed, path as u64, k as u64);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation { step: k });
        }
        x = next;
        record(&x, k + 1, &mut state_norm_sq, &mut c_quad, &mut gain_dot_x, &mut states)?;
    }

    let terminal_g_form = probes.terminal_g.map(|g| (g * &x).dot(&x));
    Ok(PathRecord {
        controls,
        state_norm_sq,
        c_quad,
        gain_dot_x,
        terminal_g_form,
        terminal: x,
        states,
    })
}

/// A simulated ensemble with its time grid.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub records: Vec<PathRecord>,
    pub times: Vec<f64>,
    pub dt: f64,
}

impl TrajectoryEnsemble {
    pub fn n_paths(&self) -> usize {
        self.records.len()
    }
}

/// Simulates the full ensemble; parallel over paths when the `parallel`
/// feature is on, with schedule-independent output.
pub fn simulate_ensemble(
    prop: &Propagator,
    x0: &DVector<f64>,
    control: &ControlSignal,
    sim: &SimConfig,
    probes: Probes<'_>,
) -> Result<TrajectoryEnsemble> {
    sim.validate()?;
    if sim.n_steps != prop.n_steps {
        return Err(Error::Config(format!(
            "propagator built for {} steps, simulation requests {}",
            prop.n_steps, sim.n_steps
        )));
    }
    let records: Vec<Result<PathRecord>> = map_indexed(sim.n_paths, |p| {
        simulate_path(prop, x0, control, sim, probes, p)
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEnsemble {
        records,
        times: prop.times(),
        dt: prop.dt,
    })
}

/// The stochastic convolution ∫₀^T e^{(T-s)A} b dW(s) for one path: the
/// zero-control, zero-initial-state chain. Shares noise streams with
/// [`simulate_path`], so both agree path by path.
pub fn stochastic_convolution(prop: &Propagator, seed: u64, path: u64) -> DVector<f64> {
    let mut x = DVector::zeros(prop.n());
    for k in 0..prop.n_steps {
        x = &prop.step_mat * x + prop.noise_increment(seed, path, k as u64);
    }
    x
}
