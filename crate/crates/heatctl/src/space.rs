//! The discrete weighted space H = L²((0,∞); ρ(ξ)dξ), truncated to
//! (0, xi_max) on a graded mesh.
//!
//! Nodal vectors carry function samples at the grid nodes; the diagonal
//! [`Gram`] matrix realizes the weighted inner product through the
//! quadrature rule. `to_ortho` rescales nodal vectors into coordinates in
//! which the H inner product is the Euclidean one, so every weighted
//! adjoint downstream is a plain matrix transpose.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

static GRID_ID: AtomicU64 = AtomicU64::new(1);

/// Which of the two admissible weights to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// ρ(ξ) = ξ^{1+θ}
    PurePower,
    /// ρ(ξ) = min(1, ξ^{1+θ})
    Capped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub theta: f64,
    pub kind: WeightKind,
}

impl WeightSpec {
    pub fn new(theta: f64, kind: WeightKind) -> Result<Self> {
        if !theta.is_finite() || theta <= 0.0 || theta >= 1.0 {
            return Err(Error::Config(format!(
                "theta must lie in (0, 1), got {theta}"
            )));
        }
        Ok(Self { theta, kind })
    }
}

/// Weight evaluation ρ(ξ).
pub fn weight_at(weight: &WeightSpec, xi: f64) -> Result<f64> {
    if !xi.is_finite() || xi < 0.0 {
        return Err(Error::Domain(format!("xi must be finite and >= 0, got {xi}")));
    }
    let p = xi.powf(1.0 + weight.theta);
    Ok(match weight.kind {
        WeightKind::PurePower => p,
        WeightKind::Capped => p.min(1.0),
    })
}

/// Truncated half-line mesh with quadrature data.
///
/// Nodes follow the graded map ξ_i = xi_max·((i+1)/(n+1))^clustering, so
/// they exclude both ξ=0 and ξ=xi_max (homogeneous Dirichlet ends). The
/// quadrature weights are the widths of the cells around each node, with
/// the first and last cells extended to the virtual endpoints 0 and
/// xi_max; they sum to xi_max exactly up to rounding.
#[derive(Debug, Clone)]
pub struct Grid {
    pub nodes: Vec<f64>,
    pub xi_max: f64,
    pub quad_weights: Vec<f64>,
    pub weight: WeightSpec,
    pub clustering: f64,
    pub refinement_level: u32,
    id: u64,
}

impl Grid {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Mesh spacings including the virtual endpoints: h[0] = nodes[0] - 0,
    /// h[n] = xi_max - nodes[n-1]. Length n+1.
    pub fn spacings(&self) -> Vec<f64> {
        let n = self.n();
        let mut h = Vec::with_capacity(n + 1);
        h.push(self.nodes[0]);
        for i in 1..n {
            h.push(self.nodes[i] - self.nodes[i - 1]);
        }
        h.push(self.xi_max - self.nodes[n - 1]);
        h
    }

    /// Same truncation radius, doubled node count, bumped level.
    pub fn refine(&self) -> Grid {
        let mut g = build_grid(self.weight, 2 * self.n(), self.xi_max, self.clustering)
            .expect("refining a valid grid cannot fail");
        g.refinement_level = self.refinement_level + 1;
        g
    }
}

pub fn build_grid(weight: WeightSpec, n: usize, xi_max: f64, clustering: f64) -> Result<Grid> {
    if n < 8 {
        return Err(Error::Config(format!("n must be >= 8, got {n}")));
    }
    if !xi_max.is_finite() || xi_max < 5.0 {
        return Err(Error::Config(format!("xi_max must be >= 5, got {xi_max}")));
    }
    if !clustering.is_finite() || clustering < 1.0 {
        return Err(Error::Config(format!(
            "clustering must be >= 1, got {clustering}"
        )));
    }
    let nodes: Vec<f64> = (0..n)
        .map(|i| xi_max * ((i + 1) as f64 / (n + 1) as f64).powf(clustering))
        .collect();

    // Cell boundaries: 0, midpoints between nodes, xi_max. The weight of a
    // node is its cell width, so constants integrate to xi_max exactly.
    let mut quad_weights = Vec::with_capacity(n);
    let mut left = 0.0;
    for i in 0..n {
        let right = if i + 1 < n {
            0.5 * (nodes[i] + nodes[i + 1])
        } else {
            xi_max
        };
        quad_weights.push(right - left);
        left = right;
    }

    Ok(Grid {
        nodes,
        xi_max,
        quad_weights,
        weight,
        clustering,
        refinement_level: 0,
        id: GRID_ID.fetch_add(1, Ordering::Relaxed),
    })
}

/// Diagonal Gram matrix of the quadrature inner product
/// ⟨f,g⟩ = Σ f_i g_i ρ(ξ_i) w_i.
#[derive(Debug, Clone)]
pub struct Gram {
    pub diag: Vec<f64>,
    pub sqrt_diag: Vec<f64>,
    pub inv_sqrt_diag: Vec<f64>,
    grid_id: u64,
}

impl Gram {
    /// Gram of the weighted space carried by the grid.
    pub fn weighted(grid: &Grid) -> Result<Gram> {
        let diag: Vec<f64> = grid
            .nodes
            .iter()
            .zip(&grid.quad_weights)
            .map(|(&x, &w)| weight_at(&grid.weight, x).map(|r| r * w))
            .collect::<Result<_>>()?;
        Self::from_diag(diag, grid.id())
    }

    /// Gram of the plain L²(dξ) space on the same grid (ρ ≡ 1); used for
    /// the unweighted failure diagnostics.
    pub fn unweighted(grid: &Grid) -> Gram {
        Self::from_diag(grid.quad_weights.clone(), grid.id()).expect("positive cell widths")
    }

    fn from_diag(diag: Vec<f64>, grid_id: u64) -> Result<Gram> {
        if diag.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Numeric("Gram diagonal must be strictly positive".into()));
        }
        let sqrt_diag: Vec<f64> = diag.iter().map(|d| d.sqrt()).collect();
        let inv_sqrt_diag: Vec<f64> = sqrt_diag.iter().map(|s| 1.0 / s).collect();
        Ok(Gram {
            diag,
            sqrt_diag,
            inv_sqrt_diag,
            grid_id,
        })
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn grid_id(&self) -> u64 {
        self.grid_id
    }
}

fn check_len(len: usize, gram: &Gram) -> Result<()> {
    if len != gram.n() {
        return Err(Error::Dimension {
            expected: gram.n(),
            got: len,
        });
    }
    Ok(())
}

/// The H inner product of two nodal vectors.
pub fn inner(f: &DVector<f64>, g: &DVector<f64>, gram: &Gram) -> Result<f64> {
    check_len(f.len(), gram)?;
    check_len(g.len(), gram)?;
    Ok(f.iter()
        .zip(g.iter())
        .zip(&gram.diag)
        .map(|((a, b), d)| a * b * d)
        .sum())
}

pub fn h_norm(f: &DVector<f64>, gram: &Gram) -> Result<f64> {
    inner(f, f, gram).map(f64::sqrt)
}

/// Nodal -> orthonormalized coordinates (isometry onto Euclidean space).
pub fn to_ortho(f: &DVector<f64>, gram: &Gram) -> Result<DVector<f64>> {
    check_len(f.len(), gram)?;
    Ok(DVector::from_iterator(
        f.len(),
        f.iter().zip(&gram.sqrt_diag).map(|(v, s)| v * s),
    ))
}

/// Inverse of [`to_ortho`].
pub fn from_ortho(f: &DVector<f64>, gram: &Gram) -> Result<DVector<f64>> {
    check_len(f.len(), gram)?;
    Ok(DVector::from_iterator(
        f.len(),
        f.iter().zip(&gram.inv_sqrt_diag).map(|(v, s)| v * s),
    ))
}
