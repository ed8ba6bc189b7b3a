//! Backward adjoint problem, solved forward in reversed time `s = T - t` with
//! Crank-Nicolson.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_boundary_mass, assemble_mass, assemble_stiffness, ConductivityField};
use crate::forward::{restrict, TimeGrid, TimeSeriesField};
use crate::ionic::IonicParams;
use crate::mesh::{BoundarySubset, Mesh};
use crate::sparse::{cg_solve_from, spmv, SolveOptions, SparseMatrix};

/// Quadrature of boundary data over the measured node set.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryQuadrature {
    /// Surface mass matrix of `Gamma`, in local node numbering.
    Surface { nodes: Vec<usize>, matrix: SparseMatrix },
    /// Point data at nodes, each weighted by its lumped surface mass.
    Points { nodes: Vec<usize>, weights: Vec<f64> },
}

impl BoundaryQuadrature {
    pub fn surface(mesh: &Mesh, gamma: &BoundarySubset) -> Result<Self> {
        let b = assemble_boundary_mass(mesh, gamma)?;
        Ok(BoundaryQuadrature::Surface {
            nodes: gamma.nodes().to_vec(),
            matrix: restrict(&b, gamma.nodes()),
        })
    }

    /// Point measurements at the given `Gamma` nodes.
    pub fn points(mesh: &Mesh, gamma: &BoundarySubset, nodes: Vec<usize>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Invalid("measurement point set is empty".into()));
        }
        let b = assemble_boundary_mass(mesh, gamma)?;
        let sums = b.row_sums();
        let mut weights = Vec::with_capacity(nodes.len());
        for &v in &nodes {
            if v >= sums.len() || gamma.nodes().binary_search(&v).is_err() {
                return Err(Error::Invalid(format!("measurement node {v} is not on the measured surface")));
            }
            weights.push(sums[v]);
        }
        Ok(BoundaryQuadrature::Points { nodes, weights })
    }

    pub fn nodes(&self) -> &[usize] {
        match self {
            BoundaryQuadrature::Surface { nodes, .. } | BoundaryQuadrature::Points { nodes, .. } => nodes,
        }
    }

    pub fn is_points(&self) -> bool {
        matches!(self, BoundaryQuadrature::Points { .. })
    }

    /// Local load vector `B r`.
    pub fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.nodes().len() {
            return Err(Error::DimensionMismatch {
                context: "boundary residual",
                expected: self.nodes().len(),
                found: r.len(),
            });
        }
        match self {
            BoundaryQuadrature::Surface { matrix, .. } => spmv(matrix, r),
            BoundaryQuadrature::Points { weights, .. } => {
                Ok(r.iter().zip(weights).map(|(a, w)| a * w).collect())
            }
        }
    }

    /// `r^T B r`.
    pub fn norm_squared(&self, r: &[f64]) -> Result<f64> {
        Ok(crate::sparse::dot(r, &self.apply(r)?))
    }
}

/// Residual `u - u_meas` on the measured nodes at every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchSource {
    quadrature: BoundaryQuadrature,
    grid: TimeGrid,
    residual: Vec<Vec<f64>>,
}

impl MismatchSource {
    pub fn new(quadrature: BoundaryQuadrature, grid: TimeGrid, residual: Vec<Vec<f64>>) -> Result<Self> {
        if residual.len() != grid.n_frames() {
            return Err(Error::DimensionMismatch {
                context: "mismatch frames",
                expected: grid.n_frames(),
                found: residual.len(),
            });
        }
        let m = quadrature.nodes().len();
        for (n, r) in residual.iter().enumerate() {
            if r.len() != m {
                return Err(Error::DimensionMismatch {
                    context: "mismatch frame length",
                    expected: m,
                    found: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n });
            }
        }
        Ok(Self {
            quadrature,
            grid,
            residual,
        })
    }

    /// Residual between a predicted field and measured values on the quadrature nodes.
    pub fn from_prediction(
        quadrature: BoundaryQuadrature,
        predicted: &TimeSeriesField,
        measured: &[Vec<f64>],
    ) -> Result<Self> {
        if measured.len() != predicted.grid().n_frames() {
            return Err(Error::DimensionMismatch {
                context: "measurement frames",
                expected: predicted.grid().n_frames(),
                found: measured.len(),
            });
        }
        let nodes = quadrature.nodes().to_vec();
        let residual = predicted
            .frames()
            .iter()
            .zip(measured)
            .map(|(u, m)| {
                if m.len() != nodes.len() {
                    return Err(Error::DimensionMismatch {
                        context: "measurement frame length",
                        expected: nodes.len(),
                        found: m.len(),
                    });
                }
                Ok(nodes.iter().zip(m).map(|(&v, mv)| u[v] - mv).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::new(quadrature, predicted.grid(), residual)
    }

    pub fn zero(quadrature: BoundaryQuadrature, grid: TimeGrid) -> Self {
        let m = quadrature.nodes().len();
        Self {
            quadrature,
            grid,
            residual: vec![vec![0.0; m]; grid.n_frames()],
        }
    }

    pub fn quadrature(&self) -> &BoundaryQuadrature {
        &self.quadrature
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn residual(&self) -> &[Vec<f64>] {
        &self.residual
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            quadrature: self.quadrature.clone(),
            grid: self.grid,
            residual: self
                .residual
                .iter()
                .map(|r| r.iter().map(|v| alpha * v).collect())
                .collect(),
        }
    }

    /// Global nodal load `B r^n` at frame `n`.
    pub fn load(&self, n_vertices: usize, n: usize) -> Result<Vec<f64>> {
        let local = self.quadrature.apply(&self.residual[n])?;
        let mut g = vec![0.0; n_vertices];
        for (&v, l) in self.quadrature.nodes().iter().zip(local) {
            g[v] += l;
        }
        Ok(g)
    }

    /// `1/2` times the time trapezoid of `r^T B r`.
    pub fn cost(&self) -> Result<f64> {
        let w = self.grid.trapezoid_weights();
        let mut j = 0.0;
        for (r, wn) in self.residual.iter().zip(w) {
            j += wn * self.quadrature.norm_squared(r)?;
        }
        Ok(0.5 * j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjointOptions {
    /// Lumped mass and lumped reaction weights (default) or consistent mass.
    pub lumped: bool,
    /// Multiplies the boundary source; set to the background conductivity to
    /// include it in the flux condition.
    pub source_scale: f64,
    pub tolerance: f64,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            lumped: true,
            source_scale: 1.0,
            tolerance: 1e-12,
        }
    }
}

/// CN solve of `-W_t + K W + D(t) W = g(t)`, `W(T) = 0`, in reversed time.
///
/// `reaction[n]` holds nodal coefficients `c_i` so that `D = diag(m_i c_i)` with
/// the lumped mass `m`; `sources[n]` are global loads. Both are indexed by
/// forward frame.
pub fn solve_adjoint_linear(
    mass: &SparseMatrix,
    stiffness: &SparseMatrix,
    reaction: Option<&[Vec<f64>]>,
    sources: &[Vec<f64>],
    grid: &TimeGrid,
    solve: &SolveOptions,
) -> Result<TimeSeriesField> {
    grid.validate()?;
    let n = mass.n_rows();
    let steps = grid.steps;
    if sources.len() != grid.n_frames() {
        return Err(Error::DimensionMismatch {
            context: "adjoint sources",
            expected: grid.n_frames(),
            found: sources.len(),
        });
    }
    if let Some(r) = reaction {
        if r.len() != grid.n_frames() {
            return Err(Error::DimensionMismatch {
                context: "adjoint reaction coefficients",
                expected: grid.n_frames(),
                found: r.len(),
            });
        }
    }
    let tau = grid.tau();
    let half = 0.5 * tau;
    let lumped = mass.row_sums();
    let left_base = mass.linear_combination(1.0, stiffness, half)?;
    let right_base = mass.linear_combination(1.0, stiffness, -half)?;
    let diag_at = |n_fwd: usize| -> Vec<f64> {
        match reaction {
            Some(r) => r[n_fwd].iter().zip(&lumped).map(|(c, m)| c * m).collect(),
            None => vec![0.0; n],
        }
    };

    // z^m = W^{N-m}
    let mut z = vec![0.0; n];
    let mut out = vec![vec![0.0; n]; grid.n_frames()];
    let mut d_cur = diag_at(steps);
    for m in 0..steps {
        let (cur, next) = (steps - m, steps - m - 1);
        let d_next = diag_at(next);
        let left = left_base.with_added_diagonal(&d_next.iter().map(|d| half * d).collect::<Vec<_>>())?;
        let mut rhs = spmv(&right_base, &z)?;
        for i in 0..n {
            rhs[i] += -half * d_cur[i] * z[i] + half * (sources[cur][i] + sources[next][i]);
        }
        let sol = cg_solve_from(&left, &rhs, z.clone(), solve).map_err(|e| Error::at_step(m + 1, e))?;
        z = sol.x;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: m + 1 });
        }
        out[next] = z.clone();
        d_cur = d_next;
    }
    TimeSeriesField::new(*grid, out)
}

/// Adjoint of the background problem linearized along `u`, driven by the
/// boundary mismatch.
pub fn solve_adjoint(
    mesh: &Mesh,
    k0: &ConductivityField,
    ionic: &IonicParams,
    u: &TimeSeriesField,
    source: &MismatchSource,
    opts: &AdjointOptions,
) -> Result<TimeSeriesField> {
    let grid = u.grid();
    if source.grid() != grid {
        return Err(Error::Invalid("mismatch source and background trajectory use different time grids".into()));
    }
    if u.n_nodes() != mesh.n_vertices() {
        return Err(Error::DimensionMismatch {
            context: "background trajectory",
            expected: mesh.n_vertices(),
            found: u.n_nodes(),
        });
    }
    ionic.validate()?;
    let reaction: Vec<Vec<f64>> = u
        .frames()
        .iter()
        .map(|f| f.iter().map(|&x| ionic.f_prime(x)).collect())
        .collect();
    let max_fp = reaction.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_fp > 0.0 && grid.tau() >= 2.0 / max_fp {
        return Err(Error::Config(format!(
            "time step {} violates the adjoint stability bound 2/max|f'| = {}",
            grid.tau(),
            2.0 / max_fp
        )));
    }
    let mass = assemble_mass(mesh, opts.lumped)?;
    let stiffness = assemble_stiffness(mesh, k0)?;
    let sources = (0..grid.n_frames())
        .map(|n| {
            let mut g = source.load(mesh.n_vertices(), n)?;
            g.iter_mut().for_each(|v| *v *= opts.source_scale);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    solve_adjoint_linear(
        &mass,
        &stiffness,
        Some(&reaction),
        &sources,
        &grid,
        &SolveOptions::default().with_tolerance(opts.tolerance),
    )
}
