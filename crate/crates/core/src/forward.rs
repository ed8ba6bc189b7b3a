//! Semi-implicit time stepping of the background and perturbed monodomain problems:
//! implicit diffusion, explicit reaction, one constant SPD system per problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_mass_masked, assemble_stiffness, ConductivityField};
use crate::inclusion::{perturbed_conductivity, ElementSet, InnerConductivity};
use crate::ionic::IonicParams;
use crate::mesh::{BoundarySubset, Mesh};
use crate::sparse::{cg_solve_from, spmv, SolveOptions, SparseMatrix};

/// Uniform partition of `[0, t_final]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t_final: f64,
    pub steps: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            t_final: 30.0,
            steps: 150,
        }
    }
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        let g = Self { t_final, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config("final time must be positive".into()));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t_final * n as f64 / self.steps as f64
    }

    pub fn n_frames(&self) -> usize {
        self.steps + 1
    }

    /// Composite trapezoid weights over the frames.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let tau = self.tau();
        (0..=self.steps)
            .map(|n| if n == 0 || n == self.steps { 0.5 * tau } else { tau })
            .collect()
    }
}

/// Nodal values at every frame of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesField {
    grid: TimeGrid,
    frames: Vec<Vec<f64>>,
}

impl TimeSeriesField {
    pub fn new(grid: TimeGrid, frames: Vec<Vec<f64>>) -> Result<Self> {
        grid.validate()?;
        if frames.len() != grid.n_frames() {
            return Err(Error::DimensionMismatch {
                context: "time series frames",
                expected: grid.n_frames(),
                found: frames.len(),
            });
        }
        let n = frames[0].len();
        for (k, f) in frames.iter().enumerate() {
            if f.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "time series frame length",
                    expected: n,
                    found: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: k });
            }
        }
        Ok(Self { grid, frames })
    }

    pub fn constant(grid: TimeGrid, n_nodes: usize, value: f64) -> Self {
        Self {
            grid,
            frames: vec![vec![value; n_nodes]; grid.n_frames()],
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        &self.frames[n]
    }

    pub fn last(&self) -> &[f64] {
        self.frames.last().expect("at least one frame")
    }

    pub fn n_nodes(&self) -> usize {
        self.frames[0].len()
    }

    pub fn into_frames(self) -> Vec<Vec<f64>> {
        self.frames
    }

    /// Frames in reverse order (frame `n` becomes frame `N - n`).
    pub fn reversed(&self) -> Self {
        Self {
            grid: self.grid,
            frames: self.frames.iter().rev().cloned().collect(),
        }
    }

    /// `self - other`, frame by frame.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid || self.n_nodes() != other.n_nodes() {
            return Err(Error::Invalid("time series live on different grids or meshes".into()));
        }
        Ok(Self {
            grid: self.grid,
            frames: self
                .frames
                .iter()
                .zip(&other.frames)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        })
    }

    /// Smallest and largest value over all nodes and frames.
    pub fn range(&self) -> (f64, f64) {
        self.frames
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_zero(&self) -> bool {
        self.frames.iter().flatten().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardOptions {
    /// Lumped mass for the time derivative and the reaction (default) or consistent mass.
    pub lumped: bool,
    pub tolerance: f64,
    /// Keep every `stride`-th frame; must divide the step count.
    pub stride: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            lumped: true,
            tolerance: 1e-12,
            stride: 1,
        }
    }
}

/// One problem's constant operators: `(M + tau K) u' = M u - tau M_mask f(u) + tau s`.
#[derive(Debug, Clone)]
pub struct SemiImplicitStepper {
    mass: SparseMatrix,
    system: SparseMatrix,
    reaction: Option<(IonicParams, SparseMatrix)>,
    tau: f64,
    solve: SolveOptions,
}

impl SemiImplicitStepper {
    /// `active` masks the elements that carry the ionic current; `ionic = None`
    /// drops the reaction term.
    pub fn new(
        mesh: &Mesh,
        k: &ConductivityField,
        ionic: Option<&IonicParams>,
        active: Option<&[bool]>,
        tau: f64,
        opts: &ForwardOptions,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config("time step must be positive".into()));
        }
        let mass = assemble_mass(mesh, opts.lumped)?;
        let stiffness = assemble_stiffness(mesh, k)?;
        let system = mass.linear_combination(1.0, &stiffness, tau)?;
        let reaction = match ionic {
            Some(p) => {
                p.validate()?;
                let m = match active {
                    None => mass.clone(),
                    Some(a) => assemble_mass_masked(mesh, opts.lumped, Some(a))?,
                };
                Some((*p, m))
            }
            None => None,
        };
        Ok(Self {
            mass,
            system,
            reaction,
            tau,
            solve: SolveOptions::default().with_tolerance(opts.tolerance),
        })
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    pub fn system(&self) -> &SparseMatrix {
        &self.system
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Advance one step; `load` is an optional assembled source `int s phi_i` at the new time.
    pub fn step(&self, u: &[f64], load: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut rhs = spmv(&self.mass, u)?;
        if let Some((p, m)) = &self.reaction {
            let fu: Vec<f64> = u.iter().map(|&x| p.f(x)).collect();
            let r = spmv(m, &fu)?;
            rhs.iter_mut().zip(&r).for_each(|(b, ri)| *b -= self.tau * ri);
        }
        if let Some(s) = load {
            if s.len() != rhs.len() {
                return Err(Error::DimensionMismatch {
                    context: "source load",
                    expected: rhs.len(),
                    found: s.len(),
                });
            }
            rhs.iter_mut().zip(s).for_each(|(b, si)| *b += self.tau * si);
        }
        Ok(cg_solve_from(&self.system, &rhs, u.to_vec(), &self.solve)?.x)
    }

    /// March `u0` over the grid, keeping every `stride`-th frame.
    pub fn run(&self, u0: &[f64], steps: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
        if u0.len() != self.mass.n_rows() {
            return Err(Error::DimensionMismatch {
                context: "initial condition",
                expected: self.mass.n_rows(),
                found: u0.len(),
            });
        }
        let mut frames = Vec::with_capacity(steps / stride + 1);
        frames.push(u0.to_vec());
        let mut u = u0.to_vec();
        for n in 0..steps {
            u = self.step(&u, None).map_err(|e| Error::at_step(n + 1, e))?;
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n + 1 });
            }
            if (n + 1) % stride == 0 {
                frames.push(u.clone());
            }
        }
        Ok(frames)
    }
}

fn check_initial(ionic: &IonicParams, u0: &[f64]) -> Result<()> {
    if let Some(i) = u0.iter().position(|&v| !(v >= ionic.u1 && v <= ionic.u3)) {
        return Err(Error::Config(format!(
            "initial potential {} at node {i} lies outside [u1, u3]",
            u0[i]
        )));
    }
    Ok(())
}

fn stored_grid(grid: &TimeGrid, stride: usize) -> Result<TimeGrid> {
    if stride == 0 || !grid.steps.is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "storage stride {stride} must divide the step count {}",
            grid.steps
        )));
    }
    TimeGrid::new(grid.t_final, grid.steps / stride)
}

fn solve(
    mesh: &Mesh,
    k: &ConductivityField,
    ionic: &IonicParams,
    active: Option<&[bool]>,
    u0: &[f64],
    grid: &TimeGrid,
    opts: &ForwardOptions,
) -> Result<TimeSeriesField> {
    grid.validate()?;
    ionic.validate()?;
    check_initial(ionic, u0)?;
    let out_grid = stored_grid(grid, opts.stride)?;
    let stepper = SemiImplicitStepper::new(mesh, k, Some(ionic), active, grid.tau(), opts)?;
    let frames = stepper.run(u0, grid.steps, opts.stride)?;
    TimeSeriesField::new(out_grid, frames)
}

/// Background problem with conductivity `k0` and the ionic current everywhere.
pub fn solve_background(
    mesh: &Mesh,
    k0: &ConductivityField,
    ionic: &IonicParams,
    u0: &[f64],
    grid: &TimeGrid,
    opts: &ForwardOptions,
) -> Result<TimeSeriesField> {
    solve(mesh, k0, ionic, None, u0, grid, opts)
}

/// Perturbed problem: conductivity changed and ionic current switched off on `inclusion`.
#[allow(clippy::too_many_arguments)]
pub fn solve_perturbed(
    mesh: &Mesh,
    k0: &ConductivityField,
    ionic: &IonicParams,
    u0: &[f64],
    grid: &TimeGrid,
    inclusion: &ElementSet,
    inner: InnerConductivity,
    opts: &ForwardOptions,
) -> Result<TimeSeriesField> {
    let k = perturbed_conductivity(k0, inclusion, inner);
    let active = inclusion.active_mask();
    solve(mesh, &k, ionic, Some(&active), u0, grid, opts)
}

/// Nodal values restricted to a node set, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    pub grid: TimeGrid,
    pub nodes: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl BoundaryTrace {
    pub fn of_nodes(field: &TimeSeriesField, nodes: &[usize]) -> Result<Self> {
        if let Some(&v) = nodes.iter().find(|&&v| v >= field.n_nodes()) {
            return Err(Error::Invalid(format!("trace node {v} does not exist")));
        }
        Ok(Self {
            grid: field.grid(),
            nodes: nodes.to_vec(),
            values: field
                .frames()
                .iter()
                .map(|f| nodes.iter().map(|&v| f[v]).collect())
                .collect(),
        })
    }
}

pub fn boundary_trace(field: &TimeSeriesField, gamma: &BoundarySubset) -> Result<BoundaryTrace> {
    BoundaryTrace::of_nodes(field, gamma.nodes())
}

/// Restriction of a global matrix to `nodes x nodes`, in the order of `nodes`.
pub fn restrict(matrix: &SparseMatrix, nodes: &[usize]) -> SparseMatrix {
    let mut local = vec![usize::MAX; matrix.n_rows()];
    for (i, &v) in nodes.iter().enumerate() {
        local[v] = i;
    }
    let mut b = crate::sparse::TripletBuilder::new(nodes.len(), nodes.len());
    for (i, &v) in nodes.iter().enumerate() {
        for (j, a) in matrix.row(v) {
            if local[j] != usize::MAX {
                b.push(i, local[j], a);
            }
        }
    }
    b.build()
}
