//! Finite-element monodomain solvers and topological-gradient detection of a
//! small ischemic inclusion from boundary measurements.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod error;
pub mod fem;
pub mod forward;
pub mod inclusion;
pub mod ionic;
pub mod mesh;
pub mod output;
pub mod reconstruction;
pub mod scenario;
pub mod sparse;

pub use adjoint::{solve_adjoint, AdjointOptions, BoundaryQuadrature, MismatchSource};
pub use error::{Error, Result};
pub use fem::{ConductivityEigenvalues, ConductivityField, ConductivitySpec};
pub use forward::{boundary_trace, solve_background, solve_perturbed, ForwardOptions, TimeGrid, TimeSeriesField};
pub use inclusion::{classify_elements, polarization_sphere, ElementSet, InclusionSpec, PolarizationTensor};
pub use ionic::IonicParams;
pub use mesh::{BoundarySubset, FaceTag, Mesh, Vec3};
pub use output::FileHeader;
pub use reconstruction::{
    asymptotics_study, reconstruct, topological_gradient, RateTable, ReconstructionReport, VERSION,
};
pub use scenario::{load_scenario, synthesize_measurements, MeasurementSet, Scenario};
pub use sparse::{cg_solve, spmv, SolveOptions, SparseMatrix};
