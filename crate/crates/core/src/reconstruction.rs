//! One-shot reconstruction: cost functional, topological gradient from the
//! background and adjoint states, argmin search, and the small-inclusion
//! asymptotics study.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, AdjointOptions, BoundaryQuadrature, MismatchSource};
use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness, ConductivityField, ConductivitySpec, GradientRecovery, Tensor};
use crate::forward::{solve_background, solve_perturbed, ForwardOptions, TimeGrid, TimeSeriesField};
use crate::inclusion::{classify_elements, polarization_for, InclusionSpec, InnerConductivity, PolarizationTensor};
use crate::ionic::IonicParams;
use crate::mesh::{BoundarySubset, Mesh, Vec3};
use crate::sparse::dot;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `J = 1/2 int_0^T |u - u_meas|^2` on the measured set.
pub fn cost_j(source: &MismatchSource) -> Result<f64> {
    source.cost()
}

/// Per-vertex `M (K0 - K1)` entering the gradient term.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientWeights {
    tensors: Vec<Tensor>,
}

impl GradientWeights {
    /// Scalar background: `(k0 - k1) M`.
    pub fn scalar(n_vertices: usize, m: &PolarizationTensor, k0: f64, k1: f64) -> Self {
        Self {
            tensors: vec![m.m * (k0 - k1); n_vertices],
        }
    }

    /// Anisotropic background with `K1 = s K0`: `(1 - s) M K0(x)`, `K0` averaged at vertices.
    pub fn scaled(mesh: &Mesh, k0: &ConductivityField, m: &PolarizationTensor, s: f64) -> Self {
        Self {
            tensors: k0
                .vertex_average(mesh)
                .iter()
                .map(|k| m.m * k * (1.0 - s))
                .collect(),
        }
    }

    pub fn for_background(
        mesh: &Mesh,
        spec: &ConductivitySpec,
        k0: &ConductivityField,
        m: &PolarizationTensor,
        k1: f64,
    ) -> Self {
        match spec {
            ConductivitySpec::Scalar { k0: k } => Self::scalar(mesh.n_vertices(), m, *k, k1),
            ConductivitySpec::Anisotropic(_) => Self::scaled(mesh, k0, m, k1 / spec.reference()),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Time trapezoid of `(A grad u) . grad W + f(u) W` at every vertex.
pub fn topological_gradient(
    mesh: &Mesh,
    u: &TimeSeriesField,
    w: &TimeSeriesField,
    weights: &GradientWeights,
    ionic: &IonicParams,
) -> Result<Vec<f64>> {
    if u.grid() != w.grid() {
        return Err(Error::Invalid("background and adjoint use different time grids".into()));
    }
    let n = mesh.n_vertices();
    if u.n_nodes() != n || w.n_nodes() != n || weights.tensors.len() != n {
        return Err(Error::DimensionMismatch {
            context: "topological gradient inputs",
            expected: n,
            found: u.n_nodes().min(w.n_nodes()).min(weights.tensors.len()),
        });
    }
    let recovery = GradientRecovery::new(mesh)?;
    let tw = u.grid().trapezoid_weights();
    let per_frame: Vec<Vec<f64>> = (0..tw.len())
        .into_par_iter()
        .map(|k| {
            let (uk, wk) = (u.frame(k), w.frame(k));
            if wk.iter().all(|&x| x == 0.0) {
                return vec![0.0; n];
            }
            let gu = recovery.recover(mesh, uk);
            let gw = recovery.recover(mesh, wk);
            (0..n)
                .map(|v| (weights.tensors[v] * gu[v]).dot(&gw[v]) + ionic.f(uk[v]) * wk[v])
                .collect()
        })
        .collect();
    let mut g = vec![0.0; n];
    for (frame, wt) in per_frame.iter().zip(&tw) {
        for (gv, fv) in g.iter_mut().zip(frame) {
            *gv += wt * fv;
        }
    }
    Ok(g)
}

/// Index of the smallest admissible value; ties go to the lowest index.
pub fn argmin(values: &[f64], admissible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if admissible(i) && best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexLocation {
    pub vertex: usize,
    pub coordinates: [f64; 3],
    pub value: f64,
}

impl VertexLocation {
    fn new(mesh: &Mesh, vertex: usize, value: f64) -> Self {
        let p = mesh.vertices()[vertex];
        Self {
            vertex,
            coordinates: [p.x, p.y, p.z],
            value,
        }
    }

    pub fn point(&self) -> Vec3 {
        Vec3::from(self.coordinates)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub mesh_hash: String,
    pub scenario_hash: Option<String>,
    pub seed: Option<u64>,
    pub flags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationInfo {
    pub value: f64,
    pub surrogate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "min_G")]
    pub min_g: f64,
    pub argmin_global: VertexLocation,
    pub argmin_separated: Option<VertexLocation>,
    pub separation: f64,
    pub no_inclusion_evidence: bool,
    pub measurement_mode: String,
    pub measurement_nodes: usize,
    pub polarization: PolarizationInfo,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
    pub config: serde_json::Value,
}

/// Everything Algorithm 1 needs besides the mesh.
#[derive(Debug, Clone)]
pub struct ReconstructionInput {
    pub conductivity: ConductivitySpec,
    pub ionic: IonicParams,
    pub grid: TimeGrid,
    pub u0: Vec<f64>,
    /// Conductivity assumed inside the unknown inclusion.
    pub k1: f64,
    pub quadrature: BoundaryQuadrature,
    /// Measured values on the quadrature nodes, one row per frame.
    pub measured: Vec<Vec<f64>>,
    pub forward: ForwardOptions,
    pub adjoint: AdjointOptions,
    /// Minimum boundary distance for the separated argmin.
    pub separation: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub report: ReconstructionReport,
    pub g: Vec<f64>,
    pub u: TimeSeriesField,
    pub w: TimeSeriesField,
}

/// Background solve, adjoint solve, topological gradient, argmin.
pub fn reconstruct(mesh: &Mesh, input: &ReconstructionInput) -> Result<ReconstructionResult> {
    if input.quadrature.nodes().is_empty() {
        return Err(Error::Invalid("measurement set is empty".into()));
    }
    input.conductivity.validate()?;
    let k0 = input.conductivity.field(mesh)?;
    let u = solve_background(mesh, &k0, &input.ionic, &input.u0, &input.grid, &input.forward)?;
    let source = MismatchSource::from_prediction(input.quadrature.clone(), &u, &input.measured)?;
    let j = cost_j(&source)?;
    let w = solve_adjoint(mesh, &k0, &input.ionic, &u, &source, &input.adjoint)?;
    let m = polarization_for(&input.conductivity, input.k1)?;
    let weights = GradientWeights::for_background(mesh, &input.conductivity, &k0, &m, input.k1);
    let g = topological_gradient(mesh, &u, &w, &weights, &input.ionic)?;

    let global = argmin(&g, |_| true).expect("mesh has vertices");
    let dist = mesh.boundary_distance();
    let separated = argmin(&g, |v| dist[v] >= input.separation);
    let no_evidence = g.iter().all(|&x| x == 0.0);
    let mut warnings = Vec::new();
    if no_evidence {
        warnings.push("no inclusion evidence: topological gradient vanishes identically".to_string());
    }
    if m.surrogate {
        warnings.push(
            "polarization tensor is an isotropic surrogate evaluated with the fiber conductivity".to_string(),
        );
    }
    if separated.is_none() {
        warnings.push(format!("no vertex lies at distance >= {} from the boundary", input.separation));
    }
    let report = ReconstructionReport {
        j,
        min_g: g[global],
        argmin_global: VertexLocation::new(mesh, global, g[global]),
        argmin_separated: separated.map(|v| VertexLocation::new(mesh, v, g[v])),
        separation: input.separation,
        no_inclusion_evidence: no_evidence,
        measurement_mode: if input.quadrature.is_points() { "points" } else { "full_gamma" }.to_string(),
        measurement_nodes: input.quadrature.nodes().len(),
        polarization: PolarizationInfo {
            value: m.m[(0, 0)],
            surrogate: m.surrogate,
        },
        warnings,
        provenance: Provenance {
            version: VERSION.to_string(),
            mesh_hash: mesh.content_hash(),
            ..Provenance::default()
        },
        config: serde_json::Value::Null,
    };
    Ok(ReconstructionResult { report, g, u, w })
}

/// Warning text when an inclusion is outside the small, well-separated regime.
pub fn asymptotic_regime_warning(mesh: &Mesh, inc: &InclusionSpec, max_fraction: f64) -> Option<String> {
    let diameter = mesh.diameter();
    let large = 2.0 * inc.radius > max_fraction * diameter;
    let separated = inc.is_well_separated(mesh);
    (large || !separated).then(|| {
        format!(
            "asymptotic assumptions violated: inclusion diameter {:.3} vs domain diameter {:.3}{}",
            2.0 * inc.radius,
            diameter,
            if separated { "" } else { ", inclusion not well separated from the boundary" }
        )
    })
}

/// Setup shared by all rows of an asymptotics study.
#[derive(Debug, Clone)]
pub struct AsymptoticsInput {
    pub conductivity: ConductivitySpec,
    pub ionic: IonicParams,
    pub grid: TimeGrid,
    pub u0: Vec<f64>,
    pub center: Vec3,
    pub k1: f64,
    pub gamma: BoundarySubset,
    pub forward: ForwardOptions,
    pub adjoint: AdjointOptions,
    /// Rows whose inclusion holds fewer elements are flagged unresolved.
    pub min_elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub eps: f64,
    pub elements: usize,
    pub volume: f64,
    pub linf_l2: f64,
    pub l2_h1: f64,
    pub l2_l2: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "min_G")]
    pub min_g: f64,
    /// `int_0^T int_Gamma k0 dW/dn (u_eps - u)` for the probe adjoint.
    pub boundary_functional: f64,
    /// `|omega|_h G(z)` for the same adjoint.
    pub prediction: f64,
    pub deviation: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    pub slope_linf_l2: f64,
    pub slope_l2_h1: f64,
    pub slope_l2_l2: f64,
    pub deviation_monotone: bool,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Perturbed solves for a decreasing radius sequence around a fixed center. The
/// probe adjoint is driven by a unit residual on `Gamma`.
pub fn asymptotics_study(mesh: &Mesh, input: &AsymptoticsInput, eps: &[f64]) -> Result<RateTable> {
    if eps.len() < 2 || eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("eps list must hold at least two strictly decreasing radii".into()));
    }
    let spec = &input.conductivity;
    let k0 = spec.field(mesh)?;
    let u = solve_background(mesh, &k0, &input.ionic, &input.u0, &input.grid, &input.forward)?;
    let quadrature = BoundaryQuadrature::surface(mesh, &input.gamma)?;
    let unit = MismatchSource::new(
        quadrature.clone(),
        input.grid,
        vec![vec![1.0; input.gamma.nodes().len()]; input.grid.n_frames()],
    )?;
    let w_probe = solve_adjoint(mesh, &k0, &input.ionic, &u, &unit, &input.adjoint)?;
    let m = polarization_for(spec, input.k1)?;
    let weights = GradientWeights::for_background(mesh, spec, &k0, &m, input.k1);
    let g_probe = topological_gradient(mesh, &u, &w_probe, &weights, &input.ionic)?;
    let g_center = mesh
        .interpolate(&g_probe, &input.center)
        .ok_or_else(|| Error::Config("inclusion center lies outside the mesh".into()))?;
    let probe_loads: Vec<Vec<f64>> = (0..input.grid.n_frames())
        .map(|n| {
            unit.load(mesh.n_vertices(), n)
                .map(|g| g.into_iter().map(|x| x * input.adjoint.source_scale).collect())
        })
        .collect::<Result<_>>()?;

    let mass = assemble_mass(mesh, false)?;
    let laplace = assemble_stiffness(mesh, &ConductivityField::scalar(mesh, 1.0)?)?;
    let tw = input.grid.trapezoid_weights();

    let rows = eps
        .par_iter()
        .map(|&e| -> Result<RateRow> {
            let inc = InclusionSpec::new(input.center, e, input.k1);
            let set = classify_elements(mesh, &inc);
            let inner = InnerConductivity::for_background(spec, input.k1);
            let ue = solve_perturbed(mesh, &k0, &input.ionic, &input.u0, &input.grid, &set, inner, &input.forward)?;
            let diff = ue.difference(&u)?;
            let (mut linf, mut l2h1, mut l2l2, mut bf) = (0.0f64, 0.0, 0.0, 0.0);
            for (n, wn) in diff.frames().iter().enumerate() {
                let l2 = mass.quadratic_form(wn)?;
                let h1 = laplace.quadratic_form(wn)?;
                linf = linf.max(l2.sqrt());
                l2l2 += tw[n] * l2;
                l2h1 += tw[n] * (l2 + h1);
                bf += tw[n] * dot(&probe_loads[n], wn);
            }
            // reconstruction from the perturbed data, evaluated on the same mesh
            let measured: Vec<Vec<f64>> = ue
                .frames()
                .iter()
                .map(|f| quadrature.nodes().iter().map(|&v| f[v]).collect())
                .collect();
            let data = MismatchSource::from_prediction(quadrature.clone(), &u, &measured)?;
            let j = data.cost()?;
            let w = solve_adjoint(mesh, &k0, &input.ionic, &u, &data, &input.adjoint)?;
            let g = topological_gradient(mesh, &u, &w, &weights, &input.ionic)?;
            let min_g = g.iter().cloned().fold(f64::INFINITY, f64::min);
            let prediction = set.volume() * g_center;
            let deviation = if prediction != 0.0 { (bf / prediction - 1.0).abs() } else { f64::INFINITY };
            let warning = if set.len() < input.min_elements {
                Some(format!("inclusion of radius {e} holds only {} elements", set.len()))
            } else {
                set.warning().map(str::to_string)
            };
            Ok(RateRow {
                eps: e,
                elements: set.len(),
                volume: set.volume(),
                linf_l2: linf,
                l2_h1: l2h1.sqrt(),
                l2_l2: l2l2.sqrt(),
                j,
                min_g,
                boundary_functional: bf,
                prediction,
                deviation,
                warning,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let vols: Vec<f64> = rows.iter().map(|r| r.volume).collect();
    let slope = |f: fn(&RateRow) -> f64| log_log_slope(&vols, &rows.iter().map(f).collect::<Vec<_>>());
    Ok(RateTable {
        slope_linf_l2: slope(|r| r.linf_l2),
        slope_l2_h1: slope(|r| r.l2_h1),
        slope_l2_l2: slope(|r| r.l2_l2),
        deviation_monotone: rows.windows(2).all(|w| w[1].deviation < w[0].deviation),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inclusion::polarization_sphere;
    use crate::mesh::{generate_box, BoxTags, FaceTag};

    fn setup() -> (Mesh, BoundarySubset, TimeGrid) {
        let tags = BoxTags { z_max: FaceTag::Endocardium, ..BoxTags::default() };
        let mesh = generate_box([3, 3, 3], [1.5; 3], tags).unwrap();
        let gamma = BoundarySubset::from_tags(&mesh, &[FaceTag::Endocardium]).unwrap();
        (mesh, gamma, TimeGrid::new(2.0, 8).unwrap())
    }

    fn input(mesh: &Mesh, gamma: &BoundarySubset, grid: TimeGrid, measured: Vec<Vec<f64>>) -> ReconstructionInput {
        ReconstructionInput {
            conductivity: ConductivitySpec::Scalar { k0: 1.0 },
            ionic: IonicParams::default(),
            grid,
            u0: mesh.vertices().iter().map(|p| if p.x < 0.6 { 1.0 } else { 0.0 }).collect(),
            k1: 0.1,
            quadrature: BoundaryQuadrature::surface(mesh, gamma).unwrap(),
            measured,
            forward: ForwardOptions::default(),
            adjoint: AdjointOptions::default(),
            separation: 0.3,
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let (mesh, _, grid) = setup();
        let u = TimeSeriesField::constant(grid, mesh.n_vertices(), 0.4);
        let w = TimeSeriesField::constant(grid, mesh.n_vertices(), 0.0);
        let m = polarization_sphere(1.0, 0.1).unwrap();
        let wts = GradientWeights::scalar(mesh.n_vertices(), &m, 1.0, 0.1);
        let g = topological_gradient(&mesh, &u, &w, &wts, &IonicParams::default()).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equilibrium_background_gives_zero_gradient() {
        let (mesh, _, grid) = setup();
        let u = TimeSeriesField::constant(grid, mesh.n_vertices(), 1.0);
        let frames = (0..grid.n_frames())
            .map(|n| mesh.vertices().iter().map(|p| p.x * n as f64).collect())
            .collect();
        let w = TimeSeriesField::new(grid, frames).unwrap();
        let m = polarization_sphere(1.0, 0.1).unwrap();
        let wts = GradientWeights::scalar(mesh.n_vertices(), &m, 1.0, 0.1);
        let g = topological_gradient(&mesh, &u, &w, &wts, &IonicParams::default()).unwrap();
        assert!(g.iter().all(|&x| x.abs() < 1e-14));
    }

    #[test]
    fn gradient_of_linear_fields() {
        // grad u = (1,0,0), grad W = (2,0,0), u = x in [0,1.5]: integrand 1.5·1.8·2 + f(x) W
        let (mesh, _, grid) = setup();
        let u = TimeSeriesField::new(grid, vec![mesh.vertices().iter().map(|p| p.x / 1.5).collect(); 9]).unwrap();
        let w = TimeSeriesField::new(grid, vec![mesh.vertices().iter().map(|p| 2.0 * p.x).collect(); 9]).unwrap();
        let m = polarization_sphere(2.0, 1.0).unwrap();
        let wts = GradientWeights::scalar(mesh.n_vertices(), &m, 2.0, 1.0);
        let ionic = IonicParams::default();
        let g = topological_gradient(&mesh, &u, &w, &wts, &ionic).unwrap();
        for (v, p) in mesh.vertices().iter().enumerate() {
            let x = p.x / 1.5;
            let expected = 2.0 * (1.2 * 1.0 * (1.0 / 1.5) * 2.0 + ionic.f(x) * 2.0 * p.x);
            assert!((g[v] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn argmin_ties_pick_lowest() {
        assert_eq!(argmin(&[3.0, -1.0, -1.0, 2.0], |_| true), Some(1));
        assert_eq!(argmin(&[3.0, -1.0, -1.0, 2.0], |i| i != 1), Some(2));
        assert_eq!(argmin(&[1.0], |_| false), None);
    }

    #[test]
    fn healthy_same_mesh_data_gives_zero() {
        let (mesh, gamma, grid) = setup();
        let probe = input(&mesh, &gamma, grid, vec![]);
        let k0 = probe.conductivity.field(&mesh).unwrap();
        let u = solve_background(&mesh, &k0, &probe.ionic, &probe.u0, &grid, &probe.forward).unwrap();
        let measured = u.frames().iter().map(|f| gamma.nodes().iter().map(|&v| f[v]).collect()).collect();
        let out = reconstruct(&mesh, &input(&mesh, &gamma, grid, measured)).unwrap();
        assert_eq!(out.report.j, 0.0);
        assert!(out.g.iter().all(|&x| x == 0.0));
        assert!(out.report.no_inclusion_evidence);
        assert_eq!(out.report.argmin_global.vertex, 0);
    }

    #[test]
    fn scaling_residual_scales_gradient() {
        let (mesh, gamma, grid) = setup();
        let base = input(&mesh, &gamma, grid, vec![]);
        let k0 = base.conductivity.field(&mesh).unwrap();
        let u = solve_background(&mesh, &k0, &base.ionic, &base.u0, &grid, &base.forward).unwrap();
        let shifted = |c: f64| -> Vec<Vec<f64>> {
            u.frames()
                .iter()
                .enumerate()
                .map(|(n, f)| gamma.nodes().iter().map(|&v| f[v] - c * (0.1 + 0.01 * n as f64) * mesh.vertices()[v].y).collect())
                .collect()
        };
        let a = reconstruct(&mesh, &input(&mesh, &gamma, grid, shifted(1.0))).unwrap();
        let b = reconstruct(&mesh, &input(&mesh, &gamma, grid, shifted(2.5))).unwrap();
        let scale = a.g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in a.g.iter().zip(&b.g) {
            assert!((2.5 * x - y).abs() <= 1e-9 * scale);
        }
        assert_eq!(a.report.argmin_global.vertex, b.report.argmin_global.vertex);
        assert!((b.report.j / a.report.j - 6.25).abs() < 1e-9);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.75)).collect();
        assert!((log_log_slope(&x, &y) - 0.75).abs() < 1e-12);
    }
}
