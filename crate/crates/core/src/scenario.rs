//! Scenario files, synthetic measurements and the scenario-level pipeline.
//!
//! A scenario is a TOML document with one table per concern. Unknown keys are
//! rejected; every section except `[grid]` and `[mesh]` has defaults.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::{AdjointOptions, BoundaryQuadrature};
use crate::error::{Error, Result};
use crate::fem::ConductivitySpec;
use crate::forward::{solve_background, solve_perturbed, ForwardOptions, TimeGrid};
use crate::inclusion::{classify_elements, InclusionSpec, InnerConductivity};
use crate::ionic::IonicParams;
use crate::mesh::{
    generate_box, generate_ventricle, io::read_mesh, prolongate, refine_uniform_with_parents, BoundarySubset,
    BoxTags, FaceTag, Mesh, Vec3, VentricleGeometry,
};
use crate::reconstruction::{
    asymptotic_regime_warning, reconstruct, AsymptoticsInput, ReconstructionInput, ReconstructionResult, VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MeshSource {
    Box {
        cells: [usize; 3],
        lengths: [f64; 3],
        #[serde(default)]
        tags: BoxTags,
    },
    Ventricle {
        /// Target edge length.
        resolution: f64,
        #[serde(default)]
        geometry: VentricleGeometry,
    },
    /// Native or gmsh v2 ASCII mesh; relative paths resolve against the scenario directory.
    File { path: PathBuf },
}

/// `u0 = value` on nodes within `depth` of the tagged surface and inside the
/// optional z window, `u0 = rest` farther than `ramp` from that region, and a
/// linear transition in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialBand {
    pub tag: FaceTag,
    pub depth: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_max: Option<f64>,
    pub value: f64,
    pub rest: f64,
    pub ramp: f64,
}

impl Default for InitialBand {
    fn default() -> Self {
        Self {
            tag: FaceTag::Endocardium,
            depth: 1.0,
            z_min: None,
            z_max: None,
            value: 1.0,
            rest: 0.0,
            ramp: 0.0,
        }
    }
}

impl InitialBand {
    pub fn evaluate(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        let surface = BoundarySubset::from_tags(mesh, &[self.tag])?;
        if surface.nodes().is_empty() {
            return Err(Error::Config(format!("initial band surface `{}` has no faces", self.tag.as_str())));
        }
        let anchors: Vec<Vec3> = surface.nodes().iter().map(|&v| mesh.vertices()[v]).collect();
        let z_min = self.z_min.unwrap_or(f64::NEG_INFINITY);
        let z_max = self.z_max.unwrap_or(f64::INFINITY);
        let reach = self.depth + self.ramp;
        Ok(mesh
            .vertices()
            .iter()
            .map(|p| {
                let dz = (z_min - p.z).max(p.z - z_max).max(0.0);
                if dz > self.ramp {
                    return self.rest;
                }
                let d2 = anchors
                    .iter()
                    .map(|a| (a - p).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                if d2 > reach * reach {
                    return self.rest;
                }
                let excess = dz.max(d2.sqrt() - self.depth);
                let weight = if excess <= 0.0 { 1.0 } else { 1.0 - excess / self.ramp };
                self.rest + (self.value - self.rest) * weight
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementSpec {
    /// Measured surface.
    pub gamma: FaceTag,
    /// Number of sampled points; all `gamma` nodes when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    /// Noise level `p`: standard deviation `p (u3 - u1)`.
    pub noise: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Synthesize on the uniformly refined mesh.
    pub refine: bool,
    /// Permit synthesis on the reconstruction mesh itself.
    pub allow_inverse_crime: bool,
}

impl Default for MeasurementSpec {
    fn default() -> Self {
        Self {
            gamma: FaceTag::Endocardium,
            points: None,
            noise: 0.0,
            seed: None,
            refine: true,
            allow_inverse_crime: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub lumped: bool,
    pub tolerance: f64,
    /// Multiply the adjoint boundary source by the reference conductivity.
    pub rhs_k0: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            lumped: true,
            tolerance: 1e-12,
            rhs_k0: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionSpec {
    /// Assumed inner conductivity; defaults to the inclusion's, then to a tenth
    /// of the reference conductivity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    /// Boundary clearance `d0` for the separated argmin.
    pub separation: f64,
    /// Inclusions wider than this fraction of the domain diameter are flagged.
    pub large_fraction: f64,
}

impl Default for ReconstructionSpec {
    fn default() -> Self {
        Self {
            k1: None,
            separation: 0.2,
            large_fraction: 0.25,
        }
    }
}

/// Radii of the asymptotics study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySpec {
    pub eps: Vec<f64>,
    pub min_elements: usize,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            eps: vec![0.4, 0.28, 0.2, 0.14],
            min_elements: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub mesh: MeshSource,
    pub grid: TimeGrid,
    #[serde(default)]
    pub ionic: IonicParams,
    #[serde(default)]
    pub conductivity: ConductivitySpec,
    #[serde(default)]
    pub initial: InitialBand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inclusion: Option<InclusionSpec>,
    #[serde(default)]
    pub measurement: MeasurementSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub reconstruction: ReconstructionSpec,
    #[serde(default)]
    pub study: StudySpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            mesh: MeshSource::Ventricle {
                resolution: 0.4,
                geometry: VentricleGeometry::default(),
            },
            grid: TimeGrid::default(),
            ionic: IonicParams::default(),
            conductivity: ConductivitySpec::default(),
            initial: InitialBand {
                z_min: Some(-3.0),
                z_max: Some(-1.0),
                ramp: 1.0,
                ..InitialBand::default()
            },
            inclusion: None,
            measurement: MeasurementSpec::default(),
            solver: SolverSpec::default(),
            reconstruction: ReconstructionSpec::default(),
            study: StudySpec::default(),
            output: OutputSpec::default(),
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().trim().to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Canonical serialization; `from_toml(to_toml(s)) == s`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.ionic.validate()?;
        self.conductivity.validate()?;
        if let Some(inc) = &self.inclusion {
            inc.validate()?;
        }
        match &self.mesh {
            MeshSource::Box { cells, lengths, .. } => {
                if cells.contains(&0) || lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                    return Err(Error::Config("box mesh needs positive cell counts and lengths".into()));
                }
            }
            MeshSource::Ventricle { resolution, geometry } => {
                if !(*resolution > 0.0 && resolution.is_finite()) {
                    return Err(Error::Config("ventricle resolution must be positive".into()));
                }
                geometry.validate()?;
            }
            MeshSource::File { .. } => {}
        }
        let i = &self.initial;
        if !(i.depth >= 0.0 && i.depth.is_finite() && i.ramp >= 0.0 && i.ramp.is_finite()) {
            return Err(Error::Config("initial.depth and initial.ramp must be nonnegative".into()));
        }
        for v in [i.value, i.rest] {
            if v < self.ionic.u1 || v > self.ionic.u3 {
                return Err(Error::Config(format!(
                    "initial value {v} outside [{}, {}]",
                    self.ionic.u1, self.ionic.u3
                )));
            }
        }
        let m = &self.measurement;
        if !(0.0..=1.0).contains(&m.noise) {
            return Err(Error::Config(format!("measurement.noise must lie in [0, 1], got {}", m.noise)));
        }
        if (m.noise > 0.0 || m.points.is_some()) && m.seed.is_none() {
            return Err(Error::Config(
                "measurement.seed is required when noise is added or points are sampled".into(),
            ));
        }
        if m.points == Some(0) {
            return Err(Error::Config("measurement.points must be at least 1".into()));
        }
        if !m.refine && !m.allow_inverse_crime {
            return Err(Error::Config(
                "synthesis on the reconstruction mesh requires measurement.allow_inverse_crime = true".into(),
            ));
        }
        if !(self.solver.tolerance > 0.0) {
            return Err(Error::Config("solver.tolerance must be positive".into()));
        }
        let r = &self.reconstruction;
        if let Some(k1) = r.k1 {
            if !(k1 > 0.0 && k1.is_finite()) {
                return Err(Error::Config("reconstruction.k1 must be positive".into()));
            }
        }
        if !(r.separation >= 0.0) || !(r.large_fraction > 0.0) {
            return Err(Error::Config("reconstruction.separation and large_fraction must be positive".into()));
        }
        if self.study.eps.windows(2).any(|w| w[1] >= w[0]) || self.study.eps.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config("study.eps must be positive and strictly decreasing".into()));
        }
        Ok(())
    }

    /// Builds the mesh and checks that every referenced surface tag is present.
    pub fn build_mesh(&self, base_dir: &Path) -> Result<Mesh> {
        let mesh = match &self.mesh {
            MeshSource::Box { cells, lengths, tags } => generate_box(*cells, *lengths, *tags)?,
            MeshSource::Ventricle { resolution, geometry } => generate_ventricle(*resolution, geometry)?,
            MeshSource::File { path } => read_mesh(&base_dir.join(path))?,
        };
        for (what, tag) in [("measurement.gamma", self.measurement.gamma), ("initial.tag", self.initial.tag)] {
            if mesh.tag_count(tag) == 0 {
                return Err(Error::Config(format!("{what}: mesh has no `{}` faces", tag.as_str())));
            }
        }
        Ok(mesh)
    }

    pub fn gamma(&self, mesh: &Mesh) -> Result<BoundarySubset> {
        BoundarySubset::from_tags(mesh, &[self.measurement.gamma])
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            lumped: self.solver.lumped,
            tolerance: self.solver.tolerance,
            ..ForwardOptions::default()
        }
    }

    pub fn adjoint_options(&self) -> AdjointOptions {
        AdjointOptions {
            lumped: self.solver.lumped,
            tolerance: self.solver.tolerance,
            source_scale: if self.solver.rhs_k0 { self.conductivity.reference() } else { 1.0 },
        }
    }

    /// Inner conductivity assumed by the reconstruction.
    pub fn assumed_k1(&self) -> f64 {
        self.reconstruction
            .k1
            .or(self.inclusion.map(|i| i.k1))
            .unwrap_or(0.1 * self.conductivity.reference())
    }

    pub fn asymptotics_input(&self, mesh: &Mesh) -> Result<AsymptoticsInput> {
        let inc = self
            .inclusion
            .ok_or_else(|| Error::Config("the asymptotics study needs an [inclusion] section".into()))?;
        Ok(AsymptoticsInput {
            conductivity: self.conductivity,
            ionic: self.ionic,
            grid: self.grid,
            u0: self.initial.evaluate(mesh)?,
            center: inc.center(),
            k1: inc.k1,
            gamma: self.gamma(mesh)?,
            forward: self.forward_options(),
            adjoint: self.adjoint_options(),
            min_elements: self.study.min_elements,
        })
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    Scenario::from_toml(&text, path)
}

pub fn write_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    fs::write(path, scenario.to_toml())?;
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// ChaCha20 stream keyed by a 64-bit seed (little-endian in the first eight key
/// bytes, the rest zero) on a numbered stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub const SAMPLING_STREAM: u64 = 0;
    pub const NOISE_STREAM: u64 = 1;

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by Box-Muller; each pair of uniforms yields two values.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * (1.0 - self.uniform()).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * self.uniform();
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Seeded farthest-point order: a random start, then repeatedly the point
/// farthest from those chosen (ties to the lowest index). Prefixes of the
/// result for the same seed are the samples for smaller counts.
pub fn farthest_point_sampling(points: &[Vec3], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > points.len() {
        return Err(Error::Config(format!(
            "cannot sample {count} points from {} candidates",
            points.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = SeededRng::new(seed, SeededRng::SAMPLING_STREAM);
    let first = ((rng.uniform() * points.len() as f64) as usize).min(points.len() - 1);
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < count {
        let mut best = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[best]).norm_squared());
        }
    }
    Ok(chosen)
}

/// Adds i.i.d. `N(0, std^2)` noise, frame by frame and node by node.
pub fn add_noise(values: &mut [Vec<f64>], std: f64, seed: u64) {
    if std == 0.0 {
        return;
    }
    let mut rng = SeededRng::new(seed, SeededRng::NOISE_STREAM);
    for frame in values {
        for v in frame {
            *v += std * rng.gaussian();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    FullGamma,
    Points,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseInfo {
    pub level: f64,
    pub std_dev: f64,
    pub seed: Option<u64>,
}

/// Boundary data on the reconstruction mesh, one row per time frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSet {
    pub version: String,
    pub scenario_hash: String,
    pub mode: MeasurementMode,
    pub gamma: FaceTag,
    /// Owning mesh vertex of every measurement.
    pub nodes: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    pub grid: TimeGrid,
    pub values: Vec<Vec<f64>>,
    pub noise: NoiseInfo,
    pub refined: bool,
}

impl MeasurementSet {
    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if self.nodes.len() != self.positions.len() {
            return Err(Error::Invalid("measurement nodes and positions differ in length".into()));
        }
        if self.values.len() != self.grid.n_frames() {
            return Err(Error::DimensionMismatch {
                context: "measurement frames",
                expected: self.grid.n_frames(),
                found: self.values.len(),
            });
        }
        for (n, row) in self.values.iter().enumerate() {
            if row.len() != self.nodes.len() {
                return Err(Error::DimensionMismatch {
                    context: "measurement frame length",
                    expected: self.nodes.len(),
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n });
            }
        }
        let gamma = BoundarySubset::from_tags(mesh, &[self.gamma])?;
        let tol = 1e-9 * mesh.diameter();
        for (&v, p) in self.nodes.iter().zip(&self.positions) {
            if gamma.nodes().binary_search(&v).is_err() {
                return Err(Error::Invalid(format!("measurement node {v} is not on `{}`", self.gamma.as_str())));
            }
            if (mesh.vertices()[v] - Vec3::from(*p)).norm() > tol {
                return Err(Error::Invalid(format!("measurement position of node {v} is off the mesh")));
            }
        }
        Ok(())
    }

    pub fn quadrature(&self, mesh: &Mesh) -> Result<BoundaryQuadrature> {
        let gamma = BoundarySubset::from_tags(mesh, &[self.gamma])?;
        match self.mode {
            MeasurementMode::FullGamma => BoundaryQuadrature::surface(mesh, &gamma),
            MeasurementMode::Points => BoundaryQuadrature::points(mesh, &gamma, self.nodes.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("measurements serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("measurement file: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Noise-free data of the true problem on every node of the measured surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueTrace {
    pub gamma: FaceTag,
    pub nodes: Vec<usize>,
    pub grid: TimeGrid,
    pub values: Vec<Vec<f64>>,
    pub refined: bool,
}

/// Solves the scenario's true problem (with its inclusion, or healthy) and
/// restricts the solution to the measured nodes of `mesh`.
pub fn simulate_truth(scenario: &Scenario, mesh: &Mesh) -> Result<TrueTrace> {
    scenario.validate()?;
    let spec = &scenario.measurement;
    let gamma = scenario.gamma(mesh)?;
    let u0 = scenario.initial.evaluate(mesh)?;

    // The refined problem keeps the coarse coefficient and initial state, so the
    // data differ from the model only by discretization.
    let coarse_k0 = scenario.conductivity.field(mesh)?;
    let (fine, u0_fine, k0) = if spec.refine {
        let (fine, parents) = refine_uniform_with_parents(mesh)?;
        let u0_fine = prolongate(&u0, &parents);
        (fine, u0_fine, coarse_k0.refined())
    } else {
        (mesh.clone(), u0, coarse_k0)
    };
    let opts = scenario.forward_options();
    let u = match &scenario.inclusion {
        Some(inc) => {
            let set = classify_elements(&fine, inc);
            let inner = InnerConductivity::for_background(&scenario.conductivity, inc.k1);
            solve_perturbed(&fine, &k0, &scenario.ionic, &u0_fine, &scenario.grid, &set, inner, &opts)?
        }
        None => solve_background(&fine, &k0, &scenario.ionic, &u0_fine, &scenario.grid, &opts)?,
    };
    let nodes = gamma.nodes().to_vec();
    let values = u
        .frames()
        .iter()
        .map(|f| nodes.iter().map(|&v| f[v]).collect())
        .collect();
    Ok(TrueTrace {
        gamma: spec.gamma,
        nodes,
        grid: scenario.grid,
        values,
        refined: spec.refine,
    })
}

/// Point sampling and noise on top of a true trace.
pub fn sample_measurements(scenario: &Scenario, mesh: &Mesh, truth: &TrueTrace) -> Result<MeasurementSet> {
    let spec = &scenario.measurement;
    if truth.gamma != spec.gamma || truth.grid != scenario.grid || truth.refined != spec.refine {
        return Err(Error::Invalid("true trace was produced for a different scenario".into()));
    }
    let (mode, columns) = match spec.points {
        None => (MeasurementMode::FullGamma, (0..truth.nodes.len()).collect::<Vec<_>>()),
        Some(n) => {
            let candidates: Vec<Vec3> = truth.nodes.iter().map(|&v| mesh.vertices()[v]).collect();
            let seed = spec.seed.expect("validated");
            (MeasurementMode::Points, farthest_point_sampling(&candidates, n, seed)?)
        }
    };
    let nodes: Vec<usize> = columns.iter().map(|&i| truth.nodes[i]).collect();
    let mut values: Vec<Vec<f64>> = truth
        .values
        .iter()
        .map(|f| columns.iter().map(|&i| f[i]).collect())
        .collect();
    let std_dev = spec.noise * (scenario.ionic.u3 - scenario.ionic.u1);
    if let Some(seed) = spec.seed {
        add_noise(&mut values, std_dev, seed);
    }
    Ok(MeasurementSet {
        version: VERSION.to_string(),
        scenario_hash: scenario.hash(),
        mode,
        gamma: spec.gamma,
        positions: nodes.iter().map(|&v| mesh.vertices()[v].into()).collect(),
        nodes,
        grid: scenario.grid,
        values,
        noise: NoiseInfo {
            level: spec.noise,
            std_dev,
            seed: spec.seed,
        },
        refined: spec.refine,
    })
}

/// [`simulate_truth`] followed by [`sample_measurements`].
pub fn synthesize_measurements(scenario: &Scenario, mesh: &Mesh) -> Result<MeasurementSet> {
    let truth = simulate_truth(scenario, mesh)?;
    sample_measurements(scenario, mesh, &truth)
}

/// Algorithm 1 on the scenario's mesh with the given data; the report carries
/// provenance and a copy of the scenario.
pub fn run_reconstruction(scenario: &Scenario, mesh: &Mesh, data: &MeasurementSet) -> Result<ReconstructionResult> {
    data.validate(mesh)?;
    if data.grid != scenario.grid {
        return Err(Error::Invalid("measurement time grid differs from the scenario grid".into()));
    }
    let input = ReconstructionInput {
        conductivity: scenario.conductivity,
        ionic: scenario.ionic,
        grid: scenario.grid,
        u0: scenario.initial.evaluate(mesh)?,
        k1: scenario.assumed_k1(),
        quadrature: data.quadrature(mesh)?,
        measured: data.values.clone(),
        forward: scenario.forward_options(),
        adjoint: scenario.adjoint_options(),
        separation: scenario.reconstruction.separation,
    };
    let mut result = reconstruct(mesh, &input)?;
    let report = &mut result.report;
    if let Some(inc) = &scenario.inclusion {
        if let Some(w) = asymptotic_regime_warning(mesh, inc, scenario.reconstruction.large_fraction) {
            report.warnings.push(w);
        }
    }
    if !data.refined {
        report.warnings.push("data synthesized on the reconstruction mesh (inverse crime)".into());
    }
    let p = &mut report.provenance;
    p.scenario_hash = Some(scenario.hash());
    p.seed = data.noise.seed;
    p.flags.insert("rhs_k0".into(), scenario.solver.rhs_k0.to_string());
    p.flags.insert("lumped".into(), scenario.solver.lumped.to_string());
    p.flags.insert("refined_data".into(), data.refined.to_string());
    p.flags.insert("noise".into(), data.noise.level.to_string());
    report.config = serde_json::to_value(scenario).expect("scenario serializes");
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SMALL: &str = r#"
[mesh]
kind = "box"
cells = [3, 3, 3]
lengths = [1.0, 1.0, 1.0]
tags = { z_max = "endocardium" }

[grid]
t_final = 1.0
steps = 5

[conductivity]
kind = "scalar"
k0 = 1.0

[initial]
depth = 0.4

[inclusion]
center = [0.5, 0.5, 0.5]
radius = 0.3
k1 = 0.1
"#;

    fn small() -> Scenario {
        Scenario::from_toml(SMALL, Path::new("small.toml")).unwrap()
    }

    #[test]
    fn canonical_round_trip() {
        let s = small();
        let text = s.to_toml();
        let back = Scenario::from_toml(&text, Path::new("x")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.hash(), s.hash());
        assert_eq!(Scenario::default(), Scenario::from_toml(&Scenario::default().to_toml(), Path::new("d")).unwrap());
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = SMALL.replace("steps = 5", "steps = 5\nstepz = 3");
        match Scenario::from_toml(&text, Path::new("bad.toml")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 11);
                assert!(message.contains("stepz"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text = SMALL.replace("steps = 5", "");
        let err = Scenario::from_toml(&text, Path::new("bad.toml")).unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");
    }

    #[test]
    fn invariants_are_enforced() {
        let mut s = small();
        s.measurement.noise = 1.5;
        assert!(s.validate().is_err());
        s.measurement.noise = 0.1;
        assert!(s.validate().is_err(), "noise without seed");
        s.measurement.seed = Some(3);
        assert!(s.validate().is_ok());
        s.measurement.refine = false;
        assert!(s.validate().is_err(), "inverse crime without consent");
        s.measurement.allow_inverse_crime = true;
        assert!(s.validate().is_ok());
        s.measurement.points = Some(4);
        s.measurement.seed = None;
        s.measurement.noise = 0.0;
        assert!(s.validate().is_err(), "sampling without seed");
    }

    #[test]
    fn missing_tag_is_reported() {
        let mut s = small();
        s.measurement.gamma = FaceTag::Epicardium;
        let err = s.build_mesh(Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("epicardium"), "{err}");
    }

    #[test]
    fn band_marks_nodes_near_the_surface() {
        let s = small();
        let mesh = s.build_mesh(Path::new(".")).unwrap();
        let u0 = s.initial.evaluate(&mesh).unwrap();
        for (p, &v) in mesh.vertices().iter().zip(&u0) {
            assert_eq!(v, if p.z >= 1.0 - 0.4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn rng_is_reproducible_and_streams_differ() {
        let a: Vec<u64> = (0..4).map({ let mut r = SeededRng::new(7, 0); move |_| r.next_u64() }).collect();
        let b: Vec<u64> = (0..4).map({ let mut r = SeededRng::new(7, 0); move |_| r.next_u64() }).collect();
        let c: Vec<u64> = (0..4).map({ let mut r = SeededRng::new(7, 1); move |_| r.next_u64() }).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut r = SeededRng::new(1, 0);
        assert!((0..1000).map(|_| r.uniform()).all(|x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn gaussian_moments() {
        let mut r = SeededRng::new(11, SeededRng::NOISE_STREAM);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut v = vec![vec![0.25, 0.5]; 3];
        add_noise(&mut v, 0.0, 9);
        assert_eq!(v, vec![vec![0.25, 0.5]; 3]);
    }

    #[test]
    fn noise_has_requested_spread() {
        let mut v = vec![vec![0.0; 100]; 200];
        add_noise(&mut v, 0.05, 42);
        let all: Vec<f64> = v.into_iter().flatten().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.045..=0.055).contains(&sd), "{sd}");
    }

    #[test]
    fn farthest_point_prefixes_nest() {
        let pts: Vec<Vec3> = (0..300)
            .map(|i| {
                let t = i as f64 * 0.37;
                Vec3::new(t.cos(), t.sin(), (i as f64 * 0.013).fract())
            })
            .collect();
        let p61 = farthest_point_sampling(&pts, 61, 5).unwrap();
        let p15 = farthest_point_sampling(&pts, 15, 5).unwrap();
        assert_eq!(&p61[..15], &p15[..]);
        let mut uniq = p61.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 61);
        assert!(farthest_point_sampling(&pts, 301, 5).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_checked() {
        let mut s = small();
        s.measurement.points = Some(6);
        s.measurement.noise = 0.02;
        s.measurement.seed = Some(17);
        let mesh = s.build_mesh(Path::new(".")).unwrap();
        let a = synthesize_measurements(&s, &mesh).unwrap();
        let b = synthesize_measurements(&s, &mesh).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.mode, MeasurementMode::Points);
        assert_eq!(a.nodes.len(), 6);
        a.validate(&mesh).unwrap();
        assert_eq!(MeasurementSet::from_json(&a.to_json()).unwrap(), a);
        let mut bad = a.clone();
        bad.positions[0][0] += 0.5;
        assert!(bad.validate(&mesh).is_err());
    }

    #[test]
    fn refined_data_differs_from_inverse_crime_data() {
        let mut s = small();
        let mesh = s.build_mesh(Path::new(".")).unwrap();
        let refined = synthesize_measurements(&s, &mesh).unwrap();
        s.measurement.refine = false;
        s.measurement.allow_inverse_crime = true;
        let crime = synthesize_measurements(&s, &mesh).unwrap();
        assert_eq!(refined.nodes, crime.nodes);
        assert_eq!(refined.values[0], crime.values[0]);
        assert_ne!(refined.values.last(), crime.values.last());
    }

    #[test]
    fn healthy_inverse_crime_reconstruction_is_silent() {
        let mut s = small();
        s.inclusion = None;
        s.measurement.refine = false;
        s.measurement.allow_inverse_crime = true;
        let mesh = s.build_mesh(Path::new(".")).unwrap();
        let data = synthesize_measurements(&s, &mesh).unwrap();
        let r = run_reconstruction(&s, &mesh, &data).unwrap();
        assert_eq!(r.report.j, 0.0);
        assert!(r.g.iter().all(|&g| g == 0.0));
        assert!(r.report.no_inclusion_evidence);
        assert_eq!(r.report.provenance.scenario_hash.as_deref(), Some(s.hash().as_str()));
    }

    proptest! {
        #[test]
        fn noise_stream_depends_only_on_seed(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..5) {
            let mut a = vec![vec![0.0; cols]; rows];
            let mut b = a.clone();
            add_noise(&mut a, 0.1, seed);
            add_noise(&mut b, 0.1, seed);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scenario_round_trip_holds(noise in 0.0f64..=1.0, seed in any::<u64>(), t in 0.1f64..100.0, steps in 1usize..500) {
            let mut s = small();
            s.measurement.noise = noise;
            s.measurement.seed = Some(seed);
            s.grid = TimeGrid { t_final: t, steps };
            let back = Scenario::from_toml(&s.to_toml(), Path::new("p")).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
