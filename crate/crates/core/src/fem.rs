//! P1 finite-element assembly on tetrahedra.
//!
//! The background stiffness is written with the healthy-tissue tensor `K0`
//! (or scalar `k0`); the same routine assembles the perturbed operator from a
//! modified [`ConductivityField`].

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ionic::IonicParams;
use crate::mesh::{BoundarySubset, FiberFrame, Mesh, Vec3};
use crate::sparse::{SparseMatrix, TripletBuilder};

pub type Tensor = Matrix3<f64>;

/// Intra- and extracellular conductivity eigenvalues along fiber, sheet and
/// transmural directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductivityEigenvalues {
    pub kf_i: f64,
    pub kt_i: f64,
    pub kr_i: f64,
    pub kf_e: f64,
    pub kt_e: f64,
    pub kr_e: f64,
}

impl Default for ConductivityEigenvalues {
    fn default() -> Self {
        Self {
            kf_i: 3.0,
            kt_i: 1.0,
            kr_i: 0.315,
            kf_e: 2.0,
            kt_e: 1.65,
            kr_e: 1.351,
        }
    }
}

impl ConductivityEigenvalues {
    pub fn validate(&self) -> Result<()> {
        let all = [self.kf_i, self.kt_i, self.kr_i, self.kf_e, self.kt_e, self.kr_e];
        if all.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::Config("conductivity eigenvalues must be positive".into()));
        }
        Ok(())
    }

    /// Eigenvalues of the monodomain tensor `Ke (Ke + Ki)^-1 Ki`, per direction.
    pub fn monodomain(&self) -> [f64; 3] {
        let h = |i: f64, e: f64| i * e / (i + e);
        [h(self.kf_i, self.kf_e), h(self.kt_i, self.kt_e), h(self.kr_i, self.kr_e)]
    }
}

/// Background conductivity: scalar `k0`, or the anisotropic monodomain tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ConductivitySpec {
    Scalar { k0: f64 },
    Anisotropic(ConductivityEigenvalues),
}

impl Default for ConductivitySpec {
    fn default() -> Self {
        ConductivitySpec::Anisotropic(ConductivityEigenvalues::default())
    }
}

impl ConductivitySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConductivitySpec::Scalar { k0 } if !(*k0 > 0.0 && k0.is_finite()) => {
                Err(Error::Config(format!("scalar conductivity must be positive, got {k0}")))
            }
            ConductivitySpec::Scalar { .. } => Ok(()),
            ConductivitySpec::Anisotropic(e) => e.validate(),
        }
    }

    pub fn field(&self, mesh: &Mesh) -> Result<ConductivityField> {
        match self {
            ConductivitySpec::Scalar { k0 } => ConductivityField::scalar(mesh, *k0),
            ConductivitySpec::Anisotropic(e) => ConductivityField::monodomain(mesh, e),
        }
    }

    /// Scalar reference conductivity: `k0`, or the fiber eigenvalue of the
    /// monodomain tensor.
    pub fn reference(&self) -> f64 {
        match self {
            ConductivitySpec::Scalar { k0 } => *k0,
            ConductivitySpec::Anisotropic(e) => e.monodomain()[0],
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, ConductivitySpec::Scalar { .. })
    }
}

fn orthotropic(frame: &FiberFrame, k: [f64; 3]) -> Tensor {
    k[0] * frame.fiber * frame.fiber.transpose()
        + k[1] * frame.sheet * frame.sheet.transpose()
        + k[2] * frame.normal * frame.normal.transpose()
}

/// `Ke (Ke + Ki)^-1 Ki` in the given local frame.
pub fn monodomain_tensor(frame: &FiberFrame, eig: &ConductivityEigenvalues) -> Tensor {
    let ki = orthotropic(frame, [eig.kf_i, eig.kt_i, eig.kr_i]);
    let ke = orthotropic(frame, [eig.kf_e, eig.kt_e, eig.kr_e]);
    let sum_inv = (ke + ki)
        .try_inverse()
        .expect("sum of SPD tensors is invertible");
    let k = ke * sum_inv * ki;
    0.5 * (k + k.transpose())
}

/// Per-element symmetric positive-definite conductivity.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    tensors: Vec<Tensor>,
}

impl ConductivityField {
    pub fn scalar(mesh: &Mesh, k0: f64) -> Result<Self> {
        if !(k0 > 0.0 && k0.is_finite()) {
            return Err(Error::Config(format!("scalar conductivity must be positive, got {k0}")));
        }
        Ok(Self {
            tensors: vec![Tensor::identity() * k0; mesh.n_tets()],
        })
    }

    /// Monodomain tensor evaluated at the vertices from the fiber frames, averaged
    /// over each element's four vertices.
    pub fn monodomain(mesh: &Mesh, eig: &ConductivityEigenvalues) -> Result<Self> {
        eig.validate()?;
        let nodal: Vec<Tensor> = mesh
            .fiber_frames()
            .iter()
            .map(|f| monodomain_tensor(f, eig))
            .collect();
        let tensors = mesh
            .tets()
            .iter()
            .map(|t| t.iter().fold(Tensor::zeros(), |acc, &v| acc + nodal[v]) / 4.0)
            .collect();
        Self::from_tensors(tensors)
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        for (e, k) in tensors.iter().enumerate() {
            if (k - k.transpose()).abs().max() > 1e-12 * k.abs().max() {
                return Err(Error::Invalid(format!("conductivity of element {e} is not symmetric")));
            }
            if k.cholesky().is_none() {
                return Err(Error::Invalid(format!(
                    "conductivity of element {e} is not positive definite"
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub(crate) fn from_tensors_unchecked(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, e: usize) -> &Tensor {
        &self.tensors[e]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            tensors: self.tensors.iter().map(|k| k * alpha).collect(),
        }
    }

    /// The same piecewise-constant field on a uniformly refined mesh, whose
    /// element `e` has children `8e..8e + 8`.
    pub fn refined(&self) -> Self {
        Self {
            tensors: self.tensors.iter().flat_map(|k| [*k; 8]).collect(),
        }
    }

    /// Volume-weighted average of the element tensors around each vertex.
    pub fn vertex_average(&self, mesh: &Mesh) -> Vec<Tensor> {
        let mut acc = vec![Tensor::zeros(); mesh.n_vertices()];
        let mut w = vec![0.0; mesh.n_vertices()];
        for (e, tet) in mesh.tets().iter().enumerate() {
            let vol = mesh.tet_volume(e);
            for &v in tet {
                acc[v] += self.tensors[e] * vol;
                w[v] += vol;
            }
        }
        acc.iter()
            .zip(&w)
            .map(|(k, &wv)| if wv > 0.0 { k / wv } else { *k })
            .collect()
    }
}

/// Volume and barycentric-coordinate gradients of a tet.
#[derive(Debug, Clone, Copy)]
pub struct TetGeometry {
    pub volume: f64,
    pub grads: [Vec3; 4],
}

pub fn tet_geometry(mesh: &Mesh, e: usize) -> Result<TetGeometry> {
    let p = mesh.tet_points(e);
    let jac = Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
    let det = jac.determinant();
    let volume = det / 6.0;
    if !(volume > 0.0) {
        return Err(Error::DegenerateElement { element: e, volume });
    }
    let inv_t = jac
        .try_inverse()
        .ok_or(Error::DegenerateElement { element: e, volume })?
        .transpose();
    let g1 = inv_t.column(0).into_owned();
    let g2 = inv_t.column(1).into_owned();
    let g3 = inv_t.column(2).into_owned();
    Ok(TetGeometry {
        volume,
        grads: [-(g1 + g2 + g3), g1, g2, g3],
    })
}

/// P1 mass matrix; `lumped` gives the row-sum diagonal.
pub fn assemble_mass(mesh: &Mesh, lumped: bool) -> Result<SparseMatrix> {
    assemble_mass_masked(mesh, lumped, None)
}

/// Mass matrix restricted to the elements with `active[e] == true`.
pub fn assemble_mass_masked(mesh: &Mesh, lumped: bool, active: Option<&[bool]>) -> Result<SparseMatrix> {
    let n = mesh.n_vertices();
    if let Some(a) = active {
        if a.len() != mesh.n_tets() {
            return Err(Error::DimensionMismatch {
                context: "element mask",
                expected: mesh.n_tets(),
                found: a.len(),
            });
        }
    }
    if lumped {
        let mut diag = vec![0.0; n];
        for (e, tet) in mesh.tets().iter().enumerate() {
            let vol = checked_volume(mesh, e)?;
            if active.is_some_and(|a| !a[e]) {
                continue;
            }
            for &v in tet {
                diag[v] += vol / 4.0;
            }
        }
        return Ok(SparseMatrix::from_diagonal(&diag));
    }
    let mut b = TripletBuilder::with_capacity(n, n, 16 * mesh.n_tets());
    for (e, tet) in mesh.tets().iter().enumerate() {
        let vol = checked_volume(mesh, e)?;
        if active.is_some_and(|a| !a[e]) {
            continue;
        }
        for i in 0..4 {
            for j in 0..4 {
                let m = if i == j { vol / 10.0 } else { vol / 20.0 };
                b.push(tet[i], tet[j], m);
            }
        }
    }
    Ok(b.build())
}

fn checked_volume(mesh: &Mesh, e: usize) -> Result<f64> {
    let vol = mesh.tet_volume(e);
    if !(vol > 0.0) {
        return Err(Error::DegenerateElement { element: e, volume: vol });
    }
    Ok(vol)
}

/// `A_ij = sum_T |T| grad(phi_i) . K_T grad(phi_j)`.
pub fn assemble_stiffness(mesh: &Mesh, k: &ConductivityField) -> Result<SparseMatrix> {
    if k.len() != mesh.n_tets() {
        return Err(Error::DimensionMismatch {
            context: "conductivity field",
            expected: mesh.n_tets(),
            found: k.len(),
        });
    }
    let n = mesh.n_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 16 * mesh.n_tets());
    for (e, tet) in mesh.tets().iter().enumerate() {
        let geo = tet_geometry(mesh, e)?;
        let kt = k.tensor(e);
        for i in 0..4 {
            let kg = kt * geo.grads[i];
            for j in 0..4 {
                b.push(tet[i], tet[j], geo.volume * kg.dot(&geo.grads[j]));
            }
        }
    }
    Ok(b.build())
}

/// P1 surface mass matrix on the faces of `gamma` (global numbering, empty rows
/// off `gamma`).
pub fn assemble_boundary_mass(mesh: &Mesh, gamma: &BoundarySubset) -> Result<SparseMatrix> {
    if gamma.faces().is_empty() {
        return Err(Error::Invalid("boundary subset is empty".into()));
    }
    let n = mesh.n_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * gamma.faces().len());
    for &f in gamma.faces() {
        let face = mesh.boundary_faces()[f];
        let area = mesh.face_area(f);
        for i in 0..3 {
            for j in 0..3 {
                let m = if i == j { area / 6.0 } else { area / 12.0 };
                b.push(face[i], face[j], m);
            }
        }
    }
    Ok(b.build())
}

/// Nodal interpolation of the ionic current weighted by a (masked) mass matrix:
/// entries approximate `int chi f(u_h) phi_i`.
pub fn reaction_vector(mass: &SparseMatrix, u: &[f64], ionic: &IonicParams) -> Result<Vec<f64>> {
    let fu: Vec<f64> = u.iter().map(|&x| ionic.f(x)).collect();
    crate::sparse::spmv(mass, &fu)
}

/// Assemble the masked mass and apply it in one go.
pub fn reaction_vector_on(
    mesh: &Mesh,
    u: &[f64],
    ionic: &IonicParams,
    active: Option<&[bool]>,
    lumped: bool,
) -> Result<Vec<f64>> {
    if u.len() != mesh.n_vertices() {
        return Err(Error::DimensionMismatch {
            context: "nodal field",
            expected: mesh.n_vertices(),
            found: u.len(),
        });
    }
    let m = assemble_mass_masked(mesh, lumped, active)?;
    reaction_vector(&m, u, ionic)
}

/// Element-wise constant gradients of a P1 field.
pub fn element_gradients(mesh: &Mesh, u: &[f64]) -> Result<Vec<Vec3>> {
    (0..mesh.n_tets())
        .map(|e| {
            let geo = tet_geometry(mesh, e)?;
            Ok(mesh.tets()[e]
                .iter()
                .zip(&geo.grads)
                .fold(Vec3::zeros(), |acc, (&v, g)| acc + g * u[v]))
        })
        .collect()
}

/// Precomputed weights for repeated gradient recovery on one mesh.
#[derive(Debug, Clone)]
pub struct GradientRecovery {
    /// `(vertex, weight * grad(phi))` contributions per element.
    geometry: Vec<TetGeometry>,
    vertex_volume: Vec<f64>,
}

impl GradientRecovery {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let geometry = (0..mesh.n_tets())
            .map(|e| tet_geometry(mesh, e))
            .collect::<Result<Vec<_>>>()?;
        let mut vertex_volume = vec![0.0; mesh.n_vertices()];
        for (tet, g) in mesh.tets().iter().zip(&geometry) {
            for &v in tet {
                vertex_volume[v] += g.volume;
            }
        }
        Ok(Self {
            geometry,
            vertex_volume,
        })
    }

    /// Volume-weighted average of the adjacent element gradients at each vertex.
    pub fn recover(&self, mesh: &Mesh, u: &[f64]) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); mesh.n_vertices()];
        for (tet, g) in mesh.tets().iter().zip(&self.geometry) {
            let grad = tet
                .iter()
                .zip(&g.grads)
                .fold(Vec3::zeros(), |acc, (&v, gv)| acc + gv * u[v]);
            for &v in tet {
                out[v] += grad * g.volume;
            }
        }
        for (o, &w) in out.iter_mut().zip(&self.vertex_volume) {
            if w > 0.0 {
                *o /= w;
            }
        }
        out
    }
}

pub fn recover_gradient(mesh: &Mesh, u: &[f64]) -> Result<Vec<Vec3>> {
    if u.len() != mesh.n_vertices() {
        return Err(Error::DimensionMismatch {
            context: "nodal field",
            expected: mesh.n_vertices(),
            found: u.len(),
        });
    }
    Ok(GradientRecovery::new(mesh)?.recover(mesh, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_box, BoxTags, FaceTag};

    fn reference_tet() -> Mesh {
        Mesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn reference_mass() {
        let m = assemble_mass(&reference_tet(), false).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 1.0 / 60.0 } else { 1.0 / 120.0 };
                assert!((m.get(i, j) - expected).abs() < 1e-15);
            }
        }
        let l = assemble_mass(&reference_tet(), true).unwrap();
        for (i, s) in m.row_sums().iter().enumerate() {
            assert!((l.get(i, i) - s).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_stiffness() {
        let mesh = reference_tet();
        let k = assemble_stiffness(&mesh, &ConductivityField::scalar(&mesh, 1.0).unwrap()).unwrap();
        let diag = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (i, d) in diag.iter().enumerate() {
            assert!((k.get(i, i) - d).abs() < 1e-12);
        }
        for j in 1..4 {
            assert!((k.get(0, j) + 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_total_is_volume() {
        let mesh = generate_box([3, 2, 2], [1.0, 0.5, 2.0], BoxTags::default()).unwrap();
        let m = assemble_mass(&mesh, false).unwrap();
        assert!((m.total() - 1.0).abs() < 1e-12);
        assert!(m.is_symmetric(1e-12));
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_scale_linearly() {
        let mesh = generate_box([3, 3, 2], [1.0, 1.0, 1.0], BoxTags::default()).unwrap();
        let k0 = ConductivityField::monodomain(&mesh, &ConductivityEigenvalues::default()).unwrap();
        let a = assemble_stiffness(&mesh, &k0).unwrap();
        let a2 = assemble_stiffness(&mesh, &k0.scaled(2.0)).unwrap();
        assert!(a.row_sums().iter().all(|s| s.abs() < 1e-12));
        assert!(a.is_symmetric(1e-12));
        for (x, y) in a.values().iter().zip(a2.values()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn monodomain_tensor_matches_harmonic_eigenvalues() {
        let eig = ConductivityEigenvalues::default();
        let frame = FiberFrame::orthonormalized(Vec3::new(1.0, 2.0, 0.5), Vec3::new(0.0, 1.0, -1.0)).unwrap();
        let k = monodomain_tensor(&frame, &eig);
        let m = eig.monodomain();
        assert!((frame.fiber.dot(&(k * frame.fiber)) - m[0]).abs() < 1e-12);
        assert!((frame.sheet.dot(&(k * frame.sheet)) - m[1]).abs() < 1e-12);
        assert!((frame.normal.dot(&(k * frame.normal)) - m[2]).abs() < 1e-12);
        assert!((m[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn boundary_mass_single_triangle() {
        let mesh = reference_tet();
        // face opposite vertex 0 has area sqrt(3)/2
        let f = mesh
            .boundary_faces()
            .iter()
            .position(|f| !f.contains(&0))
            .unwrap();
        let gamma = BoundarySubset::from_faces(&mesh, vec![f]).unwrap();
        let b = assemble_boundary_mass(&mesh, &gamma).unwrap();
        let area = 3f64.sqrt() / 2.0;
        assert!((b.get(1, 1) - area / 6.0).abs() < 1e-15);
        assert!((b.get(1, 2) - area / 12.0).abs() < 1e-15);
        assert!((b.total() - area).abs() < 1e-12);
        assert_eq!(b.row(0).count(), 0);
    }

    #[test]
    fn boundary_mass_total_is_area() {
        let tags = BoxTags {
            y_max: FaceTag::Endocardium,
            ..BoxTags::default()
        };
        let mesh = generate_box([3, 2, 4], [1.5, 1.0, 2.0], tags).unwrap();
        let gamma = BoundarySubset::from_tags(&mesh, &[FaceTag::Endocardium]).unwrap();
        let b = assemble_boundary_mass(&mesh, &gamma).unwrap();
        assert!((b.total() - 3.0).abs() < 1e-12);
        let off: Vec<usize> = (0..mesh.n_vertices()).filter(|v| !gamma.nodes().contains(v)).collect();
        assert!(off.iter().all(|&v| b.row(v).count() == 0));
    }

    #[test]
    fn reaction_vector_cases() {
        let mesh = generate_box([2, 2, 2], [1.0; 3], BoxTags::default()).unwrap();
        let ionic = IonicParams::default();
        let n = mesh.n_vertices();
        for c in [0.0, 1.0] {
            let r = reaction_vector_on(&mesh, &vec![c; n], &ionic, None, true).unwrap();
            assert!(r.iter().all(|&x| x == 0.0));
        }
        let r = reaction_vector_on(&mesh, &vec![0.5; n], &ionic, None, false).unwrap();
        let m1 = assemble_mass(&mesh, false).unwrap().row_sums();
        for (ri, mi) in r.iter().zip(&m1) {
            assert!((ri - (-0.0175) * mi).abs() < 1e-15);
        }
        // masking every element removes the reaction entirely
        let none = vec![false; mesh.n_tets()];
        let r = reaction_vector_on(&mesh, &vec![0.5; n], &ionic, Some(&none), true).unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_recovery_exact_for_linears() {
        let mesh = generate_box([3, 4, 2], [1.0, 2.0, 1.0], BoxTags::default()).unwrap();
        let a = Vec3::new(0.3, -1.2, 2.5);
        let u: Vec<f64> = mesh.vertices().iter().map(|p| a.dot(p) + 0.7).collect();
        let g = recover_gradient(&mesh, &u).unwrap();
        assert!(g.iter().all(|gv| (gv - a).norm() < 1e-12));
        let c = recover_gradient(&mesh, &vec![3.0; mesh.n_vertices()]).unwrap();
        assert!(c.iter().all(|gv| gv.norm() < 1e-12));
    }

    #[test]
    fn gradient_recovery_of_quadratic_is_first_order() {
        let probe = Vec3::new(0.5, 0.5, 0.5);
        let mut errs = Vec::new();
        for n in [4, 8, 16] {
            let mesh = generate_box([n, n, n], [1.0; 3], BoxTags::default()).unwrap();
            let u: Vec<f64> = mesh.vertices().iter().map(|p| p.x * p.x).collect();
            let g = recover_gradient(&mesh, &u).unwrap();
            // off-center vertex so the symmetric cancellation does not hide the error
            let v = mesh.nearest_vertex(&(probe + Vec3::new(0.25, 0.0, 0.0)));
            let x = mesh.vertices()[v].x;
            errs.push((g[v].x - 2.0 * x).abs());
        }
        assert!(errs.iter().all(|&e| e <= 0.5));
        assert!(errs[2] <= errs[0] + 1e-14);
    }
}
