use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, ConductivityField, GradientRecovery};
use crate::sparse::{cg_solve, SolveOptions, TripletBuilder};

use super::{FaceTag, FiberFrame, Mesh, Vec3};

/// Local frame from a transmural direction `e_r` and transmural depth `lambda`
/// (0 on the endocardium, 1 on the epicardium). The fiber turns linearly from
/// `angle_endo` to `angle_epi` (degrees) inside the tangent plane, measured from
/// the circumferential direction around the z axis towards the longitudinal one.
pub fn frame_from_transmural(e_r: Vec3, lambda: f64, angle_endo: f64, angle_epi: f64) -> FiberFrame {
    let r = e_r.try_normalize(1e-14).unwrap_or_else(Vec3::z);
    let e_c = Vec3::z()
        .cross(&r)
        .try_normalize(1e-8)
        .or_else(|| (Vec3::x() - r * r.x).try_normalize(1e-8))
        .unwrap_or_else(Vec3::y);
    let e_l = r.cross(&e_c);
    let alpha = (angle_endo + lambda.clamp(0.0, 1.0) * (angle_epi - angle_endo)).to_radians();
    let fiber = e_c * alpha.cos() + e_l * alpha.sin();
    FiberFrame::orthonormalized(r, fiber).expect("fiber lies in the tangent plane")
}

/// Harmonic transmural coordinate: Laplace's equation with 0 on endocardial and
/// 1 on epicardial nodes, homogeneous Neumann elsewhere.
pub fn harmonic_transmural(mesh: &Mesh) -> Result<Vec<f64>> {
    let n = mesh.n_vertices();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for (face, tag) in mesh.boundary_faces().iter().zip(mesh.face_tags()) {
        let value = match tag {
            FaceTag::Epicardium => 1.0,
            FaceTag::Endocardium => 0.0,
            _ => continue,
        };
        for &v in face {
            // endocardium wins on shared nodes
            if fixed[v] != Some(0.0) {
                fixed[v] = Some(value);
            }
        }
    }
    if mesh.tag_count(FaceTag::Endocardium) == 0 || mesh.tag_count(FaceTag::Epicardium) == 0 {
        return Err(Error::Mesh(
            "fiber assignment needs endocardium and epicardium tags".into(),
        ));
    }

    let k = assemble_stiffness(mesh, &ConductivityField::scalar(mesh, 1.0)?)?;
    let mut free_index = vec![usize::MAX; n];
    let mut free = Vec::new();
    for v in 0..n {
        if fixed[v].is_none() {
            free_index[v] = free.len();
            free.push(v);
        }
    }
    let mut lambda: Vec<f64> = fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
    if free.is_empty() {
        return Ok(lambda);
    }
    let nf = free.len();
    let mut b = TripletBuilder::with_capacity(nf, nf, k.nnz());
    let mut rhs = vec![0.0; nf];
    for (i, &v) in free.iter().enumerate() {
        for (j, a) in k.row(v) {
            match fixed[j] {
                Some(val) => rhs[i] -= a * val,
                None => b.push(i, free_index[j], a),
            }
        }
    }
    let sol = cg_solve(&b.build(), &rhs, &SolveOptions::default().with_tolerance(1e-12))?;
    for (i, &v) in free.iter().enumerate() {
        lambda[v] = sol.x[i];
    }
    Ok(lambda)
}

/// Assign rule-based fiber frames using the harmonic transmural coordinate.
pub fn assign_fibers(mesh: &Mesh, angle_endo: f64, angle_epi: f64) -> Result<Mesh> {
    let lambda = harmonic_transmural(mesh)?;
    let grads = GradientRecovery::new(mesh)?.recover(mesh, &lambda);
    let frames = grads
        .iter()
        .zip(&lambda)
        .map(|(g, &l)| frame_from_transmural(*g, l, angle_endo, angle_epi))
        .collect();
    let mut out = mesh.clone();
    out.set_fiber_frames(frames)?;
    Ok(out)
}
