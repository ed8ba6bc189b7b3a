//! Tetrahedral meshes: storage, generators, refinement, boundary tagging and fiber frames.

mod fibers;
pub mod io;
mod ventricle;

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use fibers::{assign_fibers, frame_from_transmural, harmonic_transmural};
pub use ventricle::{generate_ventricle, transmural_coordinate, VentricleGeometry};

pub type Vec3 = Vector3<f64>;

/// Label carried by each boundary face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceTag {
    Endocardium,
    Epicardium,
    Base,
    Other,
}

impl FaceTag {
    pub const ALL: [FaceTag; 4] = [
        FaceTag::Endocardium,
        FaceTag::Epicardium,
        FaceTag::Base,
        FaceTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaceTag::Endocardium => "endocardium",
            FaceTag::Epicardium => "epicardium",
            FaceTag::Base => "base",
            FaceTag::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<FaceTag> {
        FaceTag::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// Orthonormal local frame: fiber, sheet-tangent and transmural directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberFrame {
    pub fiber: Vec3,
    pub sheet: Vec3,
    pub normal: Vec3,
}

impl FiberFrame {
    pub fn canonical() -> Self {
        Self {
            fiber: Vec3::x(),
            sheet: Vec3::y(),
            normal: Vec3::z(),
        }
    }

    /// Largest deviation from orthonormality over all pairs.
    pub fn orthonormality_error(&self) -> f64 {
        let v = [self.fiber, self.sheet, self.normal];
        let mut err: f64 = 0.0;
        for i in 0..3 {
            err = err.max((v[i].dot(&v[i]) - 1.0).abs());
            for j in (i + 1)..3 {
                err = err.max(v[i].dot(&v[j]).abs());
            }
        }
        err
    }

    /// Gram-Schmidt with the transmural direction kept first.
    pub fn orthonormalized(normal: Vec3, fiber: Vec3) -> Option<Self> {
        let r = normal.try_normalize(1e-14)?;
        let f = (fiber - r * fiber.dot(&r)).try_normalize(1e-14)?;
        let t = r.cross(&f);
        Some(Self {
            fiber: f,
            sheet: t,
            normal: r,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    boundary_faces: Vec<[usize; 3]>,
    face_tags: Vec<FaceTag>,
    fiber_frames: Vec<FiberFrame>,
}

pub(crate) fn signed_volume(p: [&Vec3; 4]) -> f64 {
    (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])) / 6.0
}

fn sorted3(f: [usize; 3]) -> [usize; 3] {
    let mut s = f;
    s.sort_unstable();
    s
}

impl Mesh {
    /// Build a mesh from raw vertices and tetrahedra. Tets are reoriented to positive
    /// volume; boundary faces are extracted and tagged `Other`; frames are canonical.
    pub fn new(vertices: Vec<Vec3>, mut tets: Vec<[usize; 4]>) -> Result<Self> {
        if vertices.is_empty() || tets.is_empty() {
            return Err(Error::Mesh("mesh needs at least one vertex and one tet".into()));
        }
        let n = vertices.len();
        let scale = bounding_extent(&vertices);
        let tiny = 1e-14 * scale.powi(3);
        for (e, tet) in tets.iter_mut().enumerate() {
            if tet.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("tet {e} references a missing vertex")));
            }
            let vol = signed_volume(tet.map(|v| &vertices[v]));
            if vol.abs() <= tiny || !vol.is_finite() {
                return Err(Error::DegenerateElement { element: e, volume: vol });
            }
            if vol < 0.0 {
                tet.swap(2, 3);
            }
        }
        let boundary_faces = extract_boundary(&tets);
        let face_tags = vec![FaceTag::Other; boundary_faces.len()];
        Ok(Self {
            fiber_frames: vec![FiberFrame::canonical(); n],
            vertices,
            tets,
            boundary_faces,
            face_tags,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn boundary_faces(&self) -> &[[usize; 3]] {
        &self.boundary_faces
    }

    pub fn face_tags(&self) -> &[FaceTag] {
        &self.face_tags
    }

    pub fn fiber_frames(&self) -> &[FiberFrame] {
        &self.fiber_frames
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn tet_points(&self, e: usize) -> [Vec3; 4] {
        self.tets[e].map(|v| self.vertices[v])
    }

    pub fn tet_volume(&self, e: usize) -> f64 {
        signed_volume(self.tets[e].map(|v| &self.vertices[v]))
    }

    pub fn tet_centroid(&self, e: usize) -> Vec3 {
        self.tets[e]
            .iter()
            .fold(Vec3::zeros(), |acc, &v| acc + self.vertices[v])
            / 4.0
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.n_tets()).map(|e| self.tet_volume(e)).sum()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.boundary_faces[f].map(|v| self.vertices[v]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.boundary_faces[f].map(|v| self.vertices[v]);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn tag_count(&self, tag: FaceTag) -> usize {
        self.face_tags.iter().filter(|&&t| t == tag).count()
    }

    /// Reassign boundary tags with a closure over face index and face centroid.
    pub fn tag_faces(&mut self, mut rule: impl FnMut(usize, Vec3) -> FaceTag) {
        for f in 0..self.boundary_faces.len() {
            let c = self.boundary_faces[f]
                .iter()
                .fold(Vec3::zeros(), |acc, &v| acc + self.vertices[v])
                / 3.0;
            self.face_tags[f] = rule(f, c);
        }
    }

    pub fn set_face_tags(&mut self, tags: Vec<FaceTag>) -> Result<()> {
        if tags.len() != self.boundary_faces.len() {
            return Err(Error::DimensionMismatch {
                context: "face tags",
                expected: self.boundary_faces.len(),
                found: tags.len(),
            });
        }
        self.face_tags = tags;
        Ok(())
    }

    pub fn set_fiber_frames(&mut self, frames: Vec<FiberFrame>) -> Result<()> {
        if frames.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch {
                context: "fiber frames",
                expected: self.vertices.len(),
                found: frames.len(),
            });
        }
        self.fiber_frames = frames;
        Ok(())
    }

    /// Unique undirected edges, numbered in order of first appearance.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for tet in &self.tets {
            for (i, j) in TET_EDGES {
                let key = edge_key(tet[i], tet[j]);
                seen.entry(key).or_insert_with(|| {
                    out.push(key);
                    out.len() - 1
                });
            }
        }
        out
    }

    /// `(mean, max)` edge length.
    pub fn edge_length_stats(&self) -> (f64, f64) {
        let edges = self.edges();
        let lens: Vec<f64> = edges
            .iter()
            .map(|[a, b]| (self.vertices[*a] - self.vertices[*b]).norm())
            .collect();
        let max = lens.iter().cloned().fold(0.0, f64::max);
        (lens.iter().sum::<f64>() / lens.len() as f64, max)
    }

    /// Largest distance between two boundary vertices.
    pub fn diameter(&self) -> f64 {
        let nodes = self.boundary_nodes();
        let mut d2: f64 = 0.0;
        for (k, &a) in nodes.iter().enumerate() {
            for &b in &nodes[k + 1..] {
                d2 = d2.max((self.vertices[a] - self.vertices[b]).norm_squared());
            }
        }
        d2.sqrt()
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = self.boundary_faces.iter().flatten().copied().collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    /// Tets adjacent to each vertex.
    pub fn vertex_to_tets(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for (e, tet) in self.tets.iter().enumerate() {
            for &v in tet {
                adj[v].push(e);
            }
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.n_vertices()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for tet in &self.tets {
            let r0 = find(&mut parent, tet[0]);
            for &v in &tet[1..] {
                let r = find(&mut parent, v);
                parent[r] = r0;
            }
        }
        let used: Vec<bool> = {
            let mut u = vec![false; self.n_vertices()];
            self.tets.iter().flatten().for_each(|&v| u[v] = true);
            u
        };
        let mut root = None;
        for (v, &is_used) in used.iter().enumerate() {
            if !is_used {
                return false;
            }
            let r = find(&mut parent, v);
            match root {
                None => root = Some(r),
                Some(r0) if r0 != r => return false,
                _ => {}
            }
        }
        true
    }

    /// Every boundary edge is shared by exactly two boundary faces.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<[usize; 2], usize> = HashMap::new();
        for f in &self.boundary_faces {
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                *count.entry(edge_key(f[i], f[j])).or_default() += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    /// Check the structural invariants: positive volumes, boundary consistency,
    /// orthonormal frames, connectivity.
    pub fn validate(&self) -> Result<()> {
        for e in 0..self.n_tets() {
            let vol = self.tet_volume(e);
            if !(vol > 0.0) {
                return Err(Error::DegenerateElement { element: e, volume: vol });
            }
        }
        let expected = extract_boundary(&self.tets);
        let mut a: Vec<[usize; 3]> = expected.iter().map(|&f| sorted3(f)).collect();
        let mut b: Vec<[usize; 3]> = self.boundary_faces.iter().map(|&f| sorted3(f)).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::Mesh("boundary faces do not match single-tet faces".into()));
        }
        if let Some(v) = self
            .fiber_frames
            .iter()
            .position(|fr| fr.orthonormality_error() > 1e-12)
        {
            return Err(Error::Mesh(format!("fiber frame at vertex {v} is not orthonormal")));
        }
        if !self.is_connected() {
            return Err(Error::Mesh("mesh is not a single connected component".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical binary layout of vertices, tets and tags.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.vertices {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        for t in &self.tets {
            for &i in t {
                h.update((i as u64).to_le_bytes());
            }
        }
        for (f, tag) in self.boundary_faces.iter().zip(&self.face_tags) {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
            h.update(tag.as_str().as_bytes());
        }
        for fr in &self.fiber_frames {
            for c in fr.fiber.iter().chain(fr.sheet.iter()).chain(fr.normal.iter()) {
                h.update(c.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Locate the tet containing `p` and its barycentric coordinates.
    pub fn locate(&self, p: &Vec3) -> Option<(usize, [f64; 4])> {
        let mut best: Option<(usize, [f64; 4], f64)> = None;
        for e in 0..self.n_tets() {
            let b = barycentric(&self.tet_points(e), p);
            let worst = b.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= -1e-12 {
                return Some((e, b));
            }
            if best.as_ref().is_none_or(|x| worst > x.2) {
                best = Some((e, b, worst));
            }
        }
        best.filter(|b| b.2 > -1e-9).map(|b| (b.0, b.1))
    }

    /// Linear interpolation of a nodal field at `p`.
    pub fn interpolate(&self, field: &[f64], p: &Vec3) -> Option<f64> {
        let (e, b) = self.locate(p)?;
        Some(
            self.tets[e]
                .iter()
                .zip(b)
                .map(|(&v, w)| w * field[v])
                .sum(),
        )
    }

    pub fn nearest_vertex(&self, p: &Vec3) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, v) in self.vertices.iter().enumerate() {
            let d = (v - p).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Distance from an arbitrary point to the boundary surface.
    pub fn distance_to_boundary(&self, p: &Vec3) -> f64 {
        self.boundary_faces
            .iter()
            .map(|f| point_triangle_distance(p, f.map(|v| self.vertices[v])))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance from each vertex to the boundary surface.
    pub fn boundary_distance(&self) -> Vec<f64> {
        let on_boundary = {
            let mut b = vec![false; self.n_vertices()];
            self.boundary_faces.iter().flatten().for_each(|&v| b[v] = true);
            b
        };
        self.vertices
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if on_boundary[i] {
                    return 0.0;
                }
                self.boundary_faces
                    .iter()
                    .map(|f| point_triangle_distance(p, f.map(|v| self.vertices[v])))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub(crate) fn from_parts(
        vertices: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        boundary_faces: Vec<[usize; 3]>,
        face_tags: Vec<FaceTag>,
        fiber_frames: Vec<FiberFrame>,
    ) -> Self {
        Self {
            vertices,
            tets,
            boundary_faces,
            face_tags,
            fiber_frames,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn edge_key(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn bounding_extent(vertices: &[Vec3]) -> f64 {
    let mut lo = vertices[0];
    let mut hi = vertices[0];
    for v in vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    (hi - lo).norm().max(f64::MIN_POSITIVE)
}

/// Faces that belong to exactly one tet, oriented outward, in tet order.
fn extract_boundary(tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let mut count: HashMap<[usize; 3], u32> = HashMap::with_capacity(tets.len() * 2);
    for t in tets {
        for f in tet_faces(t) {
            *count.entry(sorted3(f)).or_default() += 1;
        }
    }
    let mut out = Vec::new();
    for t in tets {
        for f in tet_faces(t) {
            if count[&sorted3(f)] == 1 {
                out.push(f);
            }
        }
    }
    out
}

/// Outward-oriented faces of a positively oriented tet.
fn tet_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    let [a, b, c, d] = *t;
    [[b, c, d], [a, d, c], [a, b, d], [a, c, b]]
}

pub(crate) fn barycentric(p: &[Vec3; 4], x: &Vec3) -> [f64; 4] {
    let m = nalgebra::Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
    match m.try_inverse() {
        Some(inv) => {
            let l = inv * (x - p[0]);
            [1.0 - l.x - l.y - l.z, l.x, l.y, l.z]
        }
        None => [f64::NAN; 4],
    }
}

fn point_triangle_distance(p: &Vec3, t: [Vec3; 3]) -> f64 {
    // Ericson, closest point on triangle.
    let [a, b, c] = t;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Tags applied to the six planes of a generated box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxTags {
    #[serde(default = "other")]
    pub x_min: FaceTag,
    #[serde(default = "other")]
    pub x_max: FaceTag,
    #[serde(default = "other")]
    pub y_min: FaceTag,
    #[serde(default = "other")]
    pub y_max: FaceTag,
    #[serde(default = "other")]
    pub z_min: FaceTag,
    #[serde(default = "other")]
    pub z_max: FaceTag,
}

fn other() -> FaceTag {
    FaceTag::Other
}

impl Default for BoxTags {
    fn default() -> Self {
        Self {
            x_min: FaceTag::Other,
            x_max: FaceTag::Other,
            y_min: FaceTag::Other,
            y_max: FaceTag::Other,
            z_min: FaceTag::Other,
            z_max: FaceTag::Other,
        }
    }
}

/// Structured box `[0,lx]x[0,ly]x[0,lz]`, each hex cell split into six tets sharing
/// the cell's main diagonal.
pub fn generate_box(cells: [usize; 3], lengths: [f64; 3], tags: BoxTags) -> Result<Mesh> {
    if cells.contains(&0) {
        return Err(Error::Invalid("box cell counts must be at least 1".into()));
    }
    if lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Invalid("box lengths must be positive".into()));
    }
    let [nx, ny, nz] = cells;
    let idx = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Vec3::new(
                    lengths[0] * i as f64 / nx as f64,
                    lengths[1] * j as f64 / ny as f64,
                    lengths[2] * k as f64 / nz as f64,
                ));
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut tet = [idx(c[0], c[1], c[2]); 4];
                    for (s, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        tet[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    let mut mesh = Mesh::new(vertices, tets)?;
    let eps = 1e-9 * lengths.iter().cloned().fold(0.0, f64::max);
    mesh.tag_faces(|_, c| {
        if c.x.abs() < eps {
            tags.x_min
        } else if (c.x - lengths[0]).abs() < eps {
            tags.x_max
        } else if c.y.abs() < eps {
            tags.y_min
        } else if (c.y - lengths[1]).abs() < eps {
            tags.y_max
        } else if c.z.abs() < eps {
            tags.z_min
        } else {
            tags.z_max
        }
    });
    Ok(mesh)
}

/// Split every tet 1 -> 8 through edge midpoints. Original vertices keep their
/// indices and midpoints follow; the children of tet `e` are tets `8e..8e + 8`.
/// Tags and fiber frames are carried over.
pub fn refine_uniform(mesh: &Mesh) -> Result<Mesh> {
    refine_uniform_with_parents(mesh).map(|(m, _)| m)
}

/// Linear interpolation of a coarse nodal field onto a uniformly refined mesh.
pub fn prolongate(coarse: &[f64], parents: &[[usize; 2]]) -> Vec<f64> {
    let mut fine = coarse.to_vec();
    fine.extend(parents.iter().map(|&[a, b]| 0.5 * (coarse[a] + coarse[b])));
    fine
}

/// [`refine_uniform`] plus the parent edge of every new vertex, in vertex order.
pub fn refine_uniform_with_parents(mesh: &Mesh) -> Result<(Mesh, Vec<[usize; 2]>)> {
    let nv = mesh.n_vertices();
    let mut mid: HashMap<[usize; 2], usize> = HashMap::new();
    let mut parents = Vec::new();
    let mut vertices = mesh.vertices.clone();
    let mut frames = mesh.fiber_frames.clone();
    let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>, frames: &mut Vec<FiberFrame>| {
        *mid.entry(edge_key(a, b)).or_insert_with(|| {
            let p = 0.5 * (vertices[a] + vertices[b]);
            parents.push(edge_key(a, b));
            vertices.push(p);
            let (fa, fb) = (mesh.fiber_frames[a], mesh.fiber_frames[b]);
            let frame = FiberFrame::orthonormalized(fa.normal + fb.normal, fa.fiber + fb.fiber)
                .unwrap_or(fa);
            frames.push(frame);
            vertices.len() - 1
        })
    };

    let mut tets = Vec::with_capacity(8 * mesh.n_tets());
    for t in &mesh.tets {
        let [v0, v1, v2, v3] = *t;
        let m01 = midpoint(v0, v1, &mut vertices, &mut frames);
        let m02 = midpoint(v0, v2, &mut vertices, &mut frames);
        let m03 = midpoint(v0, v3, &mut vertices, &mut frames);
        let m12 = midpoint(v1, v2, &mut vertices, &mut frames);
        let m13 = midpoint(v1, v3, &mut vertices, &mut frames);
        let m23 = midpoint(v2, v3, &mut vertices, &mut frames);
        let mut children = vec![
            [v0, m01, m02, m03],
            [m01, v1, m12, m13],
            [m02, m12, v2, m23],
            [m03, m13, m23, v3],
        ];
        // Inner octahedron: cut along its shortest diagonal.
        let diagonals = [
            ((m01, m23), [m02, m03, m13, m12]),
            ((m02, m13), [m01, m03, m23, m12]),
            ((m03, m12), [m01, m02, m23, m13]),
        ];
        let len = |(a, b): (usize, usize)| (vertices[a] - vertices[b]).norm_squared();
        let ((a, b), ring) = diagonals
            .iter()
            .copied()
            .min_by(|x, y| len(x.0).total_cmp(&len(y.0)))
            .unwrap();
        for q in 0..4 {
            children.push([a, b, ring[q], ring[(q + 1) % 4]]);
        }
        for mut c in children {
            if signed_volume(c.map(|v| &vertices[v])) < 0.0 {
                c.swap(2, 3);
            }
            tets.push(c);
        }
    }
    debug_assert_eq!(vertices.len() - nv, mid.len());

    let mut child_tags: HashMap<[usize; 3], FaceTag> = HashMap::new();
    for (f, &tag) in mesh.boundary_faces.iter().zip(&mesh.face_tags) {
        let [a, b, c] = *f;
        let ab = mid[&edge_key(a, b)];
        let bc = mid[&edge_key(b, c)];
        let ca = mid[&edge_key(c, a)];
        for child in [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]] {
            child_tags.insert(sorted3(child), tag);
        }
    }
    let boundary_faces = extract_boundary(&tets);
    let face_tags = boundary_faces
        .iter()
        .map(|f| child_tags.get(&sorted3(*f)).copied().unwrap_or(FaceTag::Other))
        .collect();
    Ok((Mesh::from_parts(vertices, tets, boundary_faces, face_tags, frames), parents))
}

/// Boundary faces carrying one of the requested tags, with their node set.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySubset {
    faces: Vec<usize>,
    nodes: Vec<usize>,
}

impl BoundarySubset {
    pub fn from_tags(mesh: &Mesh, tags: &[FaceTag]) -> Result<Self> {
        let faces: Vec<usize> = (0..mesh.boundary_faces.len())
            .filter(|&f| tags.contains(&mesh.face_tags[f]))
            .collect();
        Self::from_faces(mesh, faces)
    }

    /// The whole boundary.
    pub fn all(mesh: &Mesh) -> Result<Self> {
        Self::from_faces(mesh, (0..mesh.boundary_faces.len()).collect())
    }

    pub fn from_faces(mesh: &Mesh, faces: Vec<usize>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Invalid("boundary subset is empty".into()));
        }
        if let Some(&f) = faces.iter().find(|&&f| f >= mesh.boundary_faces.len()) {
            return Err(Error::Invalid(format!("boundary face {f} does not exist")));
        }
        let mut nodes: Vec<usize> = faces
            .iter()
            .flat_map(|&f| mesh.boundary_faces[f])
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        Ok(Self { faces, nodes })
    }

    pub fn faces(&self) -> &[usize] {
        &self.faces
    }

    /// Sorted node indices touched by the faces.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn area(&self, mesh: &Mesh) -> f64 {
        self.faces.iter().map(|&f| mesh.face_area(f)).sum()
    }
}
