//! Idealized left ventricle: the shell between two coaxial prolate ellipsoids
//! truncated by a horizontal plane.
//!
//! Both surfaces are parametrized over one O-grid disk (a squircle block around
//! the apex and an annulus of rings out to the base rim). Wall layers interpolate
//! linearly between matching surface points and every prism is cut into three
//! tets with the minimum-index rule, which keeps shared quad faces conforming.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::fibers::frame_from_transmural;
use super::{FaceTag, Mesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VentricleGeometry {
    /// Outer (epicardial) semi-axes in cm.
    pub outer: [f64; 3],
    /// Inner (endocardial) semi-axes in cm.
    pub inner: [f64; 3],
    /// Height of the basal plane above the ellipsoid center; the apex sits at `-outer[2]`.
    pub truncation_z: f64,
    pub angle_endo: f64,
    pub angle_epi: f64,
}

impl Default for VentricleGeometry {
    fn default() -> Self {
        Self {
            outer: [3.2, 3.2, 6.5],
            inner: [2.4, 2.4, 5.7],
            truncation_z: 1.5,
            angle_endo: -60.0,
            angle_epi: 60.0,
        }
    }
}

impl VentricleGeometry {
    pub fn validate(&self) -> Result<()> {
        let all = self.outer.iter().chain(&self.inner);
        if all.clone().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config("ventricle semi-axes must be positive".into()));
        }
        if (0..3).any(|i| self.inner[i] >= self.outer[i]) {
            return Err(Error::Config(
                "wall thickness must be positive: inner semi-axes must lie strictly inside the outer ones".into(),
            ));
        }
        if !(self.truncation_z.abs() < self.inner[2]) {
            return Err(Error::Config(
                "truncation plane must cut both ellipsoids".into(),
            ));
        }
        Ok(())
    }

    /// Semi-axes of the intermediate ellipsoid at transmural depth `lambda`.
    pub fn axes_at(&self, lambda: f64) -> [f64; 3] {
        std::array::from_fn(|i| self.inner[i] + lambda * (self.outer[i] - self.inner[i]))
    }

    /// Exact volume of the truncated shell.
    pub fn shell_volume(&self) -> f64 {
        cap_volume(self.outer, self.truncation_z) - cap_volume(self.inner, self.truncation_z)
    }
}

/// Volume of `{x : sum (x_i/a_i)^2 <= 1, z <= t}`.
fn cap_volume(a: [f64; 3], t: f64) -> f64 {
    let c = a[2];
    PI * a[0] * a[1] * ((t + c) - (t.powi(3) + c.powi(3)) / (3.0 * c * c))
}

/// Transmural depth in `[0, 1]` of a point: the interpolation parameter of the
/// intermediate ellipsoid through it.
pub fn transmural_coordinate(geometry: &VentricleGeometry, p: &Vec3) -> f64 {
    let level = |lambda: f64| {
        let a = geometry.axes_at(lambda);
        (p.x / a[0]).powi(2) + (p.y / a[1]).powi(2) + (p.z / a[2]).powi(2) - 1.0
    };
    if level(0.0) <= 0.0 {
        return 0.0;
    }
    if level(1.0) >= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if level(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Outward normal of the intermediate ellipsoid through `p`.
fn transmural_direction(geometry: &VentricleGeometry, p: &Vec3, lambda: f64) -> Vec3 {
    let a = geometry.axes_at(lambda);
    Vec3::new(p.x / (a[0] * a[0]), p.y / (a[1] * a[1]), p.z / (a[2] * a[2]))
}

/// Meridian arc length table and inverse for one ellipsoid surface.
struct Meridian {
    axes: [f64; 3],
    theta: Vec<f64>,
    arc: Vec<f64>,
}

impl Meridian {
    fn new(axes: [f64; 3], truncation_z: f64) -> Self {
        let theta_max = (-truncation_z / axes[2]).acos();
        let a = 0.5 * (axes[0] + axes[1]);
        let n = 2000;
        let mut theta = Vec::with_capacity(n + 1);
        let mut arc = Vec::with_capacity(n + 1);
        let speed = |t: f64| ((a * t.cos()).powi(2) + (axes[2] * t.sin()).powi(2)).sqrt();
        let mut s = 0.0;
        for i in 0..=n {
            let t = theta_max * i as f64 / n as f64;
            if i > 0 {
                let t0 = theta_max * (i - 1) as f64 / n as f64;
                s += (t - t0) * (speed(t0) + 4.0 * speed(0.5 * (t0 + t)) + speed(t)) / 6.0;
            }
            theta.push(t);
            arc.push(s);
        }
        Self { axes, theta, arc }
    }

    fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    fn theta_at(&self, rho: f64) -> f64 {
        let s = rho.clamp(0.0, 1.0) * self.length();
        let i = self.arc.partition_point(|&x| x < s).clamp(1, self.arc.len() - 1);
        let w = (s - self.arc[i - 1]) / (self.arc[i] - self.arc[i - 1]);
        self.theta[i - 1] + w * (self.theta[i] - self.theta[i - 1])
    }

    fn point(&self, rho: f64, phi: f64, rim: bool) -> Vec3 {
        let theta = if rim { *self.theta.last().unwrap() } else { self.theta_at(rho) };
        let a = self.axes;
        Vec3::new(
            a[0] * theta.sin() * phi.cos(),
            a[1] * theta.sin() * phi.sin(),
            -a[2] * theta.cos(),
        )
    }
}

/// 2D O-grid on the unit disk: points, quads, and the rim flag per point.
struct DiskGrid {
    points: Vec<[f64; 2]>,
    quads: Vec<[usize; 4]>,
    rim: Vec<bool>,
}

fn disk_grid(nc: usize, rho_c: f64, rings: usize) -> DiskGrid {
    let mut points = Vec::new();
    let block = |i: usize, j: usize| i + (nc + 1) * j;
    for j in 0..=nc {
        for i in 0..=nc {
            let s = -1.0 + 2.0 * i as f64 / nc as f64;
            let t = -1.0 + 2.0 * j as f64 / nc as f64;
            points.push([
                rho_c * s * (1.0 - 0.5 * t * t).sqrt(),
                rho_c * t * (1.0 - 0.5 * s * s).sqrt(),
            ]);
        }
    }
    let mut quads = Vec::new();
    for j in 0..nc {
        for i in 0..nc {
            quads.push([block(i, j), block(i + 1, j), block(i + 1, j + 1), block(i, j + 1)]);
        }
    }
    // block boundary, counter-clockwise from the corner (-1,-1)
    let mut perimeter = Vec::with_capacity(4 * nc);
    perimeter.extend((0..nc).map(|i| block(i, 0)));
    perimeter.extend((0..nc).map(|j| block(nc, j)));
    perimeter.extend((0..nc).map(|i| block(nc - i, nc)));
    perimeter.extend((0..nc).map(|j| block(0, nc - j)));

    let np = perimeter.len();
    let mut prev = perimeter.clone();
    for r in 1..=rings {
        let rho = rho_c + (1.0 - rho_c) * r as f64 / rings as f64;
        let ring: Vec<usize> = perimeter
            .iter()
            .map(|&q| {
                let [x, y] = points[q];
                let psi = y.atan2(x);
                points.push([rho * psi.cos(), rho * psi.sin()]);
                points.len() - 1
            })
            .collect();
        for k in 0..np {
            let k1 = (k + 1) % np;
            quads.push([prev[k], prev[k1], ring[k1], ring[k]]);
        }
        prev = ring;
    }
    let mut rim = vec![false; points.len()];
    for &v in &prev {
        rim[v] = true;
    }
    DiskGrid { points, quads, rim }
}

fn split_quads(grid: &DiskGrid) -> Vec<[usize; 3]> {
    let d = |a: usize, b: usize| {
        let (p, q) = (grid.points[a], grid.points[b]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    };
    let mut tris = Vec::with_capacity(2 * grid.quads.len());
    for &[a, b, c, e] in &grid.quads {
        if d(a, c) <= d(b, e) {
            tris.push([a, b, c]);
            tris.push([a, c, e]);
        } else {
            tris.push([a, b, e]);
            tris.push([b, c, e]);
        }
    }
    tris
}

const PRISM_ROTATION: [[usize; 6]; 6] = [
    [0, 1, 2, 3, 4, 5],
    [1, 2, 0, 4, 5, 3],
    [2, 0, 1, 5, 3, 4],
    [3, 5, 4, 0, 2, 1],
    [4, 3, 5, 1, 0, 2],
    [5, 4, 3, 2, 1, 0],
];

/// Split a prism `[a, b, c, a', b', c']` into three tets; diagonals on the quad
/// faces start at the face's smallest global index.
fn split_prism(p: [usize; 6]) -> [[usize; 4]; 3] {
    let start = (0..6).min_by_key(|&i| p[i]).unwrap();
    let v = PRISM_ROTATION[start].map(|i| p[i]);
    if v[1].min(v[5]) < v[2].min(v[4]) {
        [[v[0], v[1], v[2], v[5]], [v[0], v[1], v[5], v[4]], [v[0], v[4], v[5], v[3]]]
    } else {
        [[v[0], v[1], v[2], v[4]], [v[0], v[4], v[2], v[5]], [v[0], v[4], v[5], v[3]]]
    }
}

/// Tetrahedral mesh of the truncated ventricle shell with target edge length
/// `resolution` (cm), tagged surfaces and analytic rule-based fibers.
pub fn generate_ventricle(resolution: f64, geometry: &VentricleGeometry) -> Result<Mesh> {
    geometry.validate()?;
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(Error::Config("ventricle resolution must be positive".into()));
    }
    let h = resolution;
    let inner = Meridian::new(geometry.inner, geometry.truncation_z);
    let outer = Meridian::new(geometry.outer, geometry.truncation_z);
    let mid = Meridian::new(geometry.axes_at(0.5), geometry.truncation_z);

    let rim_radius = 0.5 * (geometry.axes_at(0.5)[0] + geometry.axes_at(0.5)[1])
        * mid.theta.last().unwrap().sin();
    let nc = ((2.0 * PI * rim_radius / (4.0 * h)).round() as usize).max(2);
    let s = mid.length();
    let rho_c = (nc as f64 * h / (2.0 * s)).clamp(0.1, 0.6);
    let rings = (((1.0 - rho_c) * s / h).round() as usize).max(1);
    let wall = 0.5 * ((geometry.outer[0] - geometry.inner[0]) + (geometry.outer[2] - geometry.inner[2]));
    let layers = ((wall / h).round() as usize).max(1);

    let grid = disk_grid(nc, rho_c, rings);
    let tris = split_quads(&grid);
    let n2d = grid.points.len();

    let mut vertices = Vec::with_capacity(n2d * (layers + 1));
    for k in 0..=layers {
        let w = k as f64 / layers as f64;
        for (q, &[x, y]) in grid.points.iter().enumerate() {
            let rho = x.hypot(y);
            let phi = y.atan2(x);
            let pi = inner.point(rho, phi, grid.rim[q]);
            let po = outer.point(rho, phi, grid.rim[q]);
            vertices.push(pi * (1.0 - w) + po * w);
        }
    }
    let mut tets = Vec::with_capacity(3 * tris.len() * layers);
    for k in 0..layers {
        let (lo, hi) = (k * n2d, (k + 1) * n2d);
        for t in &tris {
            let prism = [lo + t[0], lo + t[1], lo + t[2], hi + t[0], hi + t[1], hi + t[2]];
            tets.extend(split_prism(prism));
        }
    }

    let mut mesh = Mesh::new(vertices, tets)?;
    let tags: Vec<FaceTag> = mesh
        .boundary_faces()
        .iter()
        .map(|f| {
            if f.iter().all(|&v| v < n2d) {
                FaceTag::Endocardium
            } else if f.iter().all(|&v| v >= layers * n2d) {
                FaceTag::Epicardium
            } else if f.iter().all(|&v| grid.rim[v % n2d]) {
                FaceTag::Base
            } else {
                FaceTag::Other
            }
        })
        .collect();
    mesh.set_face_tags(tags)?;

    let frames = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let layer = v / n2d;
            let lambda = if layer == 0 {
                0.0
            } else if layer == layers {
                1.0
            } else {
                transmural_coordinate(geometry, p)
            };
            let e_r = transmural_direction(geometry, p, lambda);
            frame_from_transmural(e_r, lambda, geometry.angle_endo, geometry.angle_epi)
        })
        .collect();
    mesh.set_fiber_frames(frames)?;
    Ok(mesh)
}
