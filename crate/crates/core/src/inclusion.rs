//! Spherical inclusions, their discrete footprint, and the sphere polarization tensor.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{ConductivityField, ConductivitySpec, Tensor};
use crate::mesh::{Mesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionSpec {
    pub center: [f64; 3],
    pub radius: f64,
    /// Inner conductivity; in anisotropic runs the background tensor is scaled by
    /// `k1 / k_ref` with `k_ref` the background fiber eigenvalue.
    pub k1: f64,
    /// Required clearance between the inclusion and the boundary, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
}

impl InclusionSpec {
    pub fn new(center: Vec3, radius: f64, k1: f64) -> Self {
        Self {
            center: [center.x, center.y, center.z],
            radius,
            k1,
            separation: None,
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("inclusion radius must be positive".into()));
        }
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::Config("inclusion conductivity k1 must be positive".into()));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("inclusion center must be finite".into()));
        }
        Ok(())
    }

    pub fn ball_volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.radius.powi(3)
    }

    /// Whether `dist(inclusion, boundary) >= separation` (always true without a
    /// separation requirement, false when the center lies outside the mesh).
    pub fn is_well_separated(&self, mesh: &Mesh) -> bool {
        let Some(d0) = self.separation else {
            return true;
        };
        let c = self.center();
        mesh.locate(&c).is_some() && mesh.distance_to_boundary(&c) - self.radius >= d0
    }
}

/// Elements whose centroid lies inside an inclusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementSet {
    elements: Vec<usize>,
    n_tets: usize,
    volume: f64,
    warning: Option<String>,
}

impl ElementSet {
    pub fn empty(mesh: &Mesh) -> Self {
        Self {
            elements: Vec::new(),
            n_tets: mesh.n_tets(),
            volume: 0.0,
            warning: None,
        }
    }

    pub fn from_elements(mesh: &Mesh, mut elements: Vec<usize>) -> Result<Self> {
        elements.sort_unstable();
        elements.dedup();
        if let Some(&e) = elements.iter().find(|&&e| e >= mesh.n_tets()) {
            return Err(Error::Invalid(format!("element {e} does not exist")));
        }
        let volume = elements.iter().map(|&e| mesh.tet_volume(e)).sum();
        Ok(Self {
            elements,
            n_tets: mesh.n_tets(),
            volume,
            warning: None,
        })
    }

    pub fn elements(&self) -> &[usize] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Discrete inclusion volume `|omega|_h`.
    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    /// `true` for elements inside the inclusion.
    pub fn inside_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_tets];
        for &e in &self.elements {
            m[e] = true;
        }
        m
    }

    /// `true` for elements carrying the ionic current (outside the inclusion).
    pub fn active_mask(&self) -> Vec<bool> {
        self.inside_mask().into_iter().map(|b| !b).collect()
    }
}

pub fn classify_elements(mesh: &Mesh, inc: &InclusionSpec) -> ElementSet {
    let c = inc.center();
    let r2 = inc.radius * inc.radius;
    let elements: Vec<usize> = (0..mesh.n_tets())
        .filter(|&e| (mesh.tet_centroid(e) - c).norm_squared() <= r2)
        .collect();
    let volume = elements.iter().map(|&e| mesh.tet_volume(e)).sum();
    let warning = elements.is_empty().then(|| {
        format!(
            "inclusion at ({:.3}, {:.3}, {:.3}) with radius {:.3} contains no element centroid; \
             it is below mesh resolution or outside the domain",
            c.x, c.y, c.z, inc.radius
        )
    });
    ElementSet {
        elements,
        n_tets: mesh.n_tets(),
        volume,
        warning,
    }
}

/// Conductivity inside the inclusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerConductivity {
    /// `k1 I`.
    Isotropic(f64),
    /// The background tensor scaled by a factor.
    Scaled(f64),
}

impl InnerConductivity {
    pub fn for_background(spec: &ConductivitySpec, k1: f64) -> Self {
        if spec.is_scalar() {
            InnerConductivity::Isotropic(k1)
        } else {
            InnerConductivity::Scaled(k1 / spec.reference())
        }
    }
}

pub fn perturbed_conductivity(
    k0: &ConductivityField,
    elements: &ElementSet,
    inner: InnerConductivity,
) -> ConductivityField {
    let mut tensors = k0.tensors().to_vec();
    for &e in elements.elements() {
        tensors[e] = match inner {
            InnerConductivity::Isotropic(k1) => Tensor::identity() * k1,
            InnerConductivity::Scaled(s) => tensors[e] * s,
        };
    }
    ConductivityField::from_tensors_unchecked(tensors)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationTensor {
    pub m: Matrix3<f64>,
    /// Set when an isotropic formula stands in for an anisotropic background.
    pub surrogate: bool,
}

/// `M = 3 k0 / (2 k0 + k1) I`.
pub fn polarization_sphere(k0: f64, k1: f64) -> Result<PolarizationTensor> {
    if !(k0 > 0.0 && k1 > 0.0 && k0.is_finite() && k1.is_finite()) {
        return Err(Error::Invalid("polarization needs positive conductivities".into()));
    }
    Ok(PolarizationTensor {
        m: Matrix3::identity() * (3.0 * k0 / (2.0 * k0 + k1)),
        surrogate: false,
    })
}

/// Polarization tensor for a background description; anisotropic backgrounds use
/// the isotropic formula with the fiber eigenvalue.
pub fn polarization_for(spec: &ConductivitySpec, k1: f64) -> Result<PolarizationTensor> {
    let mut m = polarization_sphere(spec.reference(), k1)?;
    m.surrogate = !spec.is_scalar();
    Ok(m)
}
