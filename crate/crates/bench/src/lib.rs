//! Fixtures shared by the benchmarks.

use ischemia_core::mesh::{generate_box, BoxTags, FaceTag, Mesh};
use ischemia_core::scenario::InitialBand;
use ischemia_core::{BoundarySubset, TimeGrid};

/// Unit-aspect box with the top plane tagged as the measured surface.
pub fn bench_box(n: usize) -> Mesh {
    let tags = BoxTags {
        z_max: FaceTag::Endocardium,
        ..BoxTags::default()
    };
    generate_box([n, n, n], [2.0, 2.0, 2.0], tags).expect("valid box")
}

/// Stimulus band under the measured plane.
pub fn bench_u0(mesh: &Mesh) -> Vec<f64> {
    InitialBand {
        depth: 0.3,
        ..InitialBand::default()
    }
    .evaluate(mesh)
    .expect("tagged box")
}

pub fn bench_gamma(mesh: &Mesh) -> BoundarySubset {
    BoundarySubset::from_tags(mesh, &[FaceTag::Endocardium]).expect("tagged box")
}

pub fn bench_grid() -> TimeGrid {
    TimeGrid::new(5.0, 25).expect("valid grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_consistent() {
        let mesh = bench_box(4);
        assert_eq!(bench_u0(&mesh).len(), mesh.n_vertices());
        assert_eq!(bench_gamma(&mesh).nodes().len(), 25);
        assert_eq!(bench_grid().n_frames(), 26);
    }
}
