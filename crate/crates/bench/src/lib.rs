//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use hbm_core::geometry::{frame, CentroAffineFrame};
use hbm_core::{body, BodySpec, SphereGrid};

pub fn grid(dim: usize, resolution: usize) -> Arc<SphereGrid> {
    SphereGrid::new(dim, resolution).expect("supported grid").shared()
}

/// Frame of a mildly anisotropic body on the circle.
pub fn planar_frame(resolution: usize) -> CentroAffineFrame {
    let spec = BodySpec::perturbed_ball(2, 1.0, &[(2, 0.05), (4, 0.01)]);
    frame(&body::sample_valid(&spec, &grid(2, resolution)).expect("valid body")).expect("frame")
}

/// Frame of a triaxial ellipsoid on S^2.
pub fn spatial_frame(resolution: usize) -> CentroAffineFrame {
    let spec = BodySpec::ellipsoid(&[1.0, 1.5, 2.0]);
    frame(&body::sample_valid(&spec, &grid(3, resolution)).expect("valid body")).expect("frame")
}
