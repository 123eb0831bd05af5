//! Numerical toolkit for smooth origin-symmetric convex bodies: support
//! functions on spherical grids, centro-affine calculus, the spectrum of the
//! Hilbert–Brunn–Minkowski operator, curvature pinching and uniqueness
//! certificates for the even L^p-Minkowski problem.

pub mod body;
pub mod certify;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod spectral;
pub mod sphere;

pub use body::{BodySpec, Family, HarmonicMode, SupportField, ValidityReport};
pub use certify::{Certificate, CertificateStatus, InequalityReport};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowState};
pub use geometry::{CentroAffineFrame, EllMode, PinchingReport};
pub use spectral::{OperatorSystem, ParityFilter, SpectralResult};
pub use sphere::{Derivatives, GridKey, HarmonicBasis, Parity, ScalarField, SphereGrid};
