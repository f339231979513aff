//! Probabilistic diffeomorphic registration over stationary velocity fields.
//!
//! A velocity field `v` on a voxel lattice defines a deformation `φ = exp(v)`
//! by integrating the flow `∂φ/∂t = v(φ)` to unit time. Registration fits a
//! diagonal (or smoothed) Gaussian posterior over `v` by minimizing
//! an image-matching term, an optional surface-matching term, and the KL
//! divergence to a Laplacian smoothness prior.
//!
//! ```
//! use svfreg::{integrate::exp_ss, GridSpec, VectorField};
//!
//! let grid = GridSpec::cube(8).unwrap();
//! let v = VectorField::constant(grid, [0.5, 0.0, 0.0]);
//! let phi = exp_ss(&v, 7).unwrap();
//! assert!((phi.vectors()[0][0] - 0.5).abs() < 1e-12);
//! ```

pub mod adam;
pub mod error;
pub mod grid;
pub mod integrate;
mod interp;
pub mod loss;
pub mod metrics;
pub mod optimize;
pub mod prob;
pub mod surface;
pub mod synth;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{identity_map, resample_field, GridSpec, SegmentationMap, Vec3, VectorField, Volume};
pub use integrate::{IntegrationMethod, IntegratorConfig};
pub use loss::{LossBreakdown, SurfaceDistance};
pub use optimize::{register, Registration, RegistrationConfig, RegistrationReport};
pub use prob::{CovarianceMode, Hyperparams, PosteriorParams, PriorParams};
pub use surface::SurfaceData;
