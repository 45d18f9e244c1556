//! Task-driven selection of CT projection subsets.
//!
//! A per-projection regressor produces a score vector, which is turned into
//! soft ranks by a Euclidean projection onto the permutahedron and then into a
//! binary top-k mask by a straight-through threshold. Supervision comes from a
//! detectability-driven greedy selection under a pairwise great-circle
//! separation constraint. The crate also contains the simulation side needed
//! to exercise the method end to end: spherical scan geometry, analytic
//! box-and-sphere specimens, ART reconstruction and ROI image-quality metrics.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`softrank`] | hard and soft descending ranks, isotonic regression, JVP |
//! | [`ste`] | top-k threshold with identity backward pass |
//! | [`geometry`] | Fibonacci sphere, haversine distance, source/detector poses |
//! | [`phantom`] | specimens, exact line integrals, projection and voxelization |
//! | [`detectability`] | task function and projection-dependent detectability |
//! | [`labeler`] | greedy and exhaustive constrained top-k label generation |
//! | [`recon`] | Siddon system rows and ART |
//! | [`metrics`] | ROI RMSE and SSIM |
//! | [`model`] | regressor, BCE, Adam and the training loop |
//! | [`io`] | on-disk formats |
//! | [`pipeline`] | run configuration and the staged driver used by the CLI |

pub mod detectability;
pub mod error;
pub mod geometry;
pub mod io;
pub mod labeler;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod softrank;
pub mod ste;

pub use error::{Error, Result};
