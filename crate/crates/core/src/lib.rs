//! Short-glass-fiber semantic segmentation from CT volumes, on the CPU.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! 1. **`volgrid`** – dense volume representation, VXG1 file I/O,
//!    normalization, slicing and patch extraction.
//! 2. **`phantom`** – synthetic SFRP scans: capsule scenes, partial-volume
//!    rasterization, PSF blur and noise, matched MR/LR pairs.
//! 3. **`filters`** – separable Gaussian derivative filtering, Hessian and
//!    structure tensor fields, analytic 3x3 symmetric eigenvalues.
//! 4. **`baselines`** – Otsu thresholding, the best-threshold oracle,
//!    multiscale Frangi vesselness and a random-forest voxel classifier.
//! 5. **`autodiff`** – a minimal reverse-mode engine with exactly the ops the
//!    networks need (3^d convolution, batch norm, ReLU, softmax
//!    cross-entropy, Adam).
//! 6. **`model`** – the Shallow/Deep x 2D/3D residual fully convolutional
//!    architectures plus checkpoint I/O.
//! 7. **`train`** – patch sampling, flip/rotate augmentation and the
//!    fixed-iteration Adam training loop.
//! 8. **`infer`** – slice-wise 2D prediction and overlapping-patch 3D
//!    prediction with mean blending.
//! 9. **`metrics`** – confusion tallies, the Dice coefficient and error-map
//!    rendering.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod filters;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod train;
pub mod volgrid;

pub use error::{Error, Result};
pub use metrics::{ConfusionCounts, DiceReport};
pub use model::{Checkpoint, Model, ModelConfig, Variant};
pub use phantom::{FiberCapsule, FiberScene, PhantomSpec};
pub use volgrid::{Dims, LabelVolume, PatchRef, Volume};
