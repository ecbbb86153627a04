//! Blur-aware 3D Gaussian splatting.
//!
//! Reconstructs a sharp 3-D Gaussian scene from blurry training images by
//! jointly optimizing the scene and a small network that proposes per-pixel
//! blur kernels and blending masks, trained coarse-to-fine. Blur is only
//! ever applied to *rendered* images during training; rendering and
//! evaluation always use the clean scene.

pub mod autodiff;
pub mod blur_synth;
pub mod bpn;
pub mod io;
pub mod losses;
pub mod rasterizer;
pub mod scene;
pub mod trainer;
pub mod real;

pub use real::Real;
