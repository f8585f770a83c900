//! Planning pipeline for trochlear reshaping from clinical MR scans.
//!
//! - [`volume`]: voxel grids, GVOL/NIfTI IO, trilinear sampling, Dice
//! - [`phantom`]: parametric trochlea phantoms and simulated thick-slice scans
//! - [`inr`]: Gabor-activated coordinate MLP fusing three orthogonal scans
//! - [`wavelet`]: level-1 orthonormal 3D Haar transform
//! - [`diffusion`]: wavelet-domain conditional diffusion for label inpainting
//! - [`mesh`]: marching cubes, surface distance maps, STL/PLY export
//! - [`morphometrics`]: sulcus angle, groove depth, Wilcoxon signed-rank test
//! - [`pipeline`]: configuration, staged execution and run manifests

pub mod volume;
pub mod phantom;
pub mod inr;
pub mod nn;
pub mod wavelet;
pub mod morphometrics;
pub mod mesh;
pub mod diffusion;
pub mod pipeline;
