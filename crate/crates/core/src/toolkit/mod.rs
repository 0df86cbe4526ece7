//! Phantoms, preprocessing, metrics, visualization exports and file formats.

pub mod io;
pub mod metrics;
pub mod mip;
pub mod phantom;
pub mod preprocess;

pub use io::{load_sinogram, load_volume, save_sinogram, save_volume, VolumeHeader};
pub use metrics::{evaluate, psnr, ssim, MetricReport};
pub use mip::{mip, Axis, Image};
pub use phantom::shepp_logan_3d;
pub use preprocess::{normalize_volume, resize_trilinear};
