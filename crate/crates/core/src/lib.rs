//! Explicit sparse radiance fields completed from a handful of RGB-D views.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] cameras, rays, back-projection and rigid augmentation.
//! * [`sparse`] sparse voxel tensors, kernel maps and the sparse layers.
//! * [`autodiff`] a reverse-mode tape over dense feature blocks.
//! * [`net`] the sparse encoder-decoder that maps colored voxels to fields.
//! * [`field`] spherical harmonics, interpolation and volume rendering.
//! * [`objectives`] losses and image/depth metrics.
//! * [`pipeline`] synthetic scenes, training, baking and checkpoints.
//! * [`io`] on-disk formats for fields, parameters, checkpoints and datasets.

pub mod autodiff;
pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod net;
pub mod objectives;
pub mod pipeline;
pub mod raster;
pub mod sparse;

pub use error::{Error, Result};

pub use geometry::{Aabb, Camera, PointCloud, Pose, Ray, RgbdFrame, Vec3};

pub use field::{RadianceField, RayResult, RenderSettings};
pub use net::{NetConfig, NetParams, StageOutput};
pub use raster::Image;
pub use sparse::{Coord, KernelMap, SparseTensor};
