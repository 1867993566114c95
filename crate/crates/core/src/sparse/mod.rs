//! Sparse voxel tensors and the layers that operate on them.
//!
//! A tensor is a set of integer voxel coordinates (all multiples of the
//! tensor's stride) with one feature row per coordinate. Coordinates are
//! indexed by an exact hash map, so kernel-map lookups never miss or alias.

mod conv;
mod kernel_map;

use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

pub(crate) use conv::{conv_forward, conv_input_grad, conv_weight_grad};
pub use conv::{generative_transposed_conv, prune_layer, sparse_conv, ConvWeights};
pub use kernel_map::{build_kernel_map, build_transposed_kernel_map, kernel_offsets, KernelMap};

pub type Coord = [i32; 3];

const COORD_BIAS: i64 = 1 << 20;
const COORD_LIMIT: i32 = (1 << 20) - 1;

#[inline]
fn pack(c: &Coord) -> u64 {
    let x = (c[0] as i64 + COORD_BIAS) as u64;
    let y = (c[1] as i64 + COORD_BIAS) as u64;
    let z = (c[2] as i64 + COORD_BIAS) as u64;
    (x << 42) | (y << 21) | z
}

#[inline]
fn floor_to(v: i32, step: i32) -> i32 {
    v.div_euclid(step) * step
}

/// Unique voxel coordinates at a common stride, with an exact index.
#[derive(Clone, Debug)]
pub struct CoordSet {
    coords: Vec<Coord>,
    stride: i32,
    index: FxHashMap<u64, u32>,
}

impl CoordSet {
    pub fn new(coords: Vec<Coord>, stride: i32) -> Result<Self> {
        if stride < 1 {
            return Err(Error::invalid(format!(
                "stride must be positive, got {stride}"
            )));
        }
        let mut index = FxHashMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (row, c) in coords.iter().enumerate() {
            if c.iter().any(|v| v.abs() > COORD_LIMIT) {
                return Err(Error::invalid(format!("coordinate {c:?} out of range")));
            }
            if c.iter().any(|v| v.rem_euclid(stride) != 0) {
                return Err(Error::invalid(format!(
                    "coordinate {c:?} not divisible by stride {stride}"
                )));
            }
            if index.insert(pack(c), row as u32).is_some() {
                return Err(Error::invalid(format!("duplicate coordinate {c:?}")));
            }
        }
        Ok(Self {
            coords,
            stride,
            index,
        })
    }

    /// Deduplicates in first-appearance order; all inputs must share `stride`.
    fn from_iter_dedup(iter: impl Iterator<Item = Coord>, stride: i32) -> Self {
        let mut coords = Vec::new();
        let mut index = FxHashMap::default();
        for c in iter {
            let next = coords.len() as u32;
            index.entry(pack(&c)).or_insert_with(|| {
                coords.push(c);
                next
            });
        }
        Self {
            coords,
            stride,
            index,
        }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        if c.iter().any(|v| v.abs() > COORD_LIMIT) {
            return None;
        }
        self.index.get(&pack(c)).map(|&r| r as usize)
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.row_of(c).is_some()
    }

    /// Coarsens to `stride * factor`, keeping first-appearance order.
    pub fn downsample(&self, factor: i32) -> Result<CoordSet> {
        if factor < 1 {
            return Err(Error::invalid("downsample factor must be positive"));
        }
        let s = self.stride * factor;
        Ok(Self::from_iter_dedup(
            self.coords
                .iter()
                .map(|c| [floor_to(c[0], s), floor_to(c[1], s), floor_to(c[2], s)]),
            s,
        ))
    }

    /// Union of `c + (stride / up) * delta` over the kernel offset cube.
    pub fn generate(&self, kernel: usize, up: i32) -> Result<CoordSet> {
        if up < 1 || self.stride % up != 0 {
            return Err(Error::invalid(format!(
                "stride {} not divisible by up-sampling factor {up}",
                self.stride
            )));
        }
        let s = self.stride / up;
        let offsets = kernel_offsets(kernel)?;
        Ok(Self::from_iter_dedup(
            self.coords.iter().flat_map(|c| {
                offsets
                    .iter()
                    .map(move |d| [c[0] + s * d[0], c[1] + s * d[1], c[2] + s * d[2]])
            }),
            s,
        ))
    }

    /// Rows selected by `keep`, order preserved.
    pub fn select(&self, keep: &[bool]) -> CoordSet {
        Self::from_iter_dedup(
            self.coords
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(c, _)| *c),
            self.stride,
        )
    }

    /// World-space center of the voxel at `row`.
    pub fn center(&self, row: usize, voxel_size: f64, origin: &Vec3) -> Vec3 {
        let c = &self.coords[row];
        let half = 0.5 * self.stride as f64;
        Vec3::new(
            (c[0] as f64 + half) * voxel_size,
            (c[1] as f64 + half) * voxel_size,
            (c[2] as f64 + half) * voxel_size,
        ) + origin
    }

    /// Component-wise min and max over all coordinates.
    pub fn extent(&self) -> Option<(Coord, Coord)> {
        let first = *self.coords.first()?;
        Some(
            self.coords
                .iter()
                .fold((first, first), |(mut lo, mut hi), c| {
                    for i in 0..3 {
                        lo[i] = lo[i].min(c[i]);
                        hi[i] = hi[i].max(c[i]);
                    }
                    (lo, hi)
                }),
        )
    }
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.stride == other.stride && self.coords == other.coords
    }
}

/// Coordinates plus one feature row of width `channels` per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    coords: Arc<CoordSet>,
    feats: Vec<f64>,
    channels: usize,
}

impl SparseTensor {
    pub fn new(coords: Vec<Coord>, feats: Vec<f64>, channels: usize, stride: i32) -> Result<Self> {
        Self::from_set(Arc::new(CoordSet::new(coords, stride)?), feats, channels)
    }

    pub fn from_set(coords: Arc<CoordSet>, feats: Vec<f64>, channels: usize) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::invalid(format!(
                "{} feature values for {} coordinates of width {channels}",
                feats.len(),
                coords.len()
            )));
        }
        Ok(Self {
            coords,
            feats,
            channels,
        })
    }

    pub fn empty(channels: usize, stride: i32) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), channels, stride)
    }

    pub fn coord_set(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn coords(&self) -> &[Coord] {
        self.coords.coords()
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feats_mut(&mut self) -> &mut [f64] {
        &mut self.feats
    }

    #[inline]
    pub fn feat(&self, row: usize) -> &[f64] {
        &self.feats[row * self.channels..(row + 1) * self.channels]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        self.coords.row_of(c)
    }
}

/// Voxelizes a colored cloud at stride 1; colors of points sharing a voxel are averaged.
pub fn quantize(cloud: &PointCloud, voxel_size: f64) -> Result<SparseTensor> {
    quantize_with_origin(cloud, voxel_size, &Vec3::zeros())
}

pub fn quantize_with_origin(
    cloud: &PointCloud,
    voxel_size: f64,
    origin: &Vec3,
) -> Result<SparseTensor> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::invalid(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if cloud.is_empty() {
        return Err(Error::invalid("cannot quantize an empty point cloud"));
    }
    let mut index: FxHashMap<u64, usize> = FxHashMap::default();
    let mut coords = Vec::new();
    let mut sums: Vec<[f64; 3]> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    for (p, color) in cloud.positions.iter().zip(&cloud.colors) {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("point {p:?}")));
        }
        let q = (p - origin) / voxel_size;
        let c = [q.x.floor() as i32, q.y.floor() as i32, q.z.floor() as i32];
        if c.iter().any(|v| v.abs() > COORD_LIMIT) {
            return Err(Error::invalid(format!(
                "point {p:?} outside coordinate range"
            )));
        }
        let row = *index.entry(pack(&c)).or_insert_with(|| {
            coords.push(c);
            sums.push([0.0; 3]);
            counts.push(0);
            coords.len() - 1
        });
        for k in 0..3 {
            sums[row][k] += color[k];
        }
        counts[row] += 1;
    }
    let feats = sums
        .iter()
        .zip(&counts)
        .flat_map(|(s, &n)| s.map(|v| v / n as f64))
        .collect();
    SparseTensor::new(coords, feats, 3, 1)
}
