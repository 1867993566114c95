//! Explicit radiance fields: per-voxel SH coefficients plus a raw density,
//! queried by trilinear interpolation and rendered by alpha compositing.

mod prune;
mod render;
pub mod sh;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::sparse::{CoordSet, SparseTensor};

pub use prune::{prune_field, prune_mask, InputProximity, PruneConfig, PruneRule};
pub use render::{
    composite, render_image, render_opacity, render_ray, render_rays, render_rays_composed,
    render_rays_on_tape, CompositeOp, InterpolateOp, RayResult, ShColorOp,
};
pub use sh::{sh_basis, sh_to_color, SH_BASIS, SH_COEFFS};

/// 27 SH coefficients followed by one raw density.
pub const FIELD_CHANNELS: usize = SH_COEFFS + 1;
pub const DENSITY_CHANNEL: usize = SH_COEFFS;

pub const DEFAULT_SHIFT: f64 = -6.0;
pub const DEFAULT_EMPTY_DENSITY: f64 = -10.0;

pub(crate) const ABSENT: u32 = u32::MAX;
const SNAP: f64 = 1e-10;
const DENSE_LOOKUP_LIMIT: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    /// Distance between consecutive samples.
    pub step: f64,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Shift added to the raw density before the softplus.
    pub shift: f64,
    /// Raw density used where no voxel is stored.
    pub empty_density: f64,
}

impl RenderSettings {
    pub fn new(step: f64, near: f64, far: f64) -> Self {
        Self {
            step,
            near,
            far,
            background: [1.0; 3],
            shift: DEFAULT_SHIFT,
            empty_density: DEFAULT_EMPTY_DENSITY,
        }
    }

    /// Half-cell steps for a field with the given cell size.
    pub fn for_cell(cell_size: f64, near: f64, far: f64) -> Self {
        Self::new(0.5 * cell_size, near, far)
    }

    pub fn with_step(&self, step: f64) -> Self {
        Self {
            step,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!(
                "render step must be positive, got {}",
                self.step
            )));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if !(self.shift.is_finite() && self.empty_density.is_finite()) {
            return Err(Error::invalid(
                "render shift and empty density must be finite",
            ));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        ((self.far - self.near) / self.step).floor().max(0.0) as usize
    }

    #[inline]
    pub fn sample_distance(&self, i: usize) -> f64 {
        self.near + (i as f64 + 0.5) * self.step
    }
}

/// Eight interpolation corners of a point: rows (or [`ABSENT`]) and weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corners {
    pub rows: [u32; 8],
    pub weights: [f64; 8],
}

impl Corners {
    pub fn any_present(&self) -> bool {
        self.rows.iter().any(|&r| r != ABSENT)
    }
}

#[derive(Clone, Debug)]
struct DenseLookup {
    min_cell: [i64; 3],
    dims: [usize; 3],
    rows: Vec<u32>,
}

/// Coordinates of a field plus the world mapping and a fast cell lookup.
#[derive(Clone, Debug)]
pub struct FieldGeometry {
    coords: Arc<CoordSet>,
    voxel_size: f64,
    origin: Vec3,
    dense: Option<DenseLookup>,
    support: Option<Aabb>,
}

impl PartialEq for FieldGeometry {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
            && self.voxel_size == other.voxel_size
            && self.origin == other.origin
    }
}

impl FieldGeometry {
    pub fn new(coords: Arc<CoordSet>, voxel_size: f64, origin: Vec3) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::invalid(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("field origin must be finite"));
        }
        let s = coords.stride() as i64;
        let (dense, support) = match coords.extent() {
            None => (None, None),
            Some((lo, hi)) => {
                let min_cell = [lo[0] as i64 / s, lo[1] as i64 / s, lo[2] as i64 / s];
                let dims = [0, 1, 2].map(|a| ((hi[a] as i64 - lo[a] as i64) / s + 1) as usize);
                let cells = dims.iter().product::<usize>();
                let dense = (cells <= DENSE_LOOKUP_LIMIT).then(|| {
                    let mut rows = vec![ABSENT; cells];
                    for (r, c) in coords.coords().iter().enumerate() {
                        let idx = [0, 1, 2].map(|a| (c[a] as i64 / s - min_cell[a]) as usize);
                        rows[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]] = r as u32;
                    }
                    DenseLookup {
                        min_cell,
                        dims,
                        rows,
                    }
                });
                let cell = voxel_size * s as f64;
                // trilinear support of a voxel reaches one cell beyond its center
                let min = Vec3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * voxel_size + origin
                    - Vec3::repeat(0.5 * cell);
                let max = Vec3::new(hi[0] as f64, hi[1] as f64, hi[2] as f64) * voxel_size
                    + origin
                    + Vec3::repeat(1.5 * cell);
                (dense, Some(Aabb { min, max }))
            }
        };
        Ok(Self {
            coords,
            voxel_size,
            origin,
            dense,
            support,
        })
    }

    pub fn coords(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    /// World size of one voxel at this field's stride.
    pub fn cell_size(&self) -> f64 {
        self.voxel_size * self.coords.stride() as f64
    }

    /// Region outside of which every sample sees only empty space.
    pub fn support(&self) -> Option<Aabb> {
        self.support
    }

    pub fn center(&self, row: usize) -> Vec3 {
        self.coords.center(row, self.voxel_size, &self.origin)
    }

    #[inline]
    fn row_at_cell(&self, cell: [i64; 3]) -> u32 {
        match &self.dense {
            Some(d) => {
                let mut idx = 0usize;
                for a in 0..3 {
                    let o = cell[a] - d.min_cell[a];
                    if o < 0 || o as usize >= d.dims[a] {
                        return ABSENT;
                    }
                    idx = idx * d.dims[a] + o as usize;
                }
                d.rows[idx]
            }
            None => {
                let s = self.coords.stride() as i64;
                let c = cell.map(|v| v * s);
                if c.iter().any(|v| v.abs() > i32::MAX as i64) {
                    return ABSENT;
                }
                self.coords
                    .row_of(&c.map(|v| v as i32))
                    .map_or(ABSENT, |r| r as u32)
            }
        }
    }

    #[inline]
    pub(crate) fn corners(&self, p: &Vec3) -> Corners {
        let cell = self.cell_size();
        let u = (p - self.origin) / cell - Vec3::repeat(0.5);
        let mut base = [u.x.floor(), u.y.floor(), u.z.floor()];
        let mut f = [u.x - base[0], u.y - base[1], u.z - base[2]];
        // snap rounding noise so voxel centers hit their voxel exactly
        for a in 0..3 {
            if f[a] < SNAP {
                f[a] = 0.0;
            } else if f[a] > 1.0 - SNAP {
                base[a] += 1.0;
                f[a] = 0.0;
            }
        }
        let b = base.map(|v| v as i64);
        let mut rows = [ABSENT; 8];
        let mut weights = [0.0; 8];
        for (n, (r, w)) in rows.iter_mut().zip(weights.iter_mut()).enumerate() {
            let (ax, ay, az) = ((n >> 2) & 1, (n >> 1) & 1, n & 1);
            *r = self.row_at_cell([b[0] + ax as i64, b[1] + ay as i64, b[2] + az as i64]);
            let wx = if ax == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if ay == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if az == 1 { f[2] } else { 1.0 - f[2] };
            *w = wx * wy * wz;
        }
        Corners { rows, weights }
    }
}

/// Explicit radiance field; feature rows hold [`FIELD_CHANNELS`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    geometry: Arc<FieldGeometry>,
    feats: Vec<f64>,
}

impl RadianceField {
    pub fn new(tensor: SparseTensor, voxel_size: f64, origin: Vec3) -> Result<Self> {
        if tensor.channels() != FIELD_CHANNELS {
            return Err(Error::invalid(format!(
                "radiance fields have {FIELD_CHANNELS} channels, got {}",
                tensor.channels()
            )));
        }
        let geometry = Arc::new(FieldGeometry::new(
            tensor.coord_set().clone(),
            voxel_size,
            origin,
        )?);
        Ok(Self {
            geometry,
            feats: tensor.feats().to_vec(),
        })
    }

    pub fn from_geometry(geometry: Arc<FieldGeometry>, feats: Vec<f64>) -> Result<Self> {
        if feats.len() != geometry.len() * FIELD_CHANNELS {
            return Err(Error::invalid(
                "field feature count does not match its coordinates",
            ));
        }
        Ok(Self { geometry, feats })
    }

    pub fn geometry(&self) -> &Arc<FieldGeometry> {
        &self.geometry
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feats_mut(&mut self) -> &mut [f64] {
        &mut self.feats
    }

    pub fn feat(&self, row: usize) -> &[f64] {
        &self.feats[row * FIELD_CHANNELS..(row + 1) * FIELD_CHANNELS]
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn voxel_size(&self) -> f64 {
        self.geometry.voxel_size
    }

    pub fn stride(&self) -> i32 {
        self.geometry.stride()
    }

    pub fn origin(&self) -> Vec3 {
        self.geometry.origin
    }

    pub fn to_tensor(&self) -> SparseTensor {
        SparseTensor::from_set(
            self.geometry.coords.clone(),
            self.feats.clone(),
            FIELD_CHANNELS,
        )
        .expect("field invariants hold")
    }

    /// Trilinearly blended SH coefficients and raw density at `p`; absent
    /// corners contribute zero coefficients and `empty_density`.
    pub fn interpolate(&self, p: &Vec3, empty_density: f64) -> ([f64; SH_COEFFS], f64) {
        let corners = self.geometry.corners(p);
        let mut k = [0.0; SH_COEFFS];
        let mut raw = 0.0;
        for (&r, &w) in corners.rows.iter().zip(&corners.weights) {
            if r == ABSENT {
                raw += w * empty_density;
                continue;
            }
            let f = self.feat(r as usize);
            for (a, v) in k.iter_mut().zip(f) {
                *a += w * v;
            }
            raw += w * f[DENSITY_CHANNEL];
        }
        (k, raw)
    }
}
