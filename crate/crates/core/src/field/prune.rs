//! Removal of low-opacity voxels that are far from the observed input.

use std::sync::Arc;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::{FieldGeometry, RadianceField, DENSITY_CHANNEL, FIELD_CHANNELS};
use crate::autodiff::softplus;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::sparse::CoordSet;

/// Which side of the distance threshold is prunable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneRule {
    /// Prune transparent voxels at least `tau_dist` from every input voxel.
    #[default]
    FarFromInput,
    /// Prune transparent voxels within `tau_dist` of some input voxel.
    NearInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub tau_alpha: f64,
    /// Meters.
    pub tau_dist: f64,
    #[serde(default)]
    pub rule: PruneRule,
}

impl PruneConfig {
    pub fn new(tau_alpha: f64, tau_dist: f64) -> Self {
        Self {
            tau_alpha,
            tau_dist,
            rule: PruneRule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau_alpha) {
            return Err(Error::invalid(format!(
                "tau_alpha must lie in [0, 1), got {}",
                self.tau_alpha
            )));
        }
        if !(self.tau_dist >= 0.0 && self.tau_dist.is_finite()) {
            return Err(Error::invalid(format!(
                "tau_dist must be non-negative, got {}",
                self.tau_dist
            )));
        }
        Ok(())
    }
}

/// Bucketed point set answering "closest point within r" queries.
pub struct InputProximity {
    bucket: f64,
    radius: f64,
    buckets: FxHashMap<[i64; 3], Vec<Vec3>>,
}

impl InputProximity {
    pub fn new(points: impl IntoIterator<Item = Vec3>, radius: f64) -> Self {
        let bucket = radius.max(1e-6);
        let mut buckets: FxHashMap<[i64; 3], Vec<Vec3>> = FxHashMap::default();
        for p in points {
            buckets.entry(Self::key(&p, bucket)).or_default().push(p);
        }
        Self {
            bucket,
            radius,
            buckets,
        }
    }

    fn key(p: &Vec3, bucket: f64) -> [i64; 3] {
        [p.x, p.y, p.z].map(|v| (v / bucket).floor() as i64)
    }

    /// Smallest distance to a point no farther than the construction radius.
    pub fn nearest_within(&self, p: &Vec3) -> Option<f64> {
        let k = Self::key(p, self.bucket);
        let mut best: Option<f64> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(pts) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for q in pts {
                        let d = (p - q).norm();
                        if d <= self.radius && best.is_none_or(|b| d < b) {
                            best = Some(d);
                        }
                    }
                }
            }
        }
        best
    }
}

/// Per-voxel keep flags for raw densities at the given centers.
pub fn prune_mask(
    raw_density: &[f64],
    centers: &[Vec3],
    input: &InputProximity,
    config: &PruneConfig,
    step: f64,
    shift: f64,
) -> Vec<bool> {
    raw_density
        .iter()
        .zip(centers)
        .map(|(&raw, p)| {
            let alpha = -(-softplus(raw + shift) * step).exp_m1();
            if alpha > config.tau_alpha {
                return true;
            }
            let nearest = input.nearest_within(p);
            let distance_condition = match config.rule {
                PruneRule::FarFromInput => nearest.is_none_or(|d| d >= config.tau_dist),
                PruneRule::NearInput => nearest.is_some(),
            };
            !distance_condition
        })
        .collect()
}

/// Field with prunable voxels removed; `input` shares the field's voxel
/// size and origin.
pub fn prune_field(
    field: &RadianceField,
    input: &CoordSet,
    config: &PruneConfig,
    step: f64,
    shift: f64,
) -> Result<RadianceField> {
    config.validate()?;
    let geom = field.geometry();
    let (v, o) = (geom.voxel_size(), geom.origin());
    let proximity = InputProximity::new(
        (0..input.len()).map(|r| input.center(r, v, &o)),
        config.tau_dist,
    );
    let raw: Vec<f64> = (0..field.len())
        .map(|r| field.feat(r)[DENSITY_CHANNEL])
        .collect();
    let centers: Vec<Vec3> = (0..field.len()).map(|r| geom.center(r)).collect();
    let keep = prune_mask(&raw, &centers, &proximity, config, step, shift);
    let coords = Arc::new(geom.coords().select(&keep));
    let feats = field
        .feats()
        .chunks(FIELD_CHANNELS)
        .zip(&keep)
        .filter(|(_, k)| **k)
        .flat_map(|(f, _)| f.iter().copied())
        .collect();
    RadianceField::from_geometry(Arc::new(FieldGeometry::new(coords, v, o)?), feats)
}
