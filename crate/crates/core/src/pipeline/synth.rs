//! Procedural scenes of colored boxes and spheres seen from a camera ring.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::{render_view, Scene};
use crate::error::{Error, Result};
use crate::field::sh::SH_C0;
use crate::field::{RadianceField, RenderSettings, FIELD_CHANNELS, SH_BASIS};
use crate::geometry::{backproject_frame, Camera, Pose, RgbdFrame, Vec3};
use crate::sparse::{Coord, SparseTensor};

/// Raw density of occupied ground-truth voxels.
pub const GT_DENSITY: f64 = 1e5;
/// Raw density of the empty shell around objects; places the surface on the voxel faces.
const SHELL_DENSITY: f64 = -1e5;
/// Occupied voxels kept below each surface.
const SURFACE_LAYERS: i32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Side of the cube holding the objects, centered on the origin.
    pub extent: f64,
    pub objects: usize,
    /// Ring cameras; the last one is held out.
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub voxel_size: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Add degree 1 and 2 SH terms to object colors.
    pub view_dependent: bool,
    pub max_overlap: f64,
    pub max_attempts: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            extent: 1.0,
            objects: 3,
            cameras: 7,
            width: 96,
            height: 96,
            fov_deg: 40.0,
            voxel_size: 4e-3,
            camera_radius: 2.5,
            camera_height: 0.8,
            view_dependent: false,
            max_overlap: 0.2,
            max_attempts: 20,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 cameras, got {}",
                self.cameras
            )));
        }
        if self.objects == 0 {
            return Err(Error::invalid("need at least one object"));
        }
        if !(self.extent > 0.0 && self.voxel_size > 0.0 && self.voxel_size < self.extent) {
            return Err(Error::invalid(
                "extent and voxel size must be positive with voxel < extent",
            ));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid("field of view must lie in (0, 180) degrees"));
        }
        if self.camera_radius.hypot(self.camera_height) <= self.extent {
            return Err(Error::invalid(
                "cameras must stay outside the object region",
            ));
        }
        if self.width == 0 || self.height == 0 || self.max_attempts == 0 {
            return Err(Error::invalid(
                "image size and attempt count must be positive",
            ));
        }
        Ok(())
    }

    /// Ray range covering the object region from every camera.
    pub fn render_range(&self) -> (f64, f64) {
        let d = self.camera_radius.hypot(self.camera_height);
        let r = self.extent * 3f64.sqrt() / 2.0 + 2.0 * self.voxel_size;
        (d - r, d + r)
    }

    pub fn render_settings(&self) -> RenderSettings {
        let (near, far) = self.render_range();
        RenderSettings::for_cell(self.voxel_size, near, far)
    }
}

/// One ground-truth primitive; boxes are in voxel units so their faces lie
/// on voxel boundaries.
#[derive(Clone, Debug, PartialEq)]
pub enum SynthObject {
    Box {
        min: Coord,
        max: Coord,
        sh: [f64; 27],
    },
    Sphere {
        center: Vec3,
        radius: f64,
        sh: [f64; 27],
    },
}

impl SynthObject {
    fn sh(&self) -> &[f64; 27] {
        match self {
            Self::Box { sh, .. } | Self::Sphere { sh, .. } => sh,
        }
    }

    /// Occupied voxels near the surface.
    fn voxels(&self, voxel: f64) -> Vec<Coord> {
        let mut out = Vec::new();
        match self {
            Self::Box { min, max, .. } => {
                for x in min[0]..max[0] {
                    for y in min[1]..max[1] {
                        for z in min[2]..max[2] {
                            let c = [x, y, z];
                            let depth = (0..3)
                                .map(|a| (c[a] - min[a]).min(max[a] - 1 - c[a]))
                                .min()
                                .unwrap_or(0);
                            if depth < SURFACE_LAYERS {
                                out.push(c);
                            }
                        }
                    }
                }
            }
            Self::Sphere { center, radius, .. } => {
                let lo = ((center - Vec3::repeat(*radius)) / voxel).map(|v| v.floor() as i32);
                let hi = ((center + Vec3::repeat(*radius)) / voxel).map(|v| v.ceil() as i32);
                for x in lo.x..=hi.x {
                    for y in lo.y..=hi.y {
                        for z in lo.z..=hi.z {
                            let p =
                                Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * voxel;
                            let d = (p - center).norm();
                            if d <= *radius && d > radius - SURFACE_LAYERS as f64 * voxel {
                                out.push([x, y, z]);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Field of the objects: occupied voxels at [`GT_DENSITY`], wrapped in a
/// one-voxel shell of strongly negative density carrying the neighbor's color.
/// Later objects overwrite earlier ones.
pub fn build_field(objects: &[SynthObject], voxel: f64) -> Result<RadianceField> {
    let mut occupied: FxHashMap<Coord, usize> = FxHashMap::default();
    for (i, o) in objects.iter().enumerate() {
        for c in o.voxels(voxel) {
            occupied.insert(c, i);
        }
    }
    let mut shell: FxHashMap<Coord, usize> = FxHashMap::default();
    for (c, &i) in &occupied {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if !occupied.contains_key(&n) {
                        // lowest object index wins so the result does not depend on map order
                        let e = shell.entry(n).or_insert(i);
                        *e = (*e).min(i);
                    }
                }
            }
        }
    }
    let mut rows: Vec<(Coord, usize, f64)> = occupied
        .into_iter()
        .map(|(c, i)| (c, i, GT_DENSITY))
        .chain(shell.into_iter().map(|(c, i)| (c, i, SHELL_DENSITY)))
        .collect();
    rows.sort_unstable_by_key(|r| r.0);
    let mut coords = Vec::with_capacity(rows.len());
    let mut feats = Vec::with_capacity(rows.len() * FIELD_CHANNELS);
    for (c, i, raw) in rows {
        coords.push(c);
        feats.extend_from_slice(objects[i].sh());
        feats.push(raw);
    }
    debug_assert_eq!(feats.len() % FIELD_CHANNELS, 0);
    RadianceField::new(
        SparseTensor::new(coords, feats, FIELD_CHANNELS, 1)?,
        voxel,
        Vec3::zeros(),
    )
}

/// Fraction of `a`'s pixels whose back-projected depth lands inside `b`'s frustum.
pub fn view_overlap(a: &RgbdFrame, b: &Camera) -> f64 {
    let cloud = backproject_frame(a);
    let inside = cloud.positions.iter().filter(|p| b.in_frustum(p)).count();
    inside as f64 / (a.camera.width * a.camera.height) as f64
}

fn random_sh(rng: &mut ChaCha8Rng, view_dependent: bool) -> [f64; 27] {
    let mut sh = [0.0; 27];
    for ch in 0..3 {
        let c: f64 = rng.gen_range(0.15..0.85);
        sh[ch * SH_BASIS] = (c / (1.0 - c)).ln() / SH_C0;
        if view_dependent {
            for m in 1..SH_BASIS {
                sh[ch * SH_BASIS + m] = rng.gen_range(-1.5..1.5);
            }
        }
    }
    sh
}

fn random_objects(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<SynthObject> {
    let half = spec.extent / 2.0;
    let v = spec.voxel_size;
    (0..spec.objects)
        .map(|_| {
            let sh = random_sh(rng, spec.view_dependent);
            if rng.gen_bool(0.5) {
                let size = Vec3::from_fn(|_, _| rng.gen_range(0.2..0.4) * spec.extent);
                let lo = Vec3::from_fn(|a, _| rng.gen_range(-half..half - size[a]));
                let min = [0, 1, 2].map(|a| (lo[a] / v).round() as i32);
                let max = [0, 1, 2]
                    .map(|a| min[a] + ((size[a] / v).round() as i32).max(2 * SURFACE_LAYERS));
                SynthObject::Box { min, max, sh }
            } else {
                let radius = rng.gen_range(0.1..0.2) * spec.extent;
                let center = Vec3::from_fn(|_, _| rng.gen_range(-half + radius..half - radius));
                SynthObject::Sphere { center, radius, sh }
            }
        })
        .collect()
}

fn ring_cameras(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Result<Vec<Camera>> {
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..spec.cameras)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / spec.cameras as f64;
            let eye = Vec3::new(
                spec.camera_radius * a.cos(),
                spec.camera_radius * a.sin(),
                spec.camera_height,
            );
            let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::z())?;
            Camera::with_fov(spec.width, spec.height, spec.fov_deg.to_radians(), pose)
        })
        .collect()
}

/// Deterministic scene for `seed`; the last ring camera is the novel view.
pub fn generate_synthetic_scene(seed: u64, spec: &SynthSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = spec.render_settings();
    let mut worst = f64::NAN;
    for _ in 0..spec.max_attempts {
        let objects = random_objects(&mut rng, spec);
        let cameras = ring_cameras(&mut rng, spec)?;
        let field = build_field(&objects, spec.voxel_size)?;
        let mut frames = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let (rgb, depth) = render_view(&field, cam, &settings)?;
            frames.push(RgbdFrame::new(
                rgb.map(|v| v.clamp(0.0, 1.0)),
                depth,
                cam.clone(),
            )?);
        }
        worst = max_pairwise_overlap(&frames);
        if worst <= spec.max_overlap {
            let novel = vec![frames.pop().expect("at least two cameras")];
            return Ok(Scene {
                id: format!("synth-{seed}"),
                seen: frames,
                novel,
                ground_truth: Some(field),
            });
        }
    }
    Err(Error::Infeasible(format!(
        "no layout with pairwise overlap <= {} after {} attempts (last {worst:.3})",
        spec.max_overlap, spec.max_attempts
    )))
}

pub fn max_pairwise_overlap(frames: &[RgbdFrame]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in frames.iter().enumerate() {
        for (j, b) in frames.iter().enumerate() {
            if i != j {
                worst = worst.max(view_overlap(a, &b.camera));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::DENSITY_CHANNEL;
    use crate::geometry::{all_pixels, generate_rays};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            width: 32,
            height: 32,
            voxel_size: 1.0 / 32.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let spec = small_spec();
        let a = generate_synthetic_scene(5, &spec).unwrap();
        let b = generate_synthetic_scene(5, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seen.len(), 6);
        assert_eq!(a.novel.len(), 1);
        let c = generate_synthetic_scene(6, &spec).unwrap();
        assert_ne!(a.seen[0].rgb, c.seen[0].rgb);
    }

    #[test]
    fn views_overlap_little() {
        let spec = small_spec();
        let s = generate_synthetic_scene(1, &spec).unwrap();
        let frames: Vec<RgbdFrame> = s.seen.iter().chain(&s.novel).cloned().collect();
        for (i, a) in frames.iter().enumerate() {
            let valid = (0..32 * 32)
                .filter(|&k| a.depth_at(k / 32, k % 32).is_some())
                .count();
            assert!(valid > 0, "view {i} sees nothing");
            for (j, b) in frames.iter().enumerate() {
                if i == j {
                    continue;
                }
                // independent count: project every valid pixel by hand
                let cam = &a.camera;
                let mut inside = 0;
                for row in 0..cam.height {
                    for col in 0..cam.width {
                        let Some(z) = a.depth_at(row, col) else {
                            continue;
                        };
                        let local = Vec3::new(
                            (col as f64 - cam.cx) * z / cam.fx,
                            (row as f64 - cam.cy) * z / cam.fy,
                            z,
                        );
                        let world = cam.pose.rotation * local + cam.pose.translation;
                        let q = b.camera.pose.rotation.transpose()
                            * (world - b.camera.pose.translation);
                        if q.z <= 0.0 {
                            continue;
                        }
                        let u = b.camera.fx * q.x / q.z + b.camera.cx;
                        let v = b.camera.fy * q.y / q.z + b.camera.cy;
                        if u >= -0.5 && u < 31.5 && v >= -0.5 && v < 31.5 {
                            inside += 1;
                        }
                    }
                }
                let frac = inside as f64 / 1024.0;
                assert!((frac - view_overlap(a, &b.camera)).abs() < 1e-12);
                assert!(frac <= 0.2, "views {i},{j} overlap {frac}");
            }
        }
    }

    #[test]
    fn impossible_overlap_is_reported() {
        let spec = SynthSpec {
            max_overlap: 0.0,
            max_attempts: 2,
            ..small_spec()
        };
        assert!(matches!(
            generate_synthetic_scene(0, &spec),
            Err(Error::Infeasible(_))
        ));
        assert!(generate_synthetic_scene(
            0,
            &SynthSpec {
                cameras: 1,
                ..small_spec()
            }
        )
        .is_err());
    }

    /// Distance along the ray to an axis-aligned box by the slab method.
    fn slab_hit(o: Vec3, d: Vec3, lo: Vec3, hi: Vec3) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let (p, q) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
            t0 = t0.max(p.min(q));
            t1 = t1.min(p.max(q));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    #[test]
    fn box_face_depth_matches_ray_box_intersection() {
        let v = 1.0 / 32.0;
        let sh = random_sh(&mut ChaCha8Rng::seed_from_u64(0), false);
        let obj = SynthObject::Box {
            min: [-6, -5, -4],
            max: [5, 6, 3],
            sh,
        };
        let field = build_field(&[obj], v).unwrap();
        let pose = Pose::look_at(Vec3::new(1.6, 0.3, 0.5), Vec3::zeros(), Vec3::z()).unwrap();
        let cam = Camera::with_fov(48, 48, 40f64.to_radians(), pose).unwrap();
        let settings = RenderSettings::for_cell(v, 0.5, 3.0);
        let (_, depth) = render_view(&field, &cam, &settings).unwrap();
        let (lo, hi) = (
            Vec3::new(-6.0, -5.0, -4.0) * v,
            Vec3::new(5.0, 6.0, 3.0) * v,
        );
        let mut checked = 0;
        for ray in generate_rays(&cam, &all_pixels(&cam)).unwrap() {
            let (row, col) = ray.pixel;
            let Some(t) = slab_hit(ray.origin, ray.direction, lo, hi) else {
                assert_eq!(depth.get(row, col, 0), 0.0);
                continue;
            };
            // trilinear blending rounds the box within a voxel of its edges
            let hit = ray.origin + t * ray.direction;
            let near_bounds = (0..3)
                .filter(|&a| (hit[a] - lo[a]).min(hi[a] - hit[a]) < v)
                .count();
            if near_bounds >= 2 {
                continue;
            }
            let z = t * cam.z_per_distance(row, col);
            assert!(
                (depth.get(row, col, 0) - z).abs() <= settings.step,
                "{row},{col}: {} vs {z}",
                depth.get(row, col, 0)
            );
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn dc_objects_render_their_color() {
        let v = 1.0 / 32.0;
        let mut sh = [0.0; 27];
        let color: [f64; 3] = [0.2, 0.5, 0.8];
        for c in 0..3 {
            sh[c * 9] = (color[c] / (1.0 - color[c])).ln() / SH_C0;
        }
        let field = build_field(
            &[SynthObject::Sphere {
                center: Vec3::zeros(),
                radius: 0.3,
                sh,
            }],
            v,
        )
        .unwrap();
        let pose = Pose::look_at(Vec3::new(0.0, -2.0, 0.2), Vec3::zeros(), Vec3::z()).unwrap();
        let cam = Camera::with_fov(16, 16, 30f64.to_radians(), pose).unwrap();
        let (rgb, _) = render_view(&field, &cam, &RenderSettings::for_cell(v, 1.0, 3.0)).unwrap();
        let px = rgb.pixel(8, 8);
        for c in 0..3 {
            assert!((px[c] - color[c]).abs() < 1e-3, "{px:?}");
        }
        assert_eq!(field.feat(0)[DENSITY_CHANNEL].abs(), GT_DENSITY);
    }
}
