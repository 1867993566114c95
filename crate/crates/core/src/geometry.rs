//! Pinhole cameras, rays, RGB-D back-projection and rigid scene rotation.
//!
//! Camera frame: `x` along image columns, `y` along image rows, `z` forward.
//! Poses map camera coordinates to world coordinates.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

pub type Vec3 = Vector3<f64>;

const ROTATION_TOL: f64 = 1e-6;
const UNIT_AXIS_TOL: f64 = 1e-9;

/// Rigid camera-to-world transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate(ROTATION_TOL)?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Checks orthonormality and a positive determinant within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        if !r
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("pose contains non-finite entries"));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > tol {
            return Err(Error::invalid(format!(
                "pose rotation is not orthonormal (deviation {err:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::invalid(format!(
                "pose rotation has determinant {det:.6}, expected +1"
            )));
        }
        Ok(())
    }

    /// Builds a pose at `eye` looking at `target`; image rows point away from `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: up is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Ok(Self {
            rotation,
            translation: eye,
        })
    }

    /// 4x4 row-major homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_row_major(m: &[f64; 16], tol: f64) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        let bottom_err = m[12]
            .abs()
            .max(m[13].abs())
            .max(m[14].abs())
            .max((m[15] - 1.0).abs());
        if bottom_err > tol {
            return Err(Error::invalid("pose bottom row must be (0, 0, 0, 1)"));
        }
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate(tol)?;
        Ok(pose)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    #[inline]
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Pinhole camera with pixel-unit intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: Pose,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with a symmetric horizontal field of view and the principal point at the image center.
    pub fn with_fov(width: usize, height: usize, fov_x: f64, pose: Pose) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            width,
            height,
            fx,
            fx,
            0.5 * width as f64,
            0.5 * height as f64,
            pose,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera has zero-sized image"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid("camera cx outside (0, width)"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("camera cy outside (0, height)"));
        }
        self.pose.validate(ROTATION_TOL)
    }

    pub fn origin(&self) -> Vec3 {
        self.pose.translation
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.pose.rotation.column(2).into_owned()
    }

    /// Projects a world point with the integer-pixel convention used by
    /// [`backproject_frame`]. Returns `(row, col, z)`; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let q = self.pose.inverse_transform_point(p);
        if q.z <= 0.0 {
            return None;
        }
        let col = self.fx * q.x / q.z + self.cx;
        let row = self.fy * q.y / q.z + self.cy;
        Some((row, col, q.z))
    }

    /// Whether `p` falls inside the viewing frustum (in front and within the image).
    pub fn in_frustum(&self, p: &Vec3) -> bool {
        match self.project(p) {
            Some((row, col, _)) => {
                row >= -0.5
                    && row < self.height as f64 - 0.5
                    && col >= -0.5
                    && col < self.width as f64 - 0.5
            }
            None => false,
        }
    }

    /// Camera-frame unit direction through the center of pixel `(row, col)`.
    pub fn pixel_direction_camera(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }

    /// Factor converting a ray distance through pixel `(row, col)` into z-depth.
    pub fn z_per_distance(&self, row: usize, col: usize) -> f64 {
        self.pixel_direction_camera(row, col).z
    }
}

/// One posed RGB-D view. Depth is camera-frame z in scene units;
/// non-finite or non-positive samples are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub rgb: Image,
    pub depth: Image,
    pub camera: Camera,
}

impl RgbdFrame {
    pub fn new(rgb: Image, depth: Image, camera: Camera) -> Result<Self> {
        let frame = Self { rgb, depth, camera };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        if self.rgb.width() != w || self.rgb.height() != h || self.rgb.channels() != 3 {
            return Err(Error::invalid("rgb image does not match camera resolution"));
        }
        if self.depth.width() != w || self.depth.height() != h || self.depth.channels() != 1 {
            return Err(Error::invalid(
                "depth image does not match camera resolution",
            ));
        }
        if self.rgb.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("rgb values must lie in [0, 1]"));
        }
        Ok(())
    }

    #[inline]
    pub fn depth_at(&self, row: usize, col: usize) -> Option<f64> {
        let z = self.depth.get(row, col, 0);
        (z.is_finite() && z > 0.0).then_some(z)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Vec3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vec3, color: Vec3) {
        self.positions.push(position);
        self.colors.push(color);
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        let sum = self.positions.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    /// Parametric entry/exit of a ray; `None` if it misses.
    pub fn intersect(&self, origin: &Vec3, direction: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if direction[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / direction[i];
            let (a, b) = (
                (self.min[i] - origin[i]) * inv,
                (self.max[i] - origin[i]) * inv,
            );
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// One world-space point per valid-depth pixel, colored by the rgb image.
pub fn backproject_frame(frame: &RgbdFrame) -> PointCloud {
    let cam = &frame.camera;
    let mut cloud = PointCloud::default();
    for row in 0..cam.height {
        for col in 0..cam.width {
            let Some(z) = frame.depth_at(row, col) else {
                continue;
            };
            let local = Vec3::new(
                (col as f64 - cam.cx) * z / cam.fx,
                (row as f64 - cam.cy) * z / cam.fy,
                z,
            );
            let px = frame.rgb.pixel(row, col);
            cloud.push(
                cam.pose.transform_point(&local),
                Vec3::new(px[0], px[1], px[2]),
            );
        }
    }
    cloud
}

/// Rays through pixel centers.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= camera.height || col >= camera.width {
                return Err(Error::invalid(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    camera.height, camera.width
                )));
            }
            Ok(Ray {
                origin: camera.pose.translation,
                direction: camera
                    .pose
                    .transform_vector(&camera.pixel_direction_camera(row, col))
                    .normalize(),
                pixel: (row, col),
            })
        })
        .collect()
}

/// Every pixel of the image, row-major.
pub fn all_pixels(camera: &Camera) -> Vec<(usize, usize)> {
    (0..camera.height)
        .flat_map(|r| (0..camera.width).map(move |c| (r, c)))
        .collect()
}

/// Rotation by `angle` about the unit `axis` through `pivot`.
#[derive(Clone, Debug)]
pub struct RigidRotation {
    pub rotation: Matrix3<f64>,
    pub pivot: Vec3,
}

impl RigidRotation {
    pub fn new(angle: f64, axis: Vec3, pivot: Vec3) -> Result<Self> {
        let norm = axis.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_AXIS_TOL {
            return Err(Error::invalid(format!(
                "rotation axis must be unit length (|axis| = {norm})"
            )));
        }
        let rotation = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).into_inner();
        Ok(Self { rotation, pivot })
    }

    #[inline]
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.pivot) + self.pivot
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * pose.rotation,
            translation: self.apply_point(&pose.translation),
        }
    }

    pub fn apply_camera(&self, camera: &Camera) -> Camera {
        Camera {
            pose: self.apply_pose(&camera.pose),
            ..camera.clone()
        }
    }
}

/// Rigidly rotates a cloud together with its cameras.
pub fn rotate_scene(
    cloud: &PointCloud,
    cameras: &[Camera],
    angle: f64,
    axis: Vec3,
    pivot: Vec3,
) -> Result<(PointCloud, Vec<Camera>)> {
    let rot = RigidRotation::new(angle, axis, pivot)?;
    let rotated = PointCloud {
        positions: cloud.positions.iter().map(|p| rot.apply_point(p)).collect(),
        colors: cloud.colors.clone(),
    };
    let cams = cameras.iter().map(|c| rot.apply_camera(c)).collect();
    Ok((rotated, cams))
}

pub fn scene_bounds(cloud: &PointCloud, margin: f64) -> Result<Aabb> {
    let first = cloud
        .positions
        .first()
        .ok_or_else(|| Error::invalid("scene_bounds of an empty cloud"))?;
    let (mut min, mut max) = (*first, *first);
    for p in &cloud.positions[1..] {
        min = min.inf(p);
        max = max.sup(p);
    }
    let m = Vec3::repeat(margin);
    Ok(Aabb {
        min: min - m,
        max: max + m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn test_camera(pose: Pose) -> Camera {
        Camera::new(32, 24, 30.0, 28.0, 16.0, 12.0, pose).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let rot =
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.gen_range(0.0..2.0 * PI));
        Pose::new(
            rot.into_inner(),
            Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
        )
        .unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> RgbdFrame {
        let cam = test_camera(random_pose(rng));
        let mut rgb = Image::new(cam.width, cam.height, 3);
        let mut depth = Image::new(cam.width, cam.height, 1);
        for v in rgb.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in depth.data_mut() {
            *v = if rng.gen_bool(0.8) {
                rng.gen_range(0.3..5.0)
            } else {
                0.0
            };
        }
        RgbdFrame::new(rgb, depth, cam).unwrap()
    }

    #[test]
    fn principal_point_backprojects_onto_axis() {
        let cam = test_camera(Pose::identity());
        let mut depth = Image::new(32, 24, 1);
        depth.set(12, 16, 0, 2.0);
        let frame = RgbdFrame::new(Image::filled(32, 24, 3, 0.5), depth, cam).unwrap();
        let cloud = backproject_frame(&frame);
        assert_eq!(cloud.len(), 1);
        assert!((cloud.positions[0] - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_depths_give_empty_cloud() {
        let cam = test_camera(Pose::identity());
        let mut depth = Image::filled(32, 24, 1, -1.0);
        depth.set(0, 0, 0, f64::NAN);
        depth.set(0, 1, 0, f64::INFINITY);
        depth.set(0, 2, 0, 0.0);
        let frame = RgbdFrame::new(Image::new(32, 24, 3), depth, cam).unwrap();
        assert!(backproject_frame(&frame).is_empty());
    }

    #[test]
    fn backprojection_round_trips_through_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let frame = random_frame(&mut rng);
            let cloud = backproject_frame(&frame);
            let mut k = 0;
            for row in 0..frame.camera.height {
                for col in 0..frame.camera.width {
                    let Some(z) = frame.depth_at(row, col) else {
                        continue;
                    };
                    let (r, c, d) = frame.camera.project(&cloud.positions[k]).unwrap();
                    assert!((r - row as f64).abs() < 1e-6);
                    assert!((c - col as f64).abs() < 1e-6);
                    assert!((d - z).abs() < 1e-6);
                    k += 1;
                }
            }
            assert_eq!(k, cloud.len());
        }
    }

    #[test]
    fn rays_through_principal_point_and_translated_origin() {
        // cx, cy at pixel corners so the center of pixel (cy - 0.5, cx - 0.5) is on axis
        let cam = Camera::new(32, 24, 30.0, 28.0, 16.5, 12.5, Pose::identity()).unwrap();
        let rays = generate_rays(&cam, &[(12, 16)]).unwrap();
        assert!((rays[0].direction - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

        let cam = test_camera(Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)));
        let rays = generate_rays(&cam, &all_pixels(&cam)).unwrap();
        assert!(rays.iter().all(|r| r.origin == Vec3::new(1.0, 2.0, 3.0)));
        assert!(generate_rays(&cam, &[(24, 0)]).is_err());
        assert!(generate_rays(&cam, &[(0, 32)]).is_err());
    }

    #[test]
    fn ray_directions_are_unit_and_hit_backprojected_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = random_frame(&mut rng);
        let cam = &frame.camera;
        let rays = generate_rays(cam, &all_pixels(cam)).unwrap();
        for ray in &rays {
            assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
            let (row, col) = ray.pixel;
            let Some(z) = frame.depth_at(row, col) else {
                continue;
            };
            // the point at z-depth along the pixel-center ray
            let t = z / cam.z_per_distance(row, col);
            let p = ray.origin + t * ray.direction;
            let local = cam.pose.inverse_transform_point(&p);
            assert!((local.z - z).abs() < 1e-6);
            assert!((cam.fx * local.x / local.z + cam.cx - (col as f64 + 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_identity_and_periodicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = backproject_frame(&random_frame(&mut rng));
        let cams = vec![test_camera(random_pose(&mut rng))];
        let axis = Vec3::z();
        let (c0, k0) = rotate_scene(&cloud, &cams, 0.0, axis, Vec3::new(0.3, 0.1, 0.0)).unwrap();
        for (a, b) in c0.positions.iter().zip(&cloud.positions) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!((k0[0].pose.translation - cams[0].pose.translation).norm() < 1e-12);
        assert_eq!(k0[0].pose.rotation, cams[0].pose.rotation);
        let (c1, k1) =
            rotate_scene(&cloud, &cams, 2.0 * PI, axis, Vec3::new(0.3, 0.1, 0.0)).unwrap();
        for (a, b) in c1.positions.iter().zip(&cloud.positions) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!((k1[0].pose.rotation - cams[0].pose.rotation).abs().max() < 1e-9);
        assert!(rotate_scene(&cloud, &cams, 1.0, Vec3::new(0.0, 0.0, 2.0), Vec3::zeros()).is_err());
    }

    #[test]
    fn rotation_preserves_point_camera_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = backproject_frame(&random_frame(&mut rng));
        let cams: Vec<_> = (0..3).map(|_| test_camera(random_pose(&mut rng))).collect();
        let axis = Vec3::new(0.3, -0.5, 0.8).normalize();
        let (rc, rk) = rotate_scene(&cloud, &cams, 1.234, axis, Vec3::new(0.5, -1.0, 2.0)).unwrap();
        for (p, q) in cloud.positions.iter().zip(&rc.positions).step_by(7) {
            for (a, b) in cams.iter().zip(&rk) {
                let d0 = (p - a.origin()).norm();
                let d1 = (q - b.origin()).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
            let d0 = (p - cloud.positions[0]).norm();
            let d1 = (q - rc.positions[0]).norm();
            assert!((d0 - d1).abs() < 1e-9);
        }
        for c in &rk {
            c.validate().unwrap();
        }
    }

    #[test]
    fn bounds_examples() {
        let mut cloud = PointCloud::default();
        assert!(scene_bounds(&cloud, 0.0).is_err());
        let p = Vec3::new(1.0, -2.0, 0.5);
        cloud.push(p, Vec3::zeros());
        let b = scene_bounds(&cloud, 0.1).unwrap();
        assert!((b.min - (p - Vec3::repeat(0.1))).norm() < 1e-15);
        assert!((b.max - (p + Vec3::repeat(0.1))).norm() < 1e-15);

        let mut two = PointCloud::default();
        two.push(Vec3::zeros(), Vec3::zeros());
        two.push(Vec3::repeat(1.0), Vec3::zeros());
        let b = scene_bounds(&two, 0.0).unwrap();
        assert_eq!(b.min, Vec3::zeros());
        assert_eq!(b.max, Vec3::repeat(1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = backproject_frame(&random_frame(&mut rng));
        let b = scene_bounds(&cloud, 0.0).unwrap();
        assert!(cloud.positions.iter().all(|p| b.contains(p)));
    }

    #[test]
    fn look_at_is_rigid_and_points_at_target() {
        let pose = Pose::look_at(Vec3::new(2.0, 1.0, 0.5), Vec3::zeros(), Vec3::z()).unwrap();
        pose.validate(1e-12).unwrap();
        let fwd = pose.rotation.column(2).into_owned();
        assert!((fwd - (-Vec3::new(2.0, 1.0, 0.5)).normalize()).norm() < 1e-12);
        let m = pose.to_row_major();
        assert_eq!(Pose::from_row_major(&m, 1e-9).unwrap(), pose);
    }
}
